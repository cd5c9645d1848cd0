"""ResNet18 baseline, dual-head variant and the multi-scale improved ResNet18.

The improved network keeps the ResNet18 skeleton but swaps every basic block
in stages 2-4 for a :class:`MultiScaleBlock`: parallel branches that
average-pool by a factor ``s``, run a depthwise-separable 3x3 convolution and
upsample back by ``s``, followed by a 1x1 fuse over the concatenated branches
and a residual skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .permute import NUM_PERMUTATIONS
from .tensor import Tensor, add, concat_channels, no_grad, pool2d, reduce_mean, relu, upsample_nearest

VARIANTS = ("baseline", "improved")
STEMS = ("small_input", "large_input")


@dataclass
class ModelConfig:
    variant: str = "baseline"
    num_classes: int = 10
    stem: str = "small_input"
    permutation_head: bool = False
    feature_tap_stage: int = 3
    multiscale_scales: tuple[int, ...] = (1, 2, 4)
    # None means 32 for the small stem and 224 for the large one.
    input_size: Optional[int] = None
    base_width: int = 64
    zero_init_permutation_head: bool = False

    def __post_init__(self):
        self.multiscale_scales = tuple(int(s) for s in self.multiscale_scales)
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stem not in STEMS:
            raise ContractError(f"stem must be one of {STEMS}, got {self.stem!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")
        if not 1 <= self.feature_tap_stage <= 4:
            raise ContractError(f"feature_tap_stage must be in 1..4, got {self.feature_tap_stage}")
        if not self.multiscale_scales or any(s < 1 for s in self.multiscale_scales):
            raise ContractError(f"invalid multiscale_scales {self.multiscale_scales}")
        if self.base_width < 1:
            raise ContractError("base_width must be positive")
        if self.input_size is None:
            self.input_size = 32 if self.stem == "small_input" else 224
        if self.input_size < 2 or self.input_size % 2:
            raise ContractError(f"input_size must be even, got {self.input_size}")


@dataclass
class ForwardOutput:
    class_logits: Tensor
    perm_logits: Optional[Tensor]
    tapped_features: Tensor
    stage_outputs: list = field(default_factory=list, repr=False)


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        self.shortcut = None
        self.shortcut_bn = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng)
            self.shortcut_bn = BatchNorm2d(out_channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x), training)
        return relu(add(out, skip))


class DepthwiseSeparableConv(Module):
    """Depthwise 3x3 (padding 1) followed by a pointwise 1x1; no bias."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.depthwise = Conv2d(in_channels, in_channels, 3, stride, 1, groups=in_channels, rng=rng)
        self.pointwise = Conv2d(in_channels, out_channels, 1, 1, 0, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class MultiScaleBranch(Module):
    def __init__(self, in_channels: int, out_channels: int, scale: int, stride: int, rng: np.random.Generator):
        self.scale = scale
        self.conv = DepthwiseSeparableConv(in_channels, out_channels, stride, rng)
        self.bn = BatchNorm2d(out_channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.scale > 1:
            x = pool2d(x, "avg", self.scale, self.scale)
        out = relu(self.bn(self.conv(x), training))
        return upsample_nearest(out, self.scale)


class MultiScaleBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, scales: Sequence[int], stride: int = 1,
                 spatial: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        scales = tuple(int(s) for s in scales)
        if not scales:
            raise ContractError("multi-scale block needs at least one scale")
        if len(set(scales)) != len(scales) or any(s < 1 for s in scales):
            raise ContractError(f"invalid scales {scales}")
        if stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {stride}")
        if spatial is not None:
            _check_scales(scales, stride, spatial)
        rng = rng or np.random.default_rng(0)
        self.scales = scales
        self.stride = stride
        self.branches = [MultiScaleBranch(in_channels, out_channels, s, stride, rng) for s in scales]
        self.fuse = Conv2d(len(scales) * out_channels, out_channels, 1, rng=rng)
        self.fuse_bn = BatchNorm2d(out_channels)
        self.shortcut = None
        self.shortcut_bn = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng)
            self.shortcut_bn = BatchNorm2d(out_channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        _check_scales(self.scales, self.stride, x.shape[2])
        _check_scales(self.scales, self.stride, x.shape[3])
        merged = concat_channels([branch(x, training) for branch in self.branches])
        out = self.fuse_bn(self.fuse(merged), training)
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x), training)
        return relu(add(out, skip))


def _check_scales(scales: Sequence[int], stride: int, spatial: int) -> None:
    for s in scales:
        if spatial % (s * stride):
            raise ContractError(
                f"scale {s} (stride {stride}) does not divide feature-map side {spatial}"
            )


def build_multiscale_block(in_channels: int, out_channels: int, scales: Sequence[int] = (1, 2, 4),
                           stride: int = 1, spatial: Optional[int] = None,
                           rng: Optional[np.random.Generator] = None) -> MultiScaleBlock:
    return MultiScaleBlock(in_channels, out_channels, scales, stride, spatial, rng)


class ResNet18(Module):
    """Four stages of two blocks each, global average pool, linear head(s)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.base_width
        widths = (w, 2 * w, 4 * w, 8 * w)
        if config.stem == "small_input":
            self.stem_conv = Conv2d(3, w, 3, 1, 1, rng=rng)
            spatial = config.input_size
        else:
            self.stem_conv = Conv2d(3, w, 7, 2, 3, rng=rng)
            spatial = (config.input_size - 1) // 2 + 1
            spatial = (spatial - 1) // 2 + 1
        self.stem_bn = BatchNorm2d(w)

        self.stages: list[list[Module]] = []
        in_ch = w
        for idx, out_ch in enumerate(widths):
            blocks: list[Module] = []
            for j in range(2):
                stride = 2 if idx > 0 and j == 0 else 1
                if config.variant == "improved" and idx > 0:
                    scales = usable_scales(config.multiscale_scales, stride, spatial)
                    blocks.append(MultiScaleBlock(in_ch, out_ch, scales, stride, spatial, rng))
                else:
                    blocks.append(BasicBlock(in_ch, out_ch, stride, rng))
                spatial = (spatial - 1) // stride + 1
                in_ch = out_ch
            self.stages.append(blocks)
        self.fc = Linear(widths[-1], config.num_classes, rng=rng)
        self.perm_fc: Optional[Linear] = None
        self.seed = seed
        if config.permutation_head:
            attach_permutation_head(self, zero_init=config.zero_init_permutation_head)

    @property
    def feature_width(self) -> int:
        return 8 * self.config.base_width

    def stage_outputs(self, x: Tensor, training: bool, upto: int = 4) -> list[Tensor]:
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (3, c.input_size, c.input_size):
            raise ContractError(
                f"expected input [B, 3, {c.input_size}, {c.input_size}], got {x.shape}"
            )
        out = relu(self.stem_bn(self.stem_conv(x), training))
        if c.stem == "large_input":
            out = pool2d(out, "max", 3, 2, padding=1)
        outputs = []
        for blocks in self.stages[:upto]:
            for block in blocks:
                out = block(out, training)
            outputs.append(out)
        return outputs

    def __call__(self, x: Tensor, training: bool = True) -> ForwardOutput:
        return forward(self, x, training)


def usable_scales(scales: Sequence[int], stride: int, spatial: int) -> tuple[int, ...]:
    """Scales that tile a ``spatial``-sized map at ``stride``; scale 1 always fits an even map."""
    kept = tuple(s for s in scales if spatial % (s * stride) == 0)
    if not kept:
        raise ContractError(f"no multi-scale branch fits a {spatial}x{spatial} map at stride {stride}")
    return kept


def attach_permutation_head(model: ResNet18, zero_init: bool = False) -> ResNet18:
    """Add the 24-way permutation classifier on the shared pooled features.

    Uses its own generator stream so the backbone and class head initialise
    identically with or without it.
    """
    rng = np.random.default_rng([model.seed, NUM_PERMUTATIONS])
    model.perm_fc = Linear(model.feature_width, NUM_PERMUTATIONS, rng=rng, zero_init=zero_init)
    return model


def build_resnet18(config: ModelConfig, seed: int = 0) -> ResNet18:
    if config.variant != "baseline":
        raise ContractError("build_resnet18 expects variant='baseline'")
    return ResNet18(config, seed)


def build_improved_resnet18(config: ModelConfig, seed: int = 0) -> ResNet18:
    if config.variant != "improved":
        raise ContractError("build_improved_resnet18 expects variant='improved'")
    return ResNet18(config, seed)


def build_model(config: ModelConfig, seed: int = 0) -> ResNet18:
    return ResNet18(config, seed)


def forward(model: ResNet18, batch: Tensor, training: bool) -> ForwardOutput:
    stages = model.stage_outputs(batch, training)
    pooled = reduce_mean(stages[-1], axes=(2, 3))
    perm_logits = model.perm_fc(pooled) if model.perm_fc is not None else None
    return ForwardOutput(
        class_logits=model.fc(pooled),
        perm_logits=perm_logits,
        tapped_features=stages[model.config.feature_tap_stage - 1],
        stage_outputs=stages,
    )


def param_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def extract_feature_maps(model: ResNet18, image: Tensor, stage: int) -> Tensor:
    """Post-activation output of ``stage`` (1..4) in eval mode."""
    if not 1 <= stage <= 4:
        raise ContractError(f"stage must be in 1..4, got {stage}")
    with no_grad():
        return model.stage_outputs(image, training=False, upto=stage)[stage - 1]
