"""Feature-extraction losses and the composite training objective.

For a feature tensor X of shape [B, C, H, W]:

* channel means  Y[b, c] = mean over (H, W) of X[b, c]
* std loss       mean_b exp(-std_c(Y[b, :]))      (population std over channels)
* mean loss      mean_b exp(-mean_{c,h,w} X[b])
* feature loss   mix * std_loss + (1 - mix) * mean_loss   (mix = 0.5)
* total          classification + 0.5 * permutation + 1.0 * feature

Statistics are taken per sample, pushed through exp(-.) per sample and then
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .errors import ContractError
from .tensor import Tensor, exp, negate, reduce_mean, softmax_cross_entropy, sqrt_eps


@dataclass
class LossConfig:
    use_permutation_loss: bool = True
    use_feature_loss: bool = True
    permutation_weight: float = 0.5
    feature_weight: float = 1.0
    std_mean_mix: float = 0.5

    def __post_init__(self):
        if self.permutation_weight < 0 or self.feature_weight < 0:
            raise ContractError("loss weights must be non-negative")
        if not 0.0 <= self.std_mean_mix <= 1.0:
            raise ContractError("std_mean_mix must lie in [0, 1]")


@dataclass
class LossBreakdown:
    l_classification: float
    l_total: float
    l_permutation: Optional[float] = None
    l_std: Optional[float] = None
    l_mean: Optional[float] = None
    l_feature: Optional[float] = None
    # differentiable total; not part of the logged record
    total: Optional[Tensor] = None

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total"}

    def recompute_total(self, config: LossConfig) -> float:
        total = self.l_classification
        if self.l_permutation is not None:
            total += config.permutation_weight * self.l_permutation
        if self.l_feature is not None:
            total += config.feature_weight * self.l_feature
        return total


def _check_features(x: Tensor) -> None:
    if x.ndim != 4:
        raise ContractError(f"features must be [B, C, H, W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ContractError("features have an empty spatial extent")


def channel_means(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial averages."""
    _check_features(x)
    return reduce_mean(x, axes=(2, 3))


def loss_std(x: Tensor) -> Tensor:
    _check_features(x)
    if x.shape[1] < 2:
        raise ContractError("loss_std needs at least two channels")
    y = channel_means(x)
    centered = y - reduce_mean(y, axes=1, keepdims=True)
    std = sqrt_eps(reduce_mean(centered * centered, axes=1))
    return reduce_mean(exp(negate(std)))


def loss_mean(x: Tensor) -> Tensor:
    _check_features(x)
    return reduce_mean(exp(negate(reduce_mean(x, axes=(1, 2, 3)))))


def loss_feature(x: Tensor, mix: float = 0.5) -> Tensor:
    return loss_std(x) * mix + loss_mean(x) * (1.0 - mix)


def total_loss(
    class_logits: Tensor,
    class_labels,
    perm_logits: Optional[Tensor],
    perm_labels,
    tapped_features: Optional[Tensor],
    config: LossConfig,
) -> LossBreakdown:
    """Weighted sum of the enabled terms, with every term reported separately."""
    if config.use_permutation_loss and (perm_logits is None or perm_labels is None):
        raise ContractError("permutation loss enabled but permutation logits/labels missing")
    if config.use_feature_loss and tapped_features is None:
        raise ContractError("feature loss enabled but no tapped features given")

    l_cls = softmax_cross_entropy(class_logits, class_labels)
    total = l_cls
    out = LossBreakdown(l_classification=l_cls.item(), l_total=0.0)
    if config.use_permutation_loss:
        l_perm = softmax_cross_entropy(perm_logits, perm_labels)
        total = total + l_perm * config.permutation_weight
        out.l_permutation = l_perm.item()
    if config.use_feature_loss:
        l_std = loss_std(tapped_features)
        l_mean = loss_mean(tapped_features)
        l_feat = l_std * config.std_mean_mix + l_mean * (1.0 - config.std_mean_mix)
        total = total + l_feat * config.feature_weight
        out.l_std, out.l_mean, out.l_feature = l_std.item(), l_mean.item(), l_feat.item()
    out.l_total = total.item()
    out.total = total
    return out
