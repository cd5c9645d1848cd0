import numpy as np
import pytest

from ferronet.errors import ContractError
from ferronet.losses import LossConfig, total_loss
from ferronet.models import (
    ModelConfig,
    DepthwiseSeparableConv,
    attach_permutation_head,
    build_improved_resnet18,
    build_model,
    build_multiscale_block,
    build_resnet18,
    extract_feature_maps,
    param_count,
    usable_scales,
)
from ferronet.nn import Linear
from ferronet.tensor import Tensor


def conv(cin, cout, k, groups=1):
    return cout * (cin // groups) * k * k


def bn(c):
    return 2 * c


def baseline_oracle(width=64, classes=10, stem_k=3):
    """Layer-by-layer count of ResNet18 with 3x3/7x7 stem and no conv biases."""
    w = (width, 2 * width, 4 * width, 8 * width)
    total = conv(3, width, stem_k) + bn(width)
    cin = width
    for i, cout in enumerate(w):
        for j in range(2):
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
            if cin != cout or (i > 0 and j == 0):
                total += conv(cin, cout, 1) + bn(cout)
            cin = cout
    return total + w[-1] * classes + classes


def multiscale_oracle(cin, cout, n_scales, projection):
    branch = conv(cin, cin, 3, groups=cin) + conv(cin, cout, 1) + bn(cout)
    total = n_scales * branch + conv(n_scales * cout, cout, 1) + bn(cout)
    if projection:
        total += conv(cin, cout, 1) + bn(cout)
    return total


def improved_oracle(width=64, classes=10, n_scales=3):
    w = (width, 2 * width, 4 * width, 8 * width)
    total = conv(3, width, 3) + bn(width)
    total += 2 * (conv(width, width, 3) * 2 + bn(width) * 2)
    cin = width
    for cout in w[1:]:
        total += multiscale_oracle(cin, cout, n_scales, True)
        total += multiscale_oracle(cout, cout, n_scales, False)
        cin = cout
    return total + w[-1] * classes + classes


class TestBaseline:
    def test_shape_small(self, tiny_config, rng):
        out = build_resnet18(tiny_config)(Tensor(rng.normal(size=(2, 3, 32, 32))), training=True)
        assert out.class_logits.shape == (2, 10)
        assert out.perm_logits is None

    def test_large_stem(self, rng):
        cfg = ModelConfig(stem="large_input", num_classes=7, base_width=2)
        out = build_resnet18(cfg)(Tensor(rng.normal(size=(1, 3, 224, 224))), training=False)
        assert out.class_logits.shape == (1, 7)
        assert out.tapped_features.shape == (1, 8, 14, 14)

    def test_param_count_oracle(self):
        model = build_resnet18(ModelConfig())
        assert param_count(model) == baseline_oracle() == 11_173_962
        assert param_count(model) > 11_000_000

    def test_param_count_large_stem(self):
        cfg = ModelConfig(stem="large_input", num_classes=7, base_width=8)
        assert param_count(build_resnet18(cfg)) == baseline_oracle(8, 7, stem_k=7)

    def test_wrong_variant(self):
        with pytest.raises(ContractError):
            build_resnet18(ModelConfig(variant="improved"))
        with pytest.raises(ContractError):
            build_improved_resnet18(ModelConfig())

    def test_input_shape_checked(self, tiny_config):
        with pytest.raises(ContractError):
            build_model(tiny_config)(Tensor(np.zeros((1, 3, 16, 16))), training=False)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(variant="resnet50"), dict(num_classes=1), dict(feature_tap_stage=5),
        dict(stem="huge"), dict(multiscale_scales=()), dict(input_size=33),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            ModelConfig(**kwargs)


class TestMultiScale:
    def test_single_scale_preserves_shape(self, rng):
        block = build_multiscale_block(6, 6, (1,), rng=rng)
        assert block(Tensor(rng.normal(size=(2, 6, 5, 5))), training=True).shape == (2, 6, 5, 5)

    def test_all_branches_restored(self, rng):
        block = build_multiscale_block(4, 4, (1, 2, 4), rng=rng)
        x = Tensor(rng.normal(size=(2, 4, 8, 8)))
        assert all(b(x, True).shape == (2, 4, 8, 8) for b in block.branches)
        assert block(x, training=True).shape == (2, 4, 8, 8)

    @pytest.mark.parametrize("stride,side", [(1, 8), (2, 8), (2, 16), (1, 4)])
    def test_stride_shapes(self, rng, stride, side):
        block = build_multiscale_block(3, 5, (1, 2), stride=stride, rng=rng)
        out = block(Tensor(rng.normal(size=(1, 3, side, side))), training=True)
        assert out.shape == (1, 5, side // stride, side // stride)

    def test_scale_must_divide(self, rng):
        with pytest.raises(ContractError):
            build_multiscale_block(4, 4, (1, 4), spatial=6)
        block = build_multiscale_block(4, 4, (1, 4))
        with pytest.raises(ContractError):
            block(Tensor(np.zeros((1, 4, 6, 6))), training=False)

    def test_dw_separable_count(self):
        dw = DepthwiseSeparableConv(64, 64, 1, np.random.default_rng(0))
        assert param_count(dw) == 9 * 64 + 64 * 64 == 4672 < 9 * 64 * 64

    def test_block_count_oracle(self):
        assert param_count(build_multiscale_block(8, 16, (1, 2, 4), stride=2)) == multiscale_oracle(8, 16, 3, True)

    def test_usable_scales(self):
        assert usable_scales((1, 2, 4), 2, 28) == (1, 2)
        assert usable_scales((1, 2, 4), 1, 8) == (1, 2, 4)
        with pytest.raises(ContractError):
            usable_scales((3,), 1, 8)


class TestImproved:
    def test_param_count_oracle(self):
        improved = build_improved_resnet18(ModelConfig(variant="improved"))
        assert param_count(improved) == improved_oracle()
        assert param_count(improved) < param_count(build_resnet18(ModelConfig()))

    @pytest.mark.parametrize("width,stem", [(4, "small_input"), (16, "small_input"), (4, "large_input")])
    def test_smaller_than_baseline(self, width, stem):
        base = ModelConfig(base_width=width, stem=stem)
        imp = ModelConfig(variant="improved", base_width=width, stem=stem)
        assert param_count(build_model(imp)) < param_count(build_model(base))

    def test_shapes_with_head(self, rng):
        cfg = ModelConfig(variant="improved", base_width=4, permutation_head=True)
        out = build_model(cfg)(Tensor(rng.normal(size=(2, 3, 32, 32))), training=True)
        assert out.class_logits.shape == (2, 10)
        assert out.perm_logits.shape == (2, 24)


class TestHeadsAndTap:
    def test_tap_stage3_shape(self):
        model = build_model(ModelConfig(base_width=64))
        fmap = extract_feature_maps(model, Tensor(np.zeros((1, 3, 32, 32))), 3)
        assert fmap.shape == (1, 256, 8, 8)

    def test_tap_nonnegative(self, tiny_config, rng):
        out = build_model(tiny_config)(Tensor(rng.normal(size=(3, 3, 32, 32))), training=True)
        assert out.tapped_features.shape == (3, 16, 8, 8)
        assert np.all(out.tapped_features.data >= 0)

    def test_eval_deterministic(self, tiny_config, rng):
        model = build_model(tiny_config)
        x = Tensor(rng.normal(size=(2, 3, 32, 32)))
        a, b = model(x, training=False), model(x, training=False)
        np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)
        np.testing.assert_array_equal(extract_feature_maps(model, x, 2).data, extract_feature_maps(model, x, 2).data)

    @pytest.mark.parametrize("stage", [0, 5])
    def test_bad_stage(self, tiny_config, stage):
        with pytest.raises(ContractError):
            extract_feature_maps(build_model(tiny_config), Tensor(np.zeros((1, 3, 32, 32))), stage)

    def test_linear_count(self):
        assert param_count(Linear(512, 10)) == 5130

    def test_perm_head(self, tiny_config, rng):
        model = attach_permutation_head(build_model(tiny_config))
        assert model(Tensor(rng.normal(size=(2, 3, 32, 32))), training=True).perm_logits.shape == (2, 24)

    def test_zero_head_leaves_class_logits(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 32, 32)))
        plain = build_model(ModelConfig(base_width=4), seed=5)
        headed = build_model(ModelConfig(base_width=4, permutation_head=True, zero_init_permutation_head=True), seed=5)
        a, b = plain(x, training=False), headed(x, training=False)
        np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)
        assert np.all(b.perm_logits.data == 0.0)

    def test_head_does_not_change_backbone_init(self):
        plain = build_model(ModelConfig(base_width=4), seed=9).state_dict()
        headed = build_model(ModelConfig(base_width=4, permutation_head=True), seed=9).state_dict()
        for name, value in plain.items():
            np.testing.assert_array_equal(headed[name], value)

    @pytest.mark.parametrize("variant", ["baseline", "improved"])
    def test_gradient_reaches_every_parameter(self, rng, variant):
        model = build_model(ModelConfig(variant=variant, base_width=4, permutation_head=True), seed=1)
        out = model(Tensor(rng.normal(size=(4, 3, 32, 32))), training=True)
        total_loss(out.class_logits, [0, 1, 2, 3], out.perm_logits, [0, 5, 10, 23],
                   out.tapped_features, LossConfig()).total.backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None]
        assert not missing
