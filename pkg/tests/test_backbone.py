import numpy as np
import pytest

from dfanet import tensor as T
from dfanet.backbone import (
    REPEATS,
    Backbone,
    Block,
    BlockSpec,
    ConfigError,
    FCAttention,
    build_backbone,
    sigmoid,
)
from dfanet.cost import count_params
from dfanet.tensor import ShapeError, backward, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


class TestBuild:
    @pytest.mark.parametrize("variant,widths", [
        ("A", {"enc2": (12, 12, 48), "enc3": (24, 24, 96), "enc4": (48, 48, 192)}),
        ("B", {"enc2": (8, 8, 32), "enc3": (16, 16, 64), "enc4": (32, 32, 128)}),
    ])
    def test_widths_and_repeats(self, variant, widths):
        spec = build_backbone(variant)
        assert spec.include_conv1 and spec.conv1_width == 8 and spec.in_channels == 3
        for st in spec.stages:
            assert len(st.blocks) == REPEATS[st.name]
            assert all(b.widths == widths[st.name] for b in st.blocks)
            assert [b.stride for b in st.blocks] == [2] + [1] * (len(st.blocks) - 1)

    def test_variant_b_enc3(self):
        st = build_backbone("B").stage("enc3")
        assert len(st.blocks) == 6 and st.blocks[0].widths == (16, 16, 64)

    def test_aggregated_entry(self):
        spec = build_backbone("A", include_conv1=False, stage_in_channels={"enc2": 240})
        first = spec.stage("enc2").blocks[0]
        assert first.in_channels == 240 and first.shortcut == "projection"
        assert first.out_channels == 48

    def test_channel_closure(self):
        spec = build_backbone("A")
        prev = spec.conv1_width
        for st in spec.stages:
            for b in st.blocks:
                assert b.in_channels == prev
                prev = b.out_channels

    def test_shortcut_rule(self):
        assert BlockSpec(48, (12, 12, 48), 1).shortcut == "identity"
        assert BlockSpec(48, (12, 12, 48), 2).shortcut == "projection"
        assert BlockSpec(8, (12, 12, 48), 1).shortcut == "projection"

    def test_errors(self):
        with pytest.raises(ConfigError):
            build_backbone("C")
        with pytest.raises(ConfigError):
            build_backbone("A", include_conv1=False, stage_in_channels={"enc2": 0})
        with pytest.raises(ConfigError):
            build_backbone("A", stage_in_channels={"enc9": 4})


class TestForward:
    def test_stage_shapes_b(self):
        model = Backbone(build_backbone("B"), rng())
        with T.no_grad():
            out = model(T.randn((1, 3, 64, 64), 0))
        assert out.conv1.shape == (1, 8, 32, 32)
        assert out.enc2.shape == (1, 32, 16, 16)
        assert out.enc3.shape == (1, 64, 8, 8)
        assert out.enc4.shape == (1, 128, 4, 4)
        assert out.fca.shape == out.enc4.shape
        assert out.attention_vector.shape == (1, 128, 1, 1)

    def test_aggregated_input_shapes(self):
        spec = build_backbone("A", include_conv1=False, stage_in_channels={"enc2": 240})
        model = Backbone(spec, rng())
        with T.no_grad():
            out = model(T.randn((1, 240, 32, 32), 0))
        assert out.enc2.shape == (1, 48, 16, 16)

    def test_wrong_channels_names_stage(self):
        spec = build_backbone("A", include_conv1=False, stage_in_channels={"enc2": 240})
        with pytest.raises(ShapeError, match="enc2"):
            Backbone(spec, rng())(T.randn((1, 100, 16, 16), 0))

    def test_fca_is_exact_product(self):
        model = Backbone(build_backbone("B"), rng(3))
        with T.no_grad():
            out = model(T.randn((2, 3, 32, 32), 1))
        np.testing.assert_array_equal(out.fca.data, out.enc4.data * out.attention_vector.data)

    def test_param_count_independent_of_resolution(self):
        spec = build_backbone("A")
        assert count_params(spec, (64, 64)).total_params == count_params(spec, (1024, 2048)).total_params
        assert Backbone(spec, rng()).num_parameters() == count_params(spec).total_params


class TestBlockResidual:
    def make(self, spec):
        blk = Block(spec, rng(5)).eval()
        x = T.randn((1, spec.in_channels, 8, 8), 2)
        return blk, x

    def test_zero_projection_leaves_conv_path(self):
        blk, x = self.make(BlockSpec(8, (4, 4, 16), 2))
        blk.proj.conv.weight.data[...] = 0
        with T.no_grad():
            np.testing.assert_allclose(blk(x).data, blk.residual(x).data, rtol=1e-6, atol=1e-7)

    def test_zero_conv_path_leaves_shortcut(self):
        blk, x = self.make(BlockSpec(8, (4, 4, 16), 2))
        # zero BN scale and shift of the last separable stage: the path outputs 0
        blk.sep3.pw.bn.weight.data[...] = 0
        blk.sep3.pw.bn.bias.data[...] = 0
        with T.no_grad():
            np.testing.assert_array_equal(blk(x).data, blk.shortcut(x).data)

    def test_identity_shortcut(self):
        blk, x = self.make(BlockSpec(16, (4, 4, 16), 1))
        assert not hasattr(blk, "proj")
        blk.sep3.pw.bn.weight.data[...] = 0
        blk.sep3.pw.bn.bias.data[...] = 0
        with T.no_grad():
            np.testing.assert_array_equal(blk(x).data, x.data)


class TestAttention:
    def head(self, c=6):
        return FCAttention(c, 10, rng(1))

    def test_param_count_c192(self):
        h = FCAttention(192, 1000, rng())
        assert h.num_parameters() == 192 * 1000 + 1000 + 1000 * 192 == 385000

    def test_ones_vector_is_identity(self):
        h = self.head()
        h.fc.weight.data[...] = 0
        h.fc.bias.data[...] = 1
        h.conv.weight.data[...] = 0.1  # 10 hidden units of value 1 -> 1.0
        x = T.randn((2, 6, 4, 4), 0)
        with T.no_grad():
            fca, v = h(x)
        np.testing.assert_allclose(v.data, 1.0, rtol=1e-6)
        np.testing.assert_allclose(fca.data, x.data, rtol=1e-6)

    def test_zero_vector_kills_features(self):
        h = self.head()
        h.conv.weight.data[...] = 0
        with T.no_grad():
            fca, _ = h(T.randn((2, 6, 4, 4), 0))
        assert not fca.data.any()

    def test_grad(self):
        h = self.head(3).astype(np.float64)
        w = T.randn((1, 3, 4, 4), 9, dtype=np.float64)
        err = grad_check(lambda x: T.sum_all(T.mul(h(x)[0], w)),
                         T.randn((1, 3, 4, 4), 8, dtype=np.float64),
                         wrt=list(h.parameters()))
        assert err < 1e-4

    def test_sigmoid_bounds_and_grad(self):
        x = T.tensor([-1000.0, -1.0, 0.0, 1.0, 1000.0], (1, 5, 1, 1), dtype=np.float64)
        y = sigmoid(x).tolist()
        assert y[0] == 0.0 and y[2] == 0.5 and y[4] == 1.0
        assert y[1] == pytest.approx(1 - y[3])
        err = grad_check(lambda t: T.sum_all(T.mul(sigmoid(t), t)),
                         T.randn((1, 2, 3, 3), 4, dtype=np.float64))
        assert err < 1e-6


def test_backbone_gradient_reaches_stages():
    model = Backbone(build_backbone("B"), rng(2))
    out = model(T.randn((2, 3, 32, 32), 0))
    backward(T.sum_all(T.mul(out.fca, T.randn(out.fca.shape, 1))))
    for name, p in model.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name
