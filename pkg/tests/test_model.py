import numpy as np
import pytest

from dfanet import layers
from dfanet import tensor as T
from dfanet.backbone import ConfigError
from dfanet.cost import analyze, infer_shapes
from dfanet.model import DFANet, build_dfanet, check_closure, with_backbones
from dfanet.ops import softmax_cross_entropy
from dfanet.tensor import ContractError, ShapeError, Tensor, backward


def record_shapes(model, x):
    """Execute ``model`` and collect every module's output shape by path."""
    names = {id(m): n for n, m in model.named_modules()}
    seen = {}
    orig = layers.Module.__call__

    def call(self, *a, **k):
        out = orig(self, *a, **k)
        if isinstance(out, Tensor) and id(self) in names:
            seen[names[id(self)]] = out.shape
        return out

    layers.Module.__call__ = call
    try:
        with T.no_grad():
            logits = model(x)
    finally:
        layers.Module.__call__ = orig
    return seen, logits


class TestBuild:
    def test_concat_widths_a(self):
        spec = build_dfanet("A", 3, 19)
        for bb in spec.backbones[1:]:
            assert not bb.include_conv1
            assert bb.stage_in_channels() == {"enc2": 240, "enc3": 144, "enc4": 288}
        assert spec.backbones[0].stage_in_channels() == {"enc2": 8, "enc3": 48, "enc4": 96}

    def test_concat_widths_b(self):
        spec = build_dfanet("B", 2, 4)
        assert spec.backbones[1].stage_in_channels() == {"enc2": 160, "enc3": 96, "enc4": 192}

    @pytest.mark.parametrize("kw", [dict(num_backbones=0), dict(num_backbones=5),
                                    dict(num_classes=1), dict(variant="Z")])
    def test_config_errors(self, kw):
        with pytest.raises(ConfigError):
            build_dfanet(**{"variant": "A", "num_backbones": 2, "num_classes": 4, **kw})

    def test_closure_detects_bad_wiring(self):
        import dataclasses
        spec = build_dfanet("A", 2, 4)
        bad = dataclasses.replace(spec, backbones=(spec.backbones[0], spec.backbones[0]))
        with pytest.raises(ConfigError):
            check_closure(bad)


class TestShapes:
    def test_logits_shape_b3(self):
        model = DFANet(build_dfanet("B", 3, 5), seed=0).eval()
        with T.no_grad():
            y = model(T.randn((1, 3, 64, 128), 0))
        assert y.shape == (1, 5, 64, 128)

    def test_cascade_scales(self):
        model = DFANet(build_dfanet("A", 3, 4), seed=0).eval()
        with T.no_grad():
            trace = model.encode(T.randn((1, 3, 64, 64), 0))
        for n, out in enumerate(trace.outputs, start=1):
            assert out.enc2.shape[2] == 64 // 2 ** (n + 1)
            assert out.fca.shape[2] == 64 // 2 ** (n + 3)

    def test_analytic_shapes_match_execution(self):
        spec = build_dfanet("A", 3, 19)
        model = DFANet(spec, seed=0).eval()
        seen, logits = record_shapes(model, T.randn((1, 3, 64, 64), 0))
        shapes = infer_shapes(spec, (64, 64))
        common = set(seen) & set(shapes)
        assert len(common) > 300
        for name in common:
            assert shapes[name] == seen[name], name
        assert shapes["decoder.output_upsample"] == logits.shape

    def test_divisibility(self):
        model = DFANet(build_dfanet("B", 2, 3))
        with pytest.raises(ShapeError, match="32"):
            model(T.randn((1, 3, 48, 48), 0))
        with pytest.raises(ShapeError):
            model(T.randn((1, 4, 32, 32), 0))

    def test_decoder_rejects_foreign_trace(self):
        m2 = DFANet(build_dfanet("B", 2, 3)).eval()
        m1 = DFANet(build_dfanet("B", 1, 3)).eval()
        with T.no_grad():
            trace = m1.encode(T.randn((1, 3, 32, 32), 0))
            with pytest.raises(ContractError):
                m2.decoder(trace)


class TestBehaviour:
    def test_eval_is_deterministic(self):
        model = DFANet(build_dfanet("B", 2, 3), seed=1).eval()
        x = T.randn((1, 3, 32, 32), 0)
        with T.no_grad():
            a, b = model(x), model(x)
        assert a.data.tobytes() == b.data.tobytes()
        assert set(np.unique(a.data.argmax(1))) <= set(range(3))

    def test_n1_encoder_is_plain_backbone(self):
        model = DFANet(build_dfanet("B", 1, 3), seed=0).eval()
        x = T.randn((1, 3, 32, 32), 0)
        with T.no_grad():
            tr = model.encode(x)
            direct = model.backbone0(x)
        assert tr[0].fca.data.tobytes() == direct.fca.data.tobytes()

    def test_prefix_stability(self):
        x = T.randn((1, 3, 64, 64), 0)
        full = DFANet(build_dfanet("B", 3, 3), seed=4).eval()
        short = DFANet(with_backbones(full.spec, 2), seed=4).eval()
        with T.no_grad():
            a, b = full.encode(x), short.encode(x)
        for oa, ob in zip(a.outputs, b.outputs):
            for s in ("enc2", "enc3", "enc4", "fca"):
                assert oa[s].data.tobytes() == ob[s].data.tobytes()

    def test_zero_high_level_path_cuts_fca_gradient(self):
        model = DFANet(build_dfanet("B", 1, 3), seed=0)
        model.decoder.hl.conv.weight.data[...] = 0
        model.decoder.hl.bn.weight.data[...] = 0
        model.decoder.hl.bn.bias.data[...] = 0
        loss = T.sum_all(model(T.randn((2, 3, 32, 32), 0)))
        backward(loss)
        # attention only feeds the high-level path in a single-backbone model
        for _, p in model.backbone0.attention.named_parameters():
            assert not p.grad.any()
        assert model.decoder.ll0.conv.weight.grad.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_reaches_every_parameter(self, seed):
        model = DFANet(build_dfanet("B", 2, 3), seed=seed)
        x = T.randn((2, 3, 32, 32), seed)
        labels = np.random.default_rng(seed).integers(0, 3, (2, 32, 32))
        backward(softmax_cross_entropy(model(x), labels))
        dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.any()]
        assert dead == []

    def test_registry_matches_cost_model(self):
        for v, n in (("A", 3), ("B", 2)):
            spec = build_dfanet(v, n, 19)
            assert DFANet(spec).num_parameters() == analyze(spec, (64, 64)).total_params
