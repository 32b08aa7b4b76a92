import itertools

import numpy as np
import pytest

from dfanet import tensor as T
from dfanet.dataio import generate_toy_dataset
from dfanet.model import DFANet, build_dfanet
from dfanet.ops import LabelError, softmax_cross_entropy
from dfanet.tensor import ContractError, Tensor, backward
from dfanet.training import (
    LogEntry,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    batch_order,
    log_csv,
    make_batch,
    mean_iou,
    no_decay_names,
    poly_lr,
    sgd_step,
    train_loop,
)


def param(value, grad):
    p = T.tensor([value], (1, 1, 1, 1), dtype=np.float64)
    p.grad = np.full((1, 1, 1, 1), grad, np.float64)
    return p


class TestPoly:
    def test_values(self):
        assert poly_lr(0, 0.2, 100) == 0.2
        assert poly_lr(100, 0.2, 100) == 0.0
        assert poly_lr(50, 0.2, 100) == pytest.approx(0.2 * 0.5 ** 0.9, rel=1e-12)
        assert poly_lr(50, 0.2, 100) == pytest.approx(0.10718, abs=5e-6)

    def test_strictly_decreasing(self):
        vals = [poly_lr(i, 0.2, 50) for i in range(51)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            poly_lr(101, 0.2, 100)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.momentum, cfg.weight_decay, cfg.base_lr, cfg.power) == (
            48, 0.9, 1e-5, 0.2, 0.9)


class TestSgd:
    def test_plain_step(self):
        p = param(1.0, 0.5)
        sgd_step([("w", p)], OptimizerState(), 0.1, 0.0, 0.0)
        assert p.item() == pytest.approx(0.95)

    def test_weight_decay_only(self):
        p = param(1.0, 0.0)
        sgd_step([("w", p)], OptimizerState(), 0.1, 0.0, 1e-5)
        assert p.item() == pytest.approx(0.999999, abs=1e-15)

    def test_momentum_recurrence(self):
        p = param(0.0, 1.0)
        st = OptimizerState()
        for _ in range(2):
            sgd_step([("w", p)], st, 1.0, 0.9, 0.0)
        assert p.item() == pytest.approx(-2.9)
        assert st.step == 2 and st.velocity["w"].shape == p.shape

    def test_zero_lr_is_noop(self):
        p = param(3.0, 7.0)
        sgd_step([("w", p)], OptimizerState(), 0.0, 0.9, 1e-5)
        assert p.item() == 3.0

    def test_exempt_from_decay(self):
        p = param(1.0, 0.0)
        sgd_step([("bn.weight", p)], OptimizerState(), 0.1, 0.0, 0.5, exempt={"bn.weight"})
        assert p.item() == 1.0

    def test_shape_mismatch(self):
        p = param(1.0, 0.0)
        p.grad = np.zeros((1, 1, 1, 2))
        with pytest.raises(ContractError):
            sgd_step([("w", p)], OptimizerState(), 0.1, 0.9, 0.0)

    def test_bn_names_exempt(self):
        names = no_decay_names(DFANet(build_dfanet("B", 1, 3)))
        assert "backbone0.conv1.bn.weight" in names and "decoder.hl.bn.bias" in names
        assert not any(n.endswith("conv.weight") for n in names)


class TestMiou:
    def test_perfect(self):
        gt = np.array([0, 1, 2, 2])
        assert mean_iou(gt, gt, 3)[1] == 1.0

    def test_hand_example(self):
        gt = np.array([0, 0, 1, 1])
        ious, m = mean_iou(np.zeros(4, int), gt, 2)
        assert ious == [0.5, 0.0] and m == 0.25

    def test_all_ignored(self):
        ious, m = mean_iou(np.zeros(4, int), np.full(4, 255), 2)
        assert m is None and ious == [None, None]

    def test_absent_class_excluded(self):
        ious, m = mean_iou(np.array([0, 1]), np.array([0, 1]), 3)
        assert ious[2] is None and m == 1.0

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            mean_iou(np.array([0]), np.array([5]), 3)

    def test_permutation_equivariance(self):
        r = np.random.default_rng(0)
        gt, pred = r.integers(0, 4, 200), r.integers(0, 4, 200)
        ious, m = mean_iou(pred, gt, 4)
        for perm in itertools.islice(itertools.permutations(range(4)), 6):
            perm = np.array(perm)
            pious, pm = mean_iou(perm[pred], perm[gt], 4)
            assert pm == pytest.approx(m)
            for c in range(4):
                assert pious[perm[c]] == pytest.approx(ious[c])


class TestLoop:
    def data(self):
        return generate_toy_dataset(0, 8, 32, 3)

    def cfg(self, **kw):
        base = dict(batch_size=2, base_lr=0.01, max_iter=3, crop=(32, 32), seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_iterations(self):
        m = DFANet(build_dfanet("B", 1, 3), seed=0)
        before = [p.data.copy() for p in m.parameters()]
        _, log = train_loop(m, self.data(), self.cfg(max_iter=0))
        assert log == []
        assert all((a == p.data).all() for a, p in zip(before, m.parameters()))

    def test_bitwise_reproducible(self):
        logs, states = [], []
        for _ in range(2):
            m = DFANet(build_dfanet("B", 2, 3), seed=1)
            _, log = train_loop(m, self.data(), self.cfg())
            logs.append(log_csv(log))
            states.append(b"".join(p.data.tobytes() for p in m.parameters()))
        assert logs[0] == logs[1] and states[0] == states[1]

    def test_eval_cadence(self):
        m = DFANet(build_dfanet("B", 1, 3), seed=0)
        _, log = train_loop(m, self.data(), self.cfg(max_iter=3, eval_every=2))
        assert [e.miou is not None for e in log] == [False, True, True]
        assert log_csv(log).splitlines()[0] == "iter,lr,loss,miou"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_iteration(self):
        m = DFANet(build_dfanet("B", 1, 3), seed=0)
        with pytest.raises(TrainingDiverged) as info:
            train_loop(m, self.data(), self.cfg(base_lr=1e30, max_iter=5))
        assert info.value.iteration >= 0 and info.value.op

    @pytest.mark.parametrize("seed", range(3))
    def test_small_lr_reduces_fixed_batch_loss(self, seed):
        m = DFANet(build_dfanet("B", 1, 3), seed=seed)
        img, lab = make_batch(self.data(), self.cfg(seed=seed), 0)
        params = list(m.named_parameters())
        st = OptimizerState()
        losses = []
        for _ in range(10):
            loss = softmax_cross_entropy(m(Tensor(img)), lab)
            m.zero_grad()
            backward(loss)
            sgd_step(params, st, 1e-3, 0.9, 1e-5)
            losses.append(loss.item())
        assert losses[-1] < losses[0]

    def test_batch_order_covers_epoch(self):
        idx = np.concatenate([batch_order(3, 10, 5, i) for i in range(2)])
        assert sorted(idx.tolist()) == list(range(10))

    def test_log_entry_csv(self):
        assert LogEntry(3, 0.5, 1.25).csv() == "3,0.5,1.25"
        assert LogEntry(3, 0.5, 1.25, 0.75).csv() == "3,0.5,1.25,0.75"
