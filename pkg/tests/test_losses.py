import math

import numpy as np
import pytest
import torch

from m2cd.errors import ConfigurationError, DataError, ShapeError, TrainingInstabilityError
from m2cd.losses import LossConfig, ce_loss, sd_loss, total_loss


def loop_sd_oracle(op, sp, o2sp, reduction):
    """Pure-Python elementwise re-implementation of the distillation loss."""
    total = 0.0
    per_level = []
    for a, b, t in zip(op, sp, o2sp):
        a, b, t = (x.detach().numpy().ravel() for x in (a, b, t))
        s1 = sum(abs(float(t[i]) - float(a[i])) for i in range(len(a)))
        s2 = sum(abs(float(t[i]) - float(b[i])) for i in range(len(b)))
        lvl = (s1 + s2) / len(a) if reduction == "mean" else s1 + s2
        per_level.append(lvl)
        total += lvl
    return total, per_level


def random_pyramid(rng, shapes, dtype=torch.float64):
    return [torch.tensor(rng.standard_normal(s), dtype=dtype) for s in shapes]


SHAPES = [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2)]


class TestSdLoss:
    def test_identical_pyramids_zero(self):
        rng = np.random.default_rng(0)
        pyr = random_pyramid(rng, SHAPES)
        total, per_level = sd_loss(pyr, [t.clone() for t in pyr], [t.clone() for t in pyr], LossConfig())
        assert float(total) == 0.0
        assert all(float(v) == 0.0 for v in per_level)

    def test_single_element_hand_case(self):
        cfg = LossConfig()
        op = [torch.tensor([[[[2.0]]]])]
        sp = [torch.tensor([[[[4.0]]]])]
        o2sp = [torch.tensor([[[[3.0]]]])]
        total, _ = sd_loss(op, sp, o2sp, cfg)
        assert float(total) == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_matches_loop_oracle(self, reduction):
        rng = np.random.default_rng(3)
        cfg = LossConfig(sd_reduction=reduction)
        for _ in range(10):
            op = random_pyramid(rng, SHAPES)
            sp = random_pyramid(rng, SHAPES)
            o2sp = random_pyramid(rng, SHAPES)
            total, per_level = sd_loss(op, sp, o2sp, cfg)
            ref_total, ref_levels = loop_sd_oracle(op, sp, o2sp, reduction)
            assert float(total) == pytest.approx(ref_total, rel=1e-6)
            for got, ref in zip(per_level, ref_levels):
                assert float(got) == pytest.approx(ref, rel=1e-6)

    def test_symmetric_in_op_sp(self):
        rng = np.random.default_rng(5)
        op = random_pyramid(rng, SHAPES)
        sp = random_pyramid(rng, SHAPES)
        o2sp = random_pyramid(rng, SHAPES)
        cfg = LossConfig()
        a, _ = sd_loss(op, sp, o2sp, cfg)
        b, _ = sd_loss(sp, op, o2sp, cfg)
        assert float(a) == float(b)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(6)
        op = random_pyramid(rng, SHAPES)
        sp = random_pyramid(rng, SHAPES)
        o2sp = random_pyramid(rng, SHAPES)
        total, _ = sd_loss(op, sp, o2sp, LossConfig())
        assert float(total) > 0.0

    def test_shape_mismatch_names_level(self):
        op = [torch.zeros(1, 2, 4, 4), torch.zeros(1, 4, 2, 2)]
        sp = [torch.zeros(1, 2, 4, 4), torch.zeros(1, 4, 2, 2)]
        o2sp = [torch.zeros(1, 2, 4, 4), torch.zeros(1, 4, 3, 3)]
        with pytest.raises(ShapeError, match="level 1"):
            sd_loss(op, sp, o2sp, LossConfig())

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        cfg = LossConfig()
        shape = (1, 2, 3, 3)
        args = [torch.tensor(rng.standard_normal(shape), requires_grad=True) for _ in range(3)]
        total, _ = sd_loss([args[0]], [args[1]], [args[2]], cfg)
        total.backward()

        def value(tensors):
            val, _ = sd_loss([tensors[0]], [tensors[1]], [tensors[2]], cfg)
            return float(val)

        eps = 1e-6
        for which, tensor in enumerate(args):
            base = [t.detach().clone() for t in args]
            for j in range(tensor.numel()):
                plus = [t.clone() for t in base]
                minus = [t.clone() for t in base]
                plus[which].view(-1)[j] += eps
                minus[which].view(-1)[j] -= eps
                fd = (value(plus) - value(minus)) / (2 * eps)
                got = float(tensor.grad.view(-1)[j])
                assert got == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_stop_gradient_detach_o2sp(self):
        rng = np.random.default_rng(9)
        op = random_pyramid(rng, [(1, 2, 2, 2)])
        sp = random_pyramid(rng, [(1, 2, 2, 2)])
        o2sp = random_pyramid(rng, [(1, 2, 2, 2)])
        for t in op + sp + o2sp:
            t.requires_grad_(True)
        total, _ = sd_loss(op, sp, o2sp, LossConfig(stop_gradient_mode="detach_o2sp"))
        total.backward()
        assert o2sp[0].grad is None or torch.all(o2sp[0].grad == 0)
        assert op[0].grad is not None and torch.any(op[0].grad != 0)
        assert sp[0].grad is not None and torch.any(sp[0].grad != 0)

    def test_stop_gradient_detach_op_sp(self):
        rng = np.random.default_rng(10)
        op = random_pyramid(rng, [(1, 2, 2, 2)])
        sp = random_pyramid(rng, [(1, 2, 2, 2)])
        o2sp = random_pyramid(rng, [(1, 2, 2, 2)])
        for t in op + sp + o2sp:
            t.requires_grad_(True)
        total, _ = sd_loss(op, sp, o2sp, LossConfig(stop_gradient_mode="detach_op_sp"))
        total.backward()
        assert o2sp[0].grad is not None and torch.any(o2sp[0].grad != 0)
        assert op[0].grad is None or torch.all(op[0].grad == 0)
        assert sp[0].grad is None or torch.all(sp[0].grad == 0)


class TestCeLoss:
    def test_half_probability_gives_ln2(self):
        pred = torch.full((8, 8), 0.5, dtype=torch.float64)
        target = torch.bernoulli(torch.full((8, 8), 0.3, dtype=torch.float64))
        loss = ce_loss(pred, target, LossConfig())
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_perfect_prediction_at_clamp_floor(self):
        cfg = LossConfig()
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = ce_loss(target.clone(), target, cfg)
        assert 0.0 <= float(loss) <= 2 * cfg.epsilon

    def test_hand_worked_two_by_two(self):
        pred = torch.tensor([[0.9, 0.1], [0.8, 0.2]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        loss = ce_loss(pred, target, LossConfig())
        expected = (-math.log(0.9) - math.log(0.9) - math.log(0.8) - math.log(0.8)) / 4
        assert float(loss) == pytest.approx(expected, abs=1e-12)
        assert float(loss) == pytest.approx(0.164252033486018, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
        target = torch.tensor(
            rng.integers(0, 2, (8, 8)).astype(np.float64), dtype=torch.float64
        )
        cfg = LossConfig()
        loss = ce_loss(pred, target, cfg)
        loss.backward()
        eps = 1e-7
        flat = pred.detach().view(-1)
        for j in range(0, flat.numel(), 7):
            plus = flat.clone()
            plus[j] += eps
            minus = flat.clone()
            minus[j] -= eps
            fd = (
                float(ce_loss(plus.view(8, 8), target, cfg))
                - float(ce_loss(minus.view(8, 8), target, cfg))
            ) / (2 * eps)
            assert float(pred.grad.view(-1)[j]) == pytest.approx(fd, rel=1e-5)

    def test_non_binary_target_rejected(self):
        pred = torch.full((2, 2), 0.5)
        with pytest.raises(DataError):
            ce_loss(pred, torch.full((2, 2), 0.4), LossConfig())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ce_loss(torch.zeros(2, 2), torch.zeros(3, 3), LossConfig())


class TestTotalLoss:
    def test_paper_default_lambda_arithmetic(self):
        cfg = LossConfig(lambda_sd=1e-4)
        rep = total_loss(
            torch.tensor(0.7, dtype=torch.float64), torch.tensor(100.0, dtype=torch.float64), cfg
        )
        assert rep.total == pytest.approx(0.71, abs=1e-9)

    def test_zero_lambda(self):
        rep = total_loss(torch.tensor(0.5), torch.tensor(3.0), LossConfig(lambda_sd=0.0))
        assert rep.total == rep.ce

    def test_exact_identity(self):
        rng = np.random.default_rng(12)
        cfg = LossConfig(lambda_sd=1e-4)
        for _ in range(100):
            ce = torch.tensor(float(rng.uniform(0, 2)))
            sd = torch.tensor(float(rng.uniform(0, 500)))
            rep = total_loss(ce, sd, cfg)
            assert rep.total == rep.ce + cfg.lambda_sd * rep.sd

    def test_sd_disabled_forces_zero(self):
        cfg = LossConfig(sd_enabled=False)
        ce = torch.tensor(0.4, requires_grad=True)
        sd = torch.tensor(5.0, requires_grad=True)
        rep = total_loss(ce, sd, cfg, per_level_sd=[torch.tensor(5.0)])
        assert rep.sd == 0.0
        assert rep.total == rep.ce
        assert rep.per_level_sd == [0.0]
        rep.total_tensor.backward()
        assert sd.grad is None or torch.all(sd.grad == 0)

    def test_nan_component_raises(self):
        with pytest.raises(TrainingInstabilityError):
            total_loss(torch.tensor(float("nan")), torch.tensor(0.0), LossConfig())
        with pytest.raises(TrainingInstabilityError):
            total_loss(torch.tensor(1.0), torch.tensor(float("inf")), LossConfig())

    def test_total_tensor_backward_flows(self):
        ce = torch.tensor(0.4, requires_grad=True)
        sd = torch.tensor(5.0, requires_grad=True)
        rep = total_loss(ce, sd, LossConfig(lambda_sd=0.1))
        rep.total_tensor.backward()
        assert float(ce.grad) == 1.0
        assert float(sd.grad) == pytest.approx(0.1)


class TestLossConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            LossConfig(lambda_sd=-1.0)
        with pytest.raises(ConfigurationError):
            LossConfig(epsilon=0.0)
        with pytest.raises(ConfigurationError):
            LossConfig(epsilon=0.1)
        with pytest.raises(ConfigurationError):
            LossConfig(stop_gradient_mode="teacher")
        with pytest.raises(ConfigurationError):
            LossConfig(sd_reduction="max")
