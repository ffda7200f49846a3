import math

import numpy as np
import pytest

from harmonyqat.autodiff import Tensor
from harmonyqat.detector import DetectorNet, FIRST_LAYER, HEAD_OUTPUT_LAYERS
from harmonyqat.harness import RunConfig, apply_bit_policy
from harmonyqat.quantize import (BitPolicy, QuantMode, QuantParams, fake_quantize,
                                 init_step, int_range, lsq_step_gradient,
                                 ste_backward, tqt_pot_step)


def qp(bits, signed=True, mode=QuantMode.FIXED, step=1.0):
    p = QuantParams(bits=bits, signed=signed, mode=mode)
    p.set_step(step)
    return p


class TestRanges:
    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    def test_signed(self, bits):
        assert int_range(bits, True) == (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1)

    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    def test_unsigned(self, bits):
        assert int_range(bits, False) == (0, 2 ** bits - 1)

    def test_b2_signed_values(self):
        p = qp(2, signed=True)
        assert (p.n_min, p.n_max) == (-2, 1)

    def test_too_narrow(self):
        with pytest.raises(ValueError):
            int_range(1, True)


class TestFakeQuantize:
    def test_hand_example_positive(self):
        # v=0.3, s=0.5, 2-bit signed: round(0.6)=1, clip to 1, out 0.5
        out = fake_quantize(Tensor([0.3]), qp(2, step=0.5))
        assert out.values == pytest.approx([0.5])

    def test_hand_example_clipped(self):
        # v=-1.4, s=0.5: round(-2.8)=-3, clip to -2, out -1.0
        out = fake_quantize(Tensor([-1.4]), qp(2, step=0.5))
        assert out.values == pytest.approx([-1.0])

    def test_zero_maps_to_zero(self):
        for bits in (2, 4, 8):
            for s in (0.1, 0.5, 2.0):
                out = fake_quantize(Tensor([0.0]), qp(bits, step=s))
                assert out.values[0] == 0.0

    def test_round_half_to_even(self):
        out = fake_quantize(Tensor([0.5, 1.5, 2.5]), qp(8, step=1.0))
        assert np.array_equal(out.values, [0.0, 2.0, 2.0])

    def test_non_positive_step_rejected(self):
        p = QuantParams(bits=4, signed=True)
        p.param.values = np.asarray(0.0)
        with pytest.raises(ValueError):
            fake_quantize(Tensor([1.0]), p)

    def test_idempotent_and_codomain_10k(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            bits = int(rng.choice([2, 3, 4, 8]))
            signed = bool(rng.integers(2))
            s = float(rng.uniform(0.01, 2.0))
            p = qp(bits, signed=signed, step=s)
            v = Tensor(rng.normal(0, 3, size=100))
            once = fake_quantize(v, p)
            twice = fake_quantize(once, p)
            assert np.array_equal(once.values, twice.values)
            levels = np.rint(once.values / s)
            assert np.array_equal(once.values, s * levels)
            assert levels.min() >= p.n_min and levels.max() <= p.n_max

    def test_monotone_in_v(self):
        p = qp(4, step=0.37)
        v = np.linspace(-5, 5, 1001)
        out = fake_quantize(Tensor(v), p).values
        assert np.all(np.diff(out) >= 0)


class TestSTE:
    def test_in_range_passes(self):
        p = qp(4, step=1.0)
        g = ste_backward(np.array([2.0]), np.array([0.4]), p)
        assert np.array_equal(g, [2.0])

    def test_out_of_range_blocked(self):
        p = qp(4, step=1.0)  # n_max = 7
        g = ste_backward(np.array([2.0]), np.array([100.0]), p)
        assert np.array_equal(g, [0.0])

    def test_all_in_range_identity(self):
        p = qp(8, step=1.0)
        up = np.random.default_rng(0).normal(size=20)
        v = np.random.default_rng(1).uniform(-100, 100, size=20)
        assert np.array_equal(ste_backward(up, v, p), up)

    def test_graph_gradient_matches_ste(self):
        p = qp(2, step=0.5)
        v = Tensor([0.3, -1.4, 100.0], requires_grad=True)
        out = fake_quantize(v, p)
        out.sum().backward()
        # 0.3/0.5 and -1.4/0.5 straddle the range; only 0.3/0.5=0.6 is within [-2,1]
        assert np.array_equal(v.grad, [1.0, 0.0, 0.0])

    def test_ste_surrogate_finite_difference(self):
        # away from half-integer boundaries the de-rounded surrogate
        # s*clip(v/s) has gradient 1 in-range, 0 outside
        p = qp(4, step=0.25)
        rng = np.random.default_rng(5)
        v = rng.uniform(-3, 3, size=50)
        frac = np.abs((v / 0.25) - np.floor(v / 0.25) - 0.5)
        v = np.where(frac < 1e-3, v + 0.01, v)
        vt = Tensor(v, requires_grad=True)
        fake_quantize(vt, p).sum().backward()
        step = 1e-5
        for i in range(len(v)):
            lo, hi = v.copy(), v.copy()
            lo[i] -= step
            hi[i] += step
            sur_hi = 0.25 * np.clip(hi[i] / 0.25, p.n_min, p.n_max)
            sur_lo = 0.25 * np.clip(lo[i] / 0.25, p.n_min, p.n_max)
            num = (sur_hi - sur_lo) / (2 * step)
            assert vt.grad[i] == pytest.approx(num, abs=1e-4)


class TestLSQStepGradient:
    def test_on_level_gives_zero_d(self):
        p = qp(4, mode=QuantMode.LSQ, step=0.5)
        g = lsq_step_gradient(np.array([1.0]), np.array([1.0]), p)  # v/s = 2 exactly
        assert g == pytest.approx(0.0)

    def test_in_range_d(self):
        p = qp(4, mode=QuantMode.LSQ, step=1.0)
        # v/s = 0.6 -> d = round(0.6) - 0.6 = 0.4
        g = lsq_step_gradient(np.array([1.0]), np.array([0.6]), p)
        expected = 0.4 / math.sqrt(1 * p.n_max)
        assert g == pytest.approx(expected)

    def test_above_range_d_is_nmax(self):
        p = qp(4, mode=QuantMode.LSQ, step=1.0)
        g = lsq_step_gradient(np.array([1.0]), np.array([1000.0]), p)
        assert g == pytest.approx(p.n_max / math.sqrt(p.n_max))

    def test_graph_step_gradient_matches_reference(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.LSQ)
        p.set_step(0.3)
        rng = np.random.default_rng(11)
        v = rng.normal(size=64)
        out = fake_quantize(Tensor(v), p)
        out.sum().backward()
        ref = lsq_step_gradient(np.ones_like(v), v, p)
        assert float(p.param.grad) == pytest.approx(ref, rel=1e-12)


class TestTQT:
    def test_rounded_exponent(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.TQT)
        p.param.values = np.asarray(-1.4)
        assert tqt_pot_step(p) == 0.5

    def test_integer_exponent(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.TQT)
        p.param.values = np.asarray(3.0)
        assert tqt_pot_step(p) == 8.0

    def test_half_exponent_rounds_to_even(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.TQT)
        p.param.values = np.asarray(0.5)
        assert tqt_pot_step(p) == 1.0

    def test_step_is_power_of_two_after_updates(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.TQT)
        init_step(np.random.default_rng(0).normal(size=32), p)
        for delta in np.linspace(-0.9, 0.9, 13):
            p.param.values = p.param.values + delta
            s = p.step_value()
            assert s == 2.0 ** round(math.log2(s))

    def test_exponent_receives_gradient(self):
        p = QuantParams(bits=4, signed=True, mode=QuantMode.TQT)
        p.set_step(0.5)
        v = np.random.default_rng(3).normal(size=16)
        fake_quantize(Tensor(v), p).sum().backward()
        assert p.param.grad is not None and float(p.param.grad) != 0.0


class TestInitStep:
    def test_symmetric_pm1(self):
        p = QuantParams(bits=2, signed=True)  # n_max = 1
        s0 = init_step(np.array([1.0, -1.0, 1.0, -1.0]), p)
        assert s0 == pytest.approx(2.0)

    def test_all_zero_fallback(self):
        p = QuantParams(bits=4, signed=True)
        assert init_step(np.zeros(10), p) == 1.0

    def test_constant_formula(self):
        p = QuantParams(bits=4, signed=True)
        c = 0.7
        s0 = init_step(np.full(5, c), p)
        assert s0 == pytest.approx(2 * c / math.sqrt(p.n_max))


class TestBitPolicy:
    def test_interior_vs_pinned_layers(self):
        cfg = RunConfig(bit_width=4)
        net = DetectorNet(rng=np.random.default_rng(0))
        apply_bit_policy(net, cfg.bit_policy())
        for name, w in net.wrapped.items():
            expected = 8 if name == FIRST_LAYER or name in HEAD_OUTPUT_LAYERS else 4
            assert w.weight_qp.bits == expected
            assert w.act_qp.bits == expected
            assert w.weight_qp.signed

    def test_bw8_uniform(self):
        net = DetectorNet(rng=np.random.default_rng(0))
        apply_bit_policy(net, RunConfig(bit_width=8).bit_policy())
        assert all(w.weight_qp.bits == 8 for w in net.wrapped.values())

    def test_bw2_interior(self):
        net = DetectorNet(rng=np.random.default_rng(0))
        apply_bit_policy(net, RunConfig(bit_width=2).bit_policy())
        assert net.wrapped["block1"].weight_qp.bits == 2

    def test_bw32_leaves_network_untouched(self):
        rng = np.random.default_rng(9)
        images = rng.uniform(0, 1, size=(2, 1, 64, 64))
        plain = DetectorNet(rng=np.random.default_rng(0))
        cls_a, off_a = plain.forward(images)
        wrapped = DetectorNet(rng=np.random.default_rng(0))
        apply_bit_policy(wrapped, RunConfig(bit_width=32).bit_policy())
        cls_b, off_b = wrapped.forward(images)
        assert np.array_equal(cls_a.values, cls_b.values)
        assert np.array_equal(off_a.values, off_b.values)

    def test_unknown_override_rejected(self):
        net = DetectorNet(rng=np.random.default_rng(0))
        policy = BitPolicy(global_bits=4, overrides={"nope": 8})
        with pytest.raises(ValueError):
            apply_bit_policy(net, policy)

    def test_activation_signedness(self):
        net = DetectorNet(rng=np.random.default_rng(0))
        apply_bit_policy(net, RunConfig(bit_width=4).bit_policy())
        # image input and post-ReLU features are non-negative
        assert not net.wrapped[FIRST_LAYER].act_qp.signed
        assert not net.wrapped["block1"].act_qp.signed
        assert not net.wrapped["cls_out"].act_qp.signed

    def test_serialization_round_trip(self):
        policy = BitPolicy(global_bits=4, overrides={"stem": 8}, mode=QuantMode.TQT)
        again = BitPolicy.from_dict(policy.to_dict())
        assert again == policy
