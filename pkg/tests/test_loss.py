import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuseg.errors import ConfigError, DegenerateAnnotationError, DimensionError, DomainError
from nuseg.loss import (
    LossConfig,
    default_wcel_weight,
    dice_loss,
    finite_diff_gradient,
    gradcheck,
    random_instance,
    relative_error,
    rpdl,
    wcel,
)
from nuseg.rpmap import RewardPenaltyMap

EPS = LossConfig().epsilon


def _v(values):
    a = np.asarray(values, dtype=np.float64)
    return a.reshape(1, 1, a.size)


class TestLossConfig:
    @pytest.mark.parametrize("eps", [0.0, -1e-7, 0.01, 0.5])
    def test_epsilon_range(self, eps):
        with pytest.raises(ConfigError):
            LossConfig(epsilon=eps)

    def test_weight_positive(self):
        with pytest.raises(ConfigError):
            LossConfig(wcel_weight=0.0)

    def test_clip_bounds_symmetric(self):
        c = LossConfig(epsilon=1e-4)
        assert c.clip_lo + c.clip_hi == pytest.approx(1.0, abs=1e-15)


class TestWCEL:
    def test_single_voxel_values(self):
        assert wcel(_v([1]), _v([0.5]), LossConfig(wcel_weight=1.0)).value == pytest.approx(math.log(2), rel=1e-12)
        assert wcel(_v([1]), _v([0.5]), LossConfig(wcel_weight=3.0)).value == pytest.approx(3 * math.log(2), rel=1e-12)

    def test_perfect_prediction_near_zero(self):
        y = _v([1, 0, 1, 0])
        cfg = LossConfig(wcel_weight=5.0)
        assert 0.0 <= wcel(y, y.astype(float), cfg).value <= 10 * EPS * cfg.wcel_weight

    def test_gradient_formula(self):
        y, p = _v([1, 0]), _v([0.25, 0.4])
        g = wcel(y, p, LossConfig(wcel_weight=2.0)).gradient
        np.testing.assert_allclose(g.ravel(), [-2.0 / 0.25 / 2, 1.0 / 0.6 / 2], rtol=1e-14)

    def test_zero_gradient_where_clipped(self):
        g = wcel(_v([1, 0]), _v([0.0, 1.0])).gradient
        np.testing.assert_array_equal(g, 0.0)

    def test_rejects_bad_inputs(self):
        with pytest.raises(DomainError):
            wcel(_v([1]), _v([1.2]))
        with pytest.raises(DimensionError):
            wcel(_v([1, 0]), _v([0.5]))


class TestDefaultWeight:
    def test_ratios(self):
        m = np.zeros((1, 1, 50), np.uint8)
        m[0, 0, 0] = 1
        assert default_wcel_weight([m]) == 49.0
        m = np.zeros((1, 1, 100), np.uint8)
        m[0, 0, :4] = 1
        assert default_wcel_weight([m]) == 24.0
        assert default_wcel_weight([_v([1, 0]).astype(np.uint8)]) == 1.0

    def test_pools_masks(self):
        a = _v([1, 0, 0, 0]).astype(np.uint8)
        b = _v([1, 1, 0, 0]).astype(np.uint8)
        assert default_wcel_weight([a, b]) == 5 / 3

    def test_no_foreground(self):
        with pytest.raises(DegenerateAnnotationError):
            default_wcel_weight([np.zeros((2, 2, 2))])
        with pytest.raises(DegenerateAnnotationError):
            default_wcel_weight([np.ones((2, 2, 2))])


class TestDiceLoss:
    def test_identical_binary(self):
        y = _v([1, 0, 1, 1])
        assert 0.0 <= dice_loss(y, y.astype(float)).value <= EPS

    def test_both_empty(self):
        assert dice_loss(_v([0, 0]), _v([0.0, 0.0])).value == 0.0

    def test_half_prediction(self):
        assert dice_loss(_v([1, 0]), _v([0.5, 0.5])).value == pytest.approx(1 - (1 + EPS) / (2 + EPS), abs=1e-15)
        assert dice_loss(_v([1, 0]), _v([0.5, 0.5])).value == pytest.approx(0.5, abs=1e-7)

    def test_gradient_formula(self):
        # A = 0.5, S = 2: dL/dp = 2(A - y S)/S^2
        g = dice_loss(_v([1, 0]), _v([0.5, 0.5])).gradient.ravel()
        np.testing.assert_allclose(g, [2 * (0.5 - 2) / 4, 2 * 0.5 / 4], rtol=1e-14)


class TestRPDL:
    Y = _v([1, 1, 0, 0])
    M = _v([1, 0.5, -1, -1])

    def test_worked_values(self):
        # weighted overlap 1, denominators 3.5 and 2.5
        assert rpdl(self.Y, _v([1, 0, 0, 1]), self.M).value == pytest.approx(1 - (2 + EPS) / (3.5 + EPS), abs=1e-12)
        assert rpdl(self.Y, _v([1, 0, 0, 0]), self.M).value == pytest.approx(1 - (2 + EPS) / (2.5 + EPS), abs=1e-12)
        tiny = LossConfig(epsilon=1e-12)
        assert rpdl(self.Y, _v([1, 0, 0, 1]), self.M, tiny).value == pytest.approx(1 - 2 / 3.5, abs=1e-9)
        assert rpdl(self.Y, _v([1, 0, 0, 0]), self.M, tiny).value == pytest.approx(0.2, abs=1e-9)

    def test_penalty_voxel_gradient_positive(self):
        g = rpdl(self.Y, _v([1, 0, 0, 1]), self.M).gradient.ravel()
        assert g[2] > 0 and g[3] > 0
        # the rewarded voxels pull the other way
        assert g[0] < 0 and g[1] < 0

    def test_accepts_map_object(self):
        a = rpdl(self.Y, _v([0.3, 0.2, 0.1, 0.4]), RewardPenaltyMap(self.M))
        b = rpdl(self.Y, _v([0.3, 0.2, 0.1, 0.4]), self.M)
        assert a.value == b.value

    def test_unit_map_matches_dice(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            shape = tuple(rng.integers(1, 6, 3))
            y = (rng.random(shape) > 0.5).astype(np.uint8)
            p = rng.random(shape)
            d, r = dice_loss(y, p), rpdl(y, p, RewardPenaltyMap.unit(shape))
            assert r.value == d.value
            np.testing.assert_array_equal(r.gradient, d.gradient)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rpdl(self.Y, _v([0.5] * 4), np.ones((1, 1, 3)))


class TestFiniteDifference:
    def test_quadratic(self):
        p = np.random.default_rng(1).uniform(0.1, 0.9, (2, 3, 2))
        g = finite_diff_gradient(lambda y, q, c: float(np.sum(q**2)), None, p)
        np.testing.assert_allclose(g, 2 * p, atol=1e-9)

    def test_rejects_bad_step(self):
        with pytest.raises(ConfigError):
            finite_diff_gradient(dice_loss, _v([1]), _v([0.5]), h=1e-2)

    def test_rejects_p_near_bounds(self):
        with pytest.raises(DomainError):
            finite_diff_gradient(dice_loss, _v([1, 0]), _v([0.5, 1.0]))

    def test_rpdl_and_dice_on_4cube(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.1, 0.9, (4, 4, 4))
        y = (rng.random((4, 4, 4)) > 0.5).astype(np.uint8)
        m = RewardPenaltyMap(np.where(rng.random((4, 4, 4)) > 0.3, rng.random((4, 4, 4)), -1.0))
        assert relative_error(rpdl(y, p, m).gradient, finite_diff_gradient(rpdl, y, p, m)) < 1e-4
        assert relative_error(dice_loss(y, p).gradient, finite_diff_gradient(dice_loss, y, p)) < 1e-4

    def test_random_instance_is_valid(self):
        y, p, m = random_instance(np.random.default_rng(4), 5)
        assert y.shape == p.shape == m.values.shape
        assert 0.1 <= p.min() and p.max() <= 0.9
        assert np.all(m.values[y == 1] > 0)

    @pytest.mark.parametrize("kind", ["wcel", "dl", "rpdl"])
    def test_gradcheck_routine(self, kind):
        assert max(gradcheck(kind, trials=10, seed=3)) < 1e-4

    def test_relative_error_floor(self):
        assert relative_error([0.0], [1e-12]) == pytest.approx(1e-4)
        assert relative_error([2.0], [1.0]) == 0.5


@st.composite
def instances(draw):
    n = draw(st.integers(1, 12))
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    y = (rng.random((1, 1, n)) > 0.5).astype(np.uint8)
    p = rng.random((1, 1, n))
    m = np.where(rng.random((1, 1, n)) > 0.3, rng.uniform(0.1, 1.0, (1, 1, n)), -1.0)
    # as for any map built from a set that contains y: rewarded wherever y is set
    m[y == 1] = np.abs(m[y == 1])
    return y, p, m


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(instances())
    def test_ranges(self, inst):
        y, p, m = inst
        assert 0.0 <= dice_loss(y, p).value <= 1.0
        assert rpdl(y, p, m).value <= 1.0
        assert rpdl(y, p, np.abs(m)).value >= 0.0

    @settings(max_examples=100, deadline=None)
    @given(instances(), st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, inst, rnd):
        y, p, m = inst
        perm = list(range(y.size))
        rnd.shuffle(perm)

        def sh(a):
            return a.ravel()[perm].reshape(a.shape)

        for fn, args, pargs in [
            (dice_loss, (y, p), (sh(y), sh(p))),
            (rpdl, (y, p, m), (sh(y), sh(p), sh(m))),
            (wcel, (y, p), (sh(y), sh(p))),
        ]:
            a, b = fn(*args), fn(*pargs)
            assert b.value == pytest.approx(a.value, rel=1e-12, abs=1e-15)
            np.testing.assert_allclose(b.gradient, sh(a.gradient), rtol=1e-12, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(instances())
    def test_penalty_sign(self, inst):
        y, p, m = inst
        g = rpdl(y, p, m).gradient
        if np.sum(y * p * m) > 0:
            sel = (y == 0) & (m < 0)
            assert np.all(g[sel] > 0)

    @settings(max_examples=100, deadline=None)
    @given(instances())
    def test_reward_ordering(self, inst):
        # empirical: for y=1 voxels with equal p, larger M means a larger pull
        y, p, m = inst
        p = np.full_like(p, 0.5)
        g = rpdl(y, p, m).gradient
        if np.sum(y * p * m) < 0:
            return
        sel = (y == 1) & (m > 0)
        mags, ms = np.abs(g[sel]), m[sel]
        order = np.argsort(ms)
        assert np.all(np.diff(mags[order]) >= -1e-15)
