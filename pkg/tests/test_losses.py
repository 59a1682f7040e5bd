import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardmine.errors import ConfigError, DomainError
from hardmine.losses import (
    DEFAULT_EPS,
    LossConfig,
    Variant,
    balanced_focal_loss,
    ce_loss,
    focal_loss,
    grad_check_cell,
)

getcontext().prec = 40
LN2 = float(Decimal(2).ln())
# 0.25 * 0.5**1.5 * ln 2, evaluated in 40-digit decimal arithmetic
FOCAL_HALF = float(Decimal("0.25") * Decimal("0.5").sqrt() ** 3 * Decimal(2).ln())

probs = st.floats(min_value=1e-4, max_value=1 - 1e-4)
targets = st.sampled_from([0, 1])
alphas = st.floats(min_value=0.01, max_value=0.99)
gammas = st.floats(min_value=0.0, max_value=5.0)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert 0.0 <= ce_loss(1.0, 1).value <= -math.log(1 - DEFAULT_EPS) + 1e-15

    @pytest.mark.parametrize("t", [0, 1])
    def test_half(self, t):
        assert ce_loss(0.5, t).value == pytest.approx(LN2, abs=1e-15)

    def test_clamped_region_has_zero_derivative(self):
        assert ce_loss(1.0, 1).d_dp == 0.0
        assert ce_loss(0.0, 0).d_dp == 0.0
        assert ce_loss(1.0, 0).d_dp == 0.0
        assert np.isfinite(ce_loss(1.0, 0).value)

    @pytest.mark.parametrize("p", [float("nan"), float("inf"), -0.1, 1.5])
    def test_domain(self, p):
        with pytest.raises(DomainError):
            ce_loss(p, 1)

    def test_bad_target(self):
        with pytest.raises(DomainError):
            ce_loss(0.5, 2)

    def test_vectorised(self):
        p = np.array([[0.2, 0.5], [0.9, 0.1]])
        t = np.array([[1, 0], [1, 0]])
        out = ce_loss(p, t)
        assert out.value.shape == (2, 2)
        assert out.value[0, 0] == pytest.approx(-math.log(0.2))
        assert out.value[1, 1] == pytest.approx(-math.log(0.9))


class TestFocal:
    def test_reference_value(self):
        assert focal_loss(0.5, 1, 0.25, 1.5).value == pytest.approx(FOCAL_HALF, rel=1e-14)
        assert FOCAL_HALF == pytest.approx(0.0612661, abs=5e-8)

    def test_negative_uses_complement_alpha(self):
        assert focal_loss(0.5, 0, 0.25, 1.5).value == pytest.approx(3 * FOCAL_HALF, rel=1e-14)

    def test_perfect_prediction(self):
        assert focal_loss(1.0, 1, 0.25, 1.5).value < 1e-15

    @given(p=probs, t=targets, alpha=alphas)
    def test_gamma_zero_reduces_to_weighted_ce(self, p, t, alpha):
        fl = focal_loss(p, t, alpha, 0.0)
        ce = ce_loss(p, t)
        a_t = alpha if t == 1 else 1 - alpha
        assert abs(fl.value - a_t * ce.value) <= 1e-12
        assert abs(fl.d_dp - a_t * ce.d_dp) <= 1e-12 * max(1.0, abs(fl.d_dp))

    def test_gamma_below_one_is_finite_near_one(self):
        out = focal_loss(1 - 1e-9, 1, 0.25, 0.5)
        assert np.isfinite(out.value) and np.isfinite(out.d_dp)


class TestBalancedFocal:
    def test_reference_value(self):
        cfg = LossConfig(xi=30.0, alpha=0.25, gamma=1.5)
        assert balanced_focal_loss(0.5, 1, cfg).value == pytest.approx(30 * FOCAL_HALF, rel=1e-14)
        assert 30 * FOCAL_HALF == pytest.approx(1.837984, abs=5e-7)

    @given(p=probs, t=targets)
    def test_unit_xi_is_focal(self, p, t):
        cfg = LossConfig(xi=1.0)
        assert balanced_focal_loss(p, t, cfg) == focal_loss(p, t, cfg.alpha, cfg.gamma)

    @given(p=probs, t=targets, xi=st.floats(min_value=1e-3, max_value=1e3))
    def test_xi_linearity(self, p, t, xi):
        cfg = LossConfig(xi=xi)
        b = balanced_focal_loss(p, t, cfg)
        f = focal_loss(p, t, cfg.alpha, cfg.gamma)
        assert b.value == pytest.approx(xi * f.value, rel=1e-12, abs=1e-300)
        assert b.d_dp == pytest.approx(xi * f.d_dp, rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("t", [0, 1])
    def test_argmin_independent_of_xi(self, t):
        grid = np.linspace(0.0, 1.0, 1001)
        best = {xi: int(np.argmin(balanced_focal_loss(grid, np.full(grid.shape, t), LossConfig(xi=xi)).value))
                for xi in (0.1, 1.0, 30.0, 500.0)}
        assert len(set(best.values())) == 1


class TestProperties:
    @given(p=st.floats(min_value=0.0, max_value=1.0), t=targets, alpha=alphas, gamma=gammas)
    def test_non_negative_and_finite(self, p, t, alpha, gamma):
        for out in (ce_loss(p, t), focal_loss(p, t, alpha, gamma)):
            assert out.value >= 0.0
            assert np.isfinite(out.value) and np.isfinite(out.d_dp)

    @given(t=targets, alpha=alphas, gamma=gammas, a=probs, b=probs)
    def test_strictly_decreasing_in_p_t(self, t, alpha, gamma, a, b):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-6:
            return
        p_of = (lambda q: q) if t == 1 else (lambda q: 1 - q)
        for fn in (lambda p: ce_loss(p, t), lambda p: focal_loss(p, t, alpha, gamma)):
            assert fn(p_of(lo)).value > fn(p_of(hi)).value

    def test_gradient_check_on_random_points(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig()
        kernels = [
            (ce_loss, {}),
            (focal_loss, {"alpha": 0.25, "gamma": 1.5}),
            (focal_loss, {"alpha": 0.6, "gamma": 0.5}),
            (balanced_focal_loss, {"cfg": cfg}),
        ]
        h = 1e-5
        for op, kw in kernels:
            worst = max(
                grad_check_cell(op, p, t, h, **kw)
                for p, t in zip(rng.uniform(2 * h + 1e-3, 1 - 2 * h - 1e-3, 1000), rng.integers(0, 2, 1000))
            )
            assert worst < 1e-4, op.__name__


class TestGradCheck:
    def test_ce(self):
        assert grad_check_cell(ce_loss, 0.3, 1) < 1e-6

    def test_balanced_focal(self):
        assert grad_check_cell(balanced_focal_loss, 0.7, 0, cfg=LossConfig(xi=30.0)) < 1e-6

    @given(p=probs, t=targets)
    def test_gamma_zero_derivative_equals_scaled_ce(self, p, t):
        a_t = 0.25 if t == 1 else 0.75
        assert abs(focal_loss(p, t, 0.25, 0.0).d_dp - a_t * ce_loss(p, t).d_dp) <= 1e-12 * max(1.0, 1.0 / min(p, 1 - p))

    @pytest.mark.parametrize("p", [0.0, 1e-5, 1 - 1e-5, 1.0])
    def test_rejects_points_near_clamp(self, p):
        with pytest.raises(DomainError):
            grad_check_cell(ce_loss, p, 1, h=1e-5)


class TestLossConfig:
    def test_defaults_are_published_settings(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma, cfg.xi, cfg.rank_b, cfg.eps) == (0.25, 1.5, 30.0, 0.35, 1e-7)

    @pytest.mark.parametrize(
        "kw",
        [{"alpha": 0.0}, {"alpha": 1.0}, {"gamma": -0.1}, {"xi": 0.0}, {"rank_b": 0.0}, {"rank_b": 1.5},
         {"eps": 0.5}, {"eps": 0.0}, {"variant": "nope"}, {"xi": float("nan")}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw)

    def test_variant_aliases(self):
        assert LossConfig(variant="default").variant is Variant.BCE
        assert LossConfig(variant="Balanced-Focal").variant is Variant.BALANCED_FOCAL
