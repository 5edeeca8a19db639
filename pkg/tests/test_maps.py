"""Fiber-map construction, parameter solving, and binding-constant tests.

Oracle values in this module were computed by independent routes before the
implementation was written: the Misiurewicz parameter via scipy's brentq on a
hand-coded quadratic orbit defect, inner amplitudes from the closed form, and
join pins from the outer-branch formula.  They are frozen here as literals.
"""

import numpy as np
import pytest
from scipy.optimize import brentq

from vianalab import (
    ConfigurationError,
    FiberMap,
    InvarianceError,
    LemmaViolationError,
    MapParams,
    NoParameterError,
    binding_audit,
    build_map,
    critical_orbit_check,
    default_params,
    estimate_binding_constants,
    eval_phi,
    inner_amplitude,
    invariant_interval,
    solve_a0,
    step_arrays,
)

# Misiurewicz parameter of a - x^2 with the critical orbit landing on the
# fixed point after three steps, frozen from the brentq oracle below.
A0_31 = 1.543689012692103
A0_41 = 1.8929109879077926


def quadratic_misiurewicz_defect(a: float, l: int, k: int) -> float:
    """Independent orbit defect for the pure quadratic family a - x**2."""
    x = 0.0
    for _ in range(l):
        x = a - x * x
    y = x
    for _ in range(k):
        y = a - y * y
    return y - x


class TestInnerAmplitude:
    def test_frozen_values(self):
        assert inner_amplitude(2, 1, 7 / 8) == pytest.approx(1.0, abs=1e-15)
        assert inner_amplitude(4, 2, 0.5) == pytest.approx(3.5, abs=1e-12)
        assert inner_amplitude(3, 1, 0.1) == pytest.approx(58.33333333333332, rel=1e-12)

    def test_core_edge_slope_even(self):
        # d/dx [a - A x^{2q}] at x = b has magnitude 2qA b^{2q-1} = 7/4
        for q, b in [(1, 0.8), (2, 0.5), (3, 0.4)]:
            A = inner_amplitude(2 * q, q, b)
            assert 2 * q * A * b ** (2 * q - 1) == pytest.approx(7 / 4, rel=1e-12)

    def test_core_edge_slope_odd(self):
        for q, b in [(1, 0.1), (2, 0.15)]:
            A = inner_amplitude(2 * q + 1, q, b)
            assert (2 * q + 1) * A * b ** (2 * q) == pytest.approx(7 / 4, rel=1e-12)


class TestMapParams:
    def test_defaults_even(self):
        p = default_params(D=2, alpha=1e-3)
        assert (p.preperiod_l, p.period_k) == (4, 1)
        assert p.b == pytest.approx(7 / 8)
        assert p.a0 == pytest.approx(A0_41, abs=1e-9)
        assert p.x_tilde == 0.0

    def test_defaults_even_alpha_zero(self):
        p = default_params(D=2, alpha=0.0)
        assert (p.preperiod_l, p.period_k) == (2, 1)
        assert p.a0 == pytest.approx(2.0, abs=1e-12)

    def test_defaults_odd(self):
        p = default_params(D=3, alpha=1e-3)
        assert p.is_odd
        assert (p.b, p.w) == (0.1, 0.2)
        assert p.x_tilde == 0.5
        assert p.critical_radius == pytest.approx(0.1, rel=1e-12)

    def test_degree_family_consistency(self):
        with pytest.raises(ConfigurationError):
            MapParams(D=4, q=1, alpha=1e-3, a0=1.5)
        with pytest.raises(ConfigurationError):
            MapParams(D=1, q=1, alpha=1e-3, a0=1.5)

    def test_base_degree_floor(self):
        with pytest.raises(ConfigurationError, match="16"):
            default_params(D=2, alpha=1e-3, d=8)

    def test_odd_geometry_constraints(self):
        with pytest.raises(ConfigurationError):
            MapParams(D=3, q=1, alpha=1e-3, b=0.3, w=0.2)
        with pytest.raises(ConfigurationError):
            MapParams(D=3, q=1, alpha=1e-3, b=0.2, w=0.6)

    def test_eta_range(self):
        with pytest.raises(ConfigurationError):
            MapParams(D=2, q=1, alpha=1e-3, a0=1.6, eta=0.3)


class TestSolveA0:
    def test_31_matches_brentq_oracle(self):
        oracle = brentq(
            quadratic_misiurewicz_defect, 1.4, 1.7, args=(3, 1), xtol=1e-14
        )
        ours = solve_a0(3, 1, tol=1e-12)
        assert ours == pytest.approx(oracle, abs=1e-11)
        assert ours == pytest.approx(A0_31, abs=1e-11)

    def test_41_matches_brentq_oracle(self):
        # the preperiod-4 root is bracketed away from the preperiod-3 root
        # (1.5437) and the boundary root a = 2, both of which also zero the
        # (4,1) defect without being minimal
        oracle = brentq(
            quadratic_misiurewicz_defect, 1.8, 1.95, args=(4, 1), xtol=1e-14
        )
        ours = solve_a0(4, 1, tol=1e-12)
        assert ours == pytest.approx(oracle, abs=1e-11)
        assert ours == pytest.approx(A0_41, abs=1e-11)

    def test_41_lands_on_the_positive_fixed_point(self):
        # independent combinatorics check: h^4(0) = p_plus and h^3(0) = -p_plus
        a = solve_a0(4, 1, tol=1e-13)
        x = 0.0
        orbit = [x]
        for _ in range(5):
            x = a - x * x
            orbit.append(x)
        p_plus = (-1.0 + np.sqrt(1.0 + 4.0 * a)) / 2.0
        assert orbit[3] == pytest.approx(-p_plus, abs=1e-9)
        assert orbit[4] == pytest.approx(p_plus, abs=1e-9)

    def test_21_exact_endpoint(self):
        # a = 2: orbit 0 -> 2 -> -2 -> -2, fixed after two steps, exactly.
        assert solve_a0(2, 1, tol=1e-12) == 2.0

    def test_impossible_combination(self):
        with pytest.raises(NoParameterError):
            solve_a0(1, 1, tol=1e-12)

    def test_q2_family_has_root(self):
        a = solve_a0(3, 1, tol=1e-10, q=2, b=0.5)
        assert 1.0 < a <= 2.0


class TestEvenMap:
    def test_degenerate_is_exact_quadratic(self):
        p = default_params(D=2, alpha=0.0)
        fm = build_map(p)
        assert fm.degenerate
        xs = np.linspace(fm.x_lo, fm.x_hi, 1001)
        assert np.allclose(fm.value(xs), 2.0 - xs**2, atol=0.0)

    def test_nondegenerate_q2_builds_with_recorded_deviation(self):
        # q = 2 endpoint data admit no monotone h'' join; the map must still
        # build, with the deviation recorded rather than raised.
        a = solve_a0(3, 1, tol=1e-10, q=2, b=0.5)
        p = MapParams(D=4, q=2, alpha=1e-3, a0=a, b=0.5, w=0.6, preperiod_l=3)
        fm = build_map(p)
        mono = fm.audit["monotone"]
        assert not mono["feasible_all"]
        assert not mono["monotone_all"]
        assert fm.audit["smoothness"]["enforced"]  # C2 still holds

    def test_critical_derivative_vanishes(self):
        p = default_params(D=2, alpha=1e-3)
        fm = build_map(p)
        assert abs(fm.deriv(0.0)) < 1e-9
        assert fm.deriv2(0.0) == pytest.approx(-2.0, rel=1e-9)

    def test_invariance_rejects_a0_2_with_coupling(self):
        with pytest.raises(InvarianceError):
            build_map(MapParams(D=2, q=1, alpha=1e-3, a0=2.0, preperiod_l=2))

    def test_half_width_ordering(self):
        with pytest.raises(ConfigurationError):
            MapParams(D=2, q=1, alpha=1e-3, a0=1.6, b=0.9, w=0.5)


@pytest.fixture(scope="module")
def fm():
    return build_map(default_params(D=3, alpha=1e-3))


class TestOddMap:
    def test_lift_pins(self, fm):
        # outer branch 2x pins the window edges; the core polynomial pins
        # 1 + A (x - 1/2)^3 at the core edges.
        assert fm.lift(0.3) == pytest.approx(0.6, abs=1e-12)
        assert fm.lift(0.7) == pytest.approx(1.4, abs=1e-12)
        assert fm.lift(0.4) == pytest.approx(1 - 58.33333333333332e-3, rel=1e-10)
        assert fm.lift(0.6) == pytest.approx(1 + 58.33333333333332e-3, rel=1e-10)

    def test_seam_degree(self, fm):
        assert fm.lift(1.0) - fm.lift(0.0) == pytest.approx(2.0, abs=1e-12)

    def test_lift_monotone_off_critical_point(self, fm):
        # h'(1/2) = 0 exactly (order-3 critical point); elsewhere positive.
        xs = np.linspace(0.0, 1.0, 20001)
        dv = fm.deriv(xs)
        assert np.all(dv > -1e-12)
        away = np.abs(xs - 0.5) > 1e-3
        assert np.all(dv[away] > 0.0)

    def test_critical_fixed_pair(self, fm):
        # h(1/2) = 0 on the circle and 0 is a fixed point of slope 2.
        def circ(v):
            v = v % 1.0
            return min(v, 1.0 - v)

        assert circ(fm.crit_value()) < 1e-12
        assert circ(fm.value(0.0)) < 1e-12
        assert fm.deriv(0.0) == pytest.approx(2.0, rel=1e-12)

    def test_wrap_image_covers_seam(self, fm):
        lo, hi = fm.interval_image(0.45, 0.55)
        assert lo < 1.0 < hi


class TestCriticalOrbit:
    def test_31_multiplier_matches_fixed_point_formula(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        rep = critical_orbit_check(fm)
        a0 = fm.params.a0
        p_plus = (-1.0 + np.sqrt(1.0 + 4.0 * a0)) / 2.0
        assert rep["defect"] < 1e-9
        assert rep["multiplier"] == pytest.approx(2.0 * p_plus, rel=1e-8)
        assert rep["rho"] > 1.0

    def test_odd_orbit(self):
        fm = build_map(default_params(D=3, alpha=1e-3))
        rep = critical_orbit_check(fm)
        assert rep["defect"] < 1e-12
        assert rep["multiplier"] == pytest.approx(2.0, rel=1e-10)


class TestInvariantInterval:
    def test_forward_invariance_with_coupling(self):
        a0 = A0_31
        alpha = 1e-3
        x_lo, x_hi = invariant_interval(a0, alpha)
        assert x_hi == pytest.approx(a0 + alpha, abs=1e-15)
        xs = np.linspace(x_lo, x_hi, 4001)
        img = a0 - xs**2
        assert np.all(img + alpha <= x_hi + 1e-12)
        assert np.all(img - alpha >= x_lo - 1e-12)

    def test_rejects_escape(self):
        with pytest.raises(InvarianceError):
            invariant_interval(2.0, 1e-3)


class TestStepping:
    def test_scalar_matches_arrays_even(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        rng = np.random.default_rng(3)
        th = rng.random(200)
        x = rng.uniform(fm.x_lo, fm.x_hi, 200)
        th2, x2 = step_arrays(th.copy(), x.copy(), fm)
        for i in range(0, 200, 17):
            t_s, x_s = eval_phi((th[i], x[i]), fm)
            assert t_s == pytest.approx(th2[i], abs=1e-14)
            assert x_s == pytest.approx(x2[i], abs=1e-12)

    def test_scalar_matches_arrays_odd(self):
        fm = build_map(default_params(D=3, alpha=1e-3))
        rng = np.random.default_rng(4)
        th = rng.random(200)
        x = rng.random(200)
        th2, x2 = step_arrays(th.copy(), x.copy(), fm)
        for i in range(0, 200, 17):
            t_s, x_s = eval_phi((th[i], x[i]), fm)
            assert t_s == pytest.approx(th2[i], abs=1e-14)
            assert abs(x_s - x2[i]) % 1.0 == pytest.approx(0.0, abs=1e-12)

    def test_base_is_d_adic(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        th2, _ = step_arrays(np.array([0.25]), np.array([0.1]), fm)
        assert th2[0] == pytest.approx((16 * 0.25) % 1.0, abs=1e-15)


class TestBindingConstants:
    def test_even_defaults_chain(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        dc = estimate_binding_constants(fm, sample_count=20000, seed=1)
        assert dc.N_alpha == 6
        assert dc.C0 <= dc.C1
        assert dc.C0 == pytest.approx(0.869, abs=0.05)
        assert dc.C1 == pytest.approx(1.240, abs=0.05)
        assert dc.sigma_lem > 1.0
        assert 0.0 < dc.c
        assert 0.0 < dc.epsilon <= dc.c / 2 + 1e-15
        assert 0.0 < dc.sigma_tilde < 1.0
        # tail-regime headroom for the base expansion
        D = fm.params.D
        assert np.exp((D + 1) * dc.c + dc.epsilon) <= 16 - dc.alpha
        assert dc.r_delta == 0
        assert dc.delta1 > 0.0
        assert len(dc.grid_alphas) == len(dc.grid_N) >= 3
        assert all(n2 >= n1 for n1, n2 in zip(dc.grid_N, dc.grid_N[1:]))

    def test_even_fresh_audit_has_no_annulus_violations(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        dc = estimate_binding_constants(fm, sample_count=20000, seed=1)
        aud = binding_audit(fm, dc, n_samples=10000, seed=7)
        assert aud["b_violations"] == 0

    def test_odd_default_alpha_sits_on_knife_edge(self):
        # At alpha = 1e-3 and D = 3 the outer doubling maps the sampling
        # annulus edge exactly onto the critical ball edge (1/2 - 5*ra = 0),
        # so the coupling tips boundary points inside at the first step.
        fm = build_map(default_params(D=3, alpha=1e-3))
        with pytest.raises(LemmaViolationError):
            estimate_binding_constants(fm, sample_count=20000, seed=1)

    def test_odd_below_knife_edge_works(self):
        fm = build_map(default_params(D=3, alpha=9e-4))
        dc = estimate_binding_constants(fm, sample_count=20000, seed=1)
        assert dc.N_alpha >= 1
        assert dc.r_delta == 1
        aud = binding_audit(fm, dc, n_samples=10000, seed=7)
        assert aud["b_violations"] == 0
