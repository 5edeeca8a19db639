"""Orbit engine tests: stepping, return depths, and the orbit-level audits."""

import numpy as np
import pytest

from vianalab import (
    INFINITE_DEPTH,
    BaseStream,
    ConfigurationError,
    CriticalHitError,
    Orbit,
    PhasePoint,
    ReturnStructure,
    build_map,
    comparison_bound_check,
    default_params,
    derivative_lower_bound_check,
    estimate_binding_constants,
    exceptional_decay_fit,
    exceptional_membership,
    iterate_orbit,
    nue_and_slow_approx,
    return_index,
    return_indices,
    signed_return_index,
    sweep_ensemble,
    truncated_log_distance,
)


@pytest.fixture(scope="module")
def even_ctx():
    fm = build_map(default_params(D=2, alpha=1e-3))
    dc = estimate_binding_constants(fm, sample_count=20000, seed=1)
    return fm, dc


def synthetic_orbit(x, logd=None, r=None):
    x = np.asarray(x, dtype=float)
    n = len(x) - 1
    return Orbit(
        theta=np.zeros(n + 1),
        x=x,
        logd=np.zeros(n) if logd is None else np.asarray(logd, dtype=float),
        r=np.zeros(n, dtype=np.int64) if r is None else np.asarray(r, np.int64),
        seed=0,
        fingerprint="synthetic",
    )


class TestBaseStream:
    def test_float_doubling_collapses_but_stream_does_not(self):
        # the pitfall the stream exists to avoid
        t = 0.3
        for _ in range(20):
            t = (16 * t) % 1.0
        assert t == 0.0
        bs = BaseStream(16, 1, seed=0, theta0=0.3)
        vals = [bs.step()[0] for _ in range(40)]
        assert all(0.0 <= v < 1.0 for v in vals)
        assert np.std(vals[20:]) > 0.1

    def test_step_relation(self):
        bs = BaseStream(16, 4, seed=1)
        t0 = bs.theta
        t1 = bs.step()
        assert np.allclose((16 * t0) % 1.0, t1, atol=1e-12)

    def test_seed_replay(self):
        a = BaseStream(16, 8, seed=5)
        b = BaseStream(16, 8, seed=5)
        for _ in range(10):
            assert np.array_equal(a.step(), b.step())


class TestIterateOrbit:
    def test_critical_orbit_via_ulp_perturbation(self):
        fm = build_map(default_params(D=2, alpha=0.0))
        with pytest.raises(CriticalHitError):
            iterate_orbit(PhasePoint(0.125, 0.0), 4, fm)
        x0 = np.nextafter(0.0, 1.0)
        orb = iterate_orbit(PhasePoint(0.125, x0), 5, fm, seed=5)
        assert np.allclose(orb.x[1:4], [2.0, -2.0, -2.0], atol=0.0)

    def test_fixed_point_constant_orbit(self):
        fm = build_map(default_params(D=2, alpha=0.0))
        orb = iterate_orbit(PhasePoint(0.3, -2.0), 5, fm, seed=5)
        assert np.all(orb.x == -2.0)

    def test_replay_determinism_and_consistency(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        o1 = iterate_orbit(PhasePoint(0.33, 0.7), 200, fm, seed=11)
        o2 = iterate_orbit(PhasePoint(0.33, 0.7), 200, fm, seed=11)
        assert np.array_equal(o1.x, o2.x)
        assert np.array_equal(o1.theta, o2.theta)
        assert o1.replay_check(fm) < 1e-12

    def test_rejects_zero_length(self):
        fm = build_map(default_params(D=2, alpha=1e-3))
        with pytest.raises(ConfigurationError):
            iterate_orbit(PhasePoint(0.3, 0.7), 0, fm)


class TestReturnIndex:
    def test_definition_examples(self):
        p = default_params(D=2, alpha=1e-3)
        ra = p.critical_radius
        assert return_index(ra * np.exp(-0.5), p) == 1
        assert return_index(2 * ra, p) == 0
        assert return_index(ra, p) == 1          # closed outer edge
        assert return_index(-ra, p) == 1
        assert return_index(0.0, p) == INFINITE_DEPTH

    def test_annulus_width_formula(self):
        p = default_params(D=2, alpha=1e-3)
        ra = p.critical_radius
        for r in (1, 3, 7):
            width = ra * np.exp(-(r - 1)) - ra * np.exp(-r)
            assert width == pytest.approx(ra * np.exp(-r) * (np.e - 1), rel=1e-12)

    def test_signed_variant(self):
        p = default_params(D=2, alpha=1e-3)
        ra = p.critical_radius
        assert signed_return_index(0.9 * ra, p) == 1
        assert signed_return_index(-0.9 * ra, p) == -1
        assert signed_return_index(3 * ra, p) == 0

    def test_vectorized_matches_scalar_and_intervals(self):
        p = default_params(D=2, alpha=1e-3)
        fm = build_map(p)
        xs = np.random.default_rng(0).uniform(fm.x_lo, fm.x_hi, 10**5)
        rv = return_indices(xs, p)
        scal = np.array([return_index(float(v), p) for v in xs[:2000]])
        assert np.array_equal(rv[:2000], scal)
        ra = p.critical_radius
        k = rv[rv >= 1].astype(float)
        d = np.abs(xs[rv >= 1])
        assert np.all(d <= ra * np.exp(-(k - 1)))
        assert np.all(d > ra * np.exp(-k))

    def test_odd_family_uses_circle_distance(self):
        p = default_params(D=3, alpha=1e-3)
        assert return_index(0.5 + 0.05, p) == return_index(0.5 - 0.05, p)
        # wrap-around representative of the same circle point
        assert return_index(0.45 % 1.0, p) == return_index(1.45 % 1.0, p)


class TestReturnStructure:
    def test_thinning_enforces_gap(self, even_ctx):
        fm, dc = even_ctx
        orb = iterate_orbit(PhasePoint(0.21, 0.4), 3000, fm, seed=17)
        rs = ReturnStructure.from_orbit(orb, dc)
        assert len(rs.situations) >= 2
        gaps = np.diff(rs.situations)
        assert np.all(gaps >= dc.N_alpha)
        assert set(rs.deep.tolist()) <= set(rs.situations.tolist())
        # situation count cap: s <= n/N + 1
        n = len(orb)
        assert rs.count(n) <= n / dc.N_alpha + 1

    def test_deep_sum_window(self, even_ctx):
        _, dc = even_ctx
        r = np.array([0, 3, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0], dtype=np.int64)
        rs = ReturnStructure.from_depths(r, dc)
        assert rs.deep_sum(2, r) == 3
        assert rs.deep_sum(12, r) == 5


class TestBoundChecks:
    def test_eq8_applicable_only_at_situations(self, even_ctx):
        fm, dc = even_ctx
        orb = iterate_orbit(PhasePoint(0.21, 0.4), 3000, fm, seed=17)
        rs = ReturnStructure.from_orbit(orb, dc)
        v = int(rs.situations[len(rs.situations) // 2])
        rep = derivative_lower_bound_check(orb, v, dc)
        assert rep["applicable"] and rep["ok"]
        # a non-return step right after is inapplicable
        off = v + 1
        if orb.r[off] == 0:
            rep2 = derivative_lower_bound_check(orb, off, dc)
            assert not rep2["applicable"]

    def test_comparison_reflexive(self, even_ctx):
        fm, dc = even_ctx
        orb = iterate_orbit(PhasePoint(0.61, 1.1), 800, fm, seed=23)
        rep = comparison_bound_check(orb, orb, 800, dc)
        assert rep["applicable"]
        assert rep["ok"]

    def test_comparison_hypothesis_violation_listed(self, even_ctx):
        _, dc = even_ctx
        a = synthetic_orbit(np.zeros(6) + 2.0, r=[9, 0, 0, 0, 0])
        b = synthetic_orbit(np.zeros(6) + 2.0, r=[1, 0, 0, 0, 0])
        rep = comparison_bound_check(a, b, 5, dc)
        assert not rep["applicable"]
        assert rep["violations"] == [0]


class TestExceptional:
    def test_far_orbit_in_neither(self, even_ctx):
        _, dc = even_ctx
        orb = synthetic_orbit(np.full(101, 1.2), logd=np.full(100, 0.9))
        rep = exceptional_membership(orb, 100, dc)
        assert rep == {"in_B1": False, "in_B2": False}

    def test_n_equals_one_vacuous(self, even_ctx):
        _, dc = even_ctx
        orb = synthetic_orbit([1e-9, 1e-9], logd=[0.0], r=[30])
        rep = exceptional_membership(orb, 1, dc)
        assert not rep["in_B2"]

    def test_deep_approach_triggers_b2(self, even_ctx):
        _, dc = even_ctx
        x = np.full(101, 1.2)
        x[1] = 1e-12  # essentially on the critical point at step 1
        rep = exceptional_membership(synthetic_orbit(x), 100, dc)
        assert rep["in_B2"]

    def test_decay_fit_frozen_fractions(self):
        # measured once at defaults (seed 2, 10^4 samples) and frozen
        fr = {50: 0.1122, 100: 0.0909, 200: 0.0499, 400: 0.0147}
        fit = exceptional_decay_fit(fr)
        assert fit["gamma"] == pytest.approx(0.1604, abs=2e-3)
        assert fit["r2"] > 0.9

    def test_decay_fit_degenerate(self):
        fit = exceptional_decay_fit({50: 0.0, 100: 0.0, 200: 0.1})
        assert fit["gamma"] == np.inf


class TestNueSlowApprox:
    def test_truncation_boundary(self):
        out = truncated_log_distance(np.array([0.5, 0.03, 0.0316]), 0.0316)
        assert out[0] == 0.0
        assert out[1] == pytest.approx(-np.log(0.03), rel=1e-12)
        assert out[2] == pytest.approx(-np.log(0.0316), rel=1e-12)

    def test_generic_orbit_passes(self, even_ctx):
        fm, dc = even_ctx
        orb = iterate_orbit(PhasePoint(0.37, 0.9), 1000, fm, seed=41)
        rep = nue_and_slow_approx(orb, 1000, dc)
        if rep["applicable"]:
            assert rep["pass"]
            assert rep["nue_sum"] <= -dc.c * 1000

    def test_exceptional_orbit_inapplicable(self, even_ctx):
        _, dc = even_ctx
        x = np.full(101, 1.2)
        x[1] = 1e-12
        rep = nue_and_slow_approx(synthetic_orbit(x), 100, dc)
        assert not rep["applicable"]


class TestEnsembleSweep:
    def test_defaults_audits_clean(self, even_ctx):
        fm, dc = even_ctx
        tr = sweep_ensemble(fm, dc, n=400, n_samples=3000, seed=2,
                            checkpoints=(50, 100, 200, 400), audit_eq8=True)
        eq8 = tr.checkpoints["eq8"]
        assert eq8["violations"] == 0
        assert eq8["s_cap_violations"] == 0
        assert eq8["checks"] > 1000
        fr = [tr.checkpoints[m]["frac_E"] for m in (50, 100, 200, 400)]
        assert all(b <= a for a, b in zip(fr, fr[1:]))

    def test_checkpoint_masks_disjoint(self, even_ctx):
        fm, dc = even_ctx
        tr = sweep_ensemble(fm, dc, n=100, n_samples=2000, seed=3,
                            checkpoints=(100,))
        s = tr.checkpoints[100]
        assert s["frac_E"] <= s["frac_B1"] + s["frac_B2"] + 1e-12
