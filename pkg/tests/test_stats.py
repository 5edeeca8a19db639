"""Density estimation, exponents, correlations, and CLT diagnostics."""

import dataclasses
import math

import numpy as np
import pytest

from vianalab import (
    ConfigurationError,
    DensityEstimate,
    GridSpec,
    Observable,
    analytic_fiber_cell_masses,
    assemble_ulam,
    birkhoff_density,
    build_map,
    clt_test,
    correlation_empirical,
    correlation_operator,
    default_params,
    invariance_functional_check,
    iterate_orbit,
    lyapunov,
    lyapunov_ensemble,
    make_observables,
    sample_from_density,
    stationary_density,
    step_points,
    PhasePoint,
)
from scipy import sparse


@pytest.fixture(scope="module")
def coupled():
    fm = build_map(default_params(D=2, alpha=1e-3))
    return fm


@pytest.fixture(scope="module")
def decoupled():
    return build_map(default_params(D=2, alpha=0.0))


@pytest.fixture(scope="module")
def small_density(coupled):
    grid = GridSpec.for_map(coupled, n_theta=64, n_x=64)
    U = assemble_ulam(coupled, grid, samples_per_cell=128, seed=0)
    return grid, U, stationary_density(U, tol=1e-6)


class TestGridSpec:
    def test_cells_tile_exactly(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=8, n_x=16)
        assert g.n_cells == 128
        assert g.x_lo == coupled.x_lo and g.x_hi == coupled.x_hi
        # every edge coordinate falls in a valid cell, right edges fold left
        idx = g.cell_index(np.array([0.0, 0.999999, 0.5]),
                           np.array([g.x_lo, g.x_hi, g.x_hi]))
        assert idx.min() >= 0 and idx.max() < g.n_cells
        assert idx[1] % g.n_x == g.n_x - 1

    def test_centers_shapes(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=4, n_x=8)
        tt, xx = g.centers()
        assert tt.shape == xx.shape == (32,)
        assert g.cell_index(tt, xx).tolist() == list(range(32))

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigurationError):
            GridSpec(n_theta=0, n_x=4, x_lo=0.0, x_hi=1.0)
        with pytest.raises(ConfigurationError):
            GridSpec(n_theta=4, n_x=4, x_lo=1.0, x_hi=1.0)

    def test_fingerprint_is_stable_and_discriminating(self, coupled):
        g1 = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        g2 = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        g3 = GridSpec.for_map(coupled, n_theta=8, n_x=16)
        assert g1.fingerprint() == g2.fingerprint()
        assert g1.fingerprint() != g3.fingerprint()


class TestAssembleUlam:
    def test_row_sums_exact_for_power_of_two_samples(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=16, n_x=16)
        U = assemble_ulam(coupled, g, samples_per_cell=64, seed=1)
        assert U.row_sum_defect() == 0.0
        assert U.P.min() >= 0.0

    def test_row_sums_within_tolerance_otherwise(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        U = assemble_ulam(coupled, g, samples_per_cell=48, seed=1)
        assert U.row_sum_defect() < 1e-12

    def test_minimum_sampling_enforced(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        with pytest.raises(ConfigurationError):
            assemble_ulam(coupled, g, samples_per_cell=16)

    def test_deterministic_given_seed(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        U1 = assemble_ulam(coupled, g, samples_per_cell=32, seed=5)
        U2 = assemble_ulam(coupled, g, samples_per_cell=32, seed=5)
        assert (U1.P != U2.P).nnz == 0

    def test_alpha_zero_fiber_step_ignores_theta(self, decoupled):
        # the decoupled skew product moves x by h alone, so the fiber
        # coordinate of the image cannot depend on theta
        x = np.linspace(decoupled.x_lo, decoupled.x_hi, 101)
        _, x_a = step_points(np.full_like(x, 0.2), x, decoupled)
        _, x_b = step_points(np.full_like(x, 0.7), x, decoupled)
        assert np.array_equal(x_a, x_b)

    def test_doubling_stability_at_oracle_grid(self, decoupled):
        fg = GridSpec.for_map(decoupled, n_theta=1, n_x=4096)
        r1 = stationary_density(
            assemble_ulam(decoupled, fg, samples_per_cell=256, seed=0)).rho
        r2 = stationary_density(
            assemble_ulam(decoupled, fg, samples_per_cell=512, seed=0)).rho
        shift = float(np.abs(r1 - r2).sum())
        assert shift == pytest.approx(0.00585, abs=5e-4)
        assert shift < 1e-2


class TestStationaryDensity:
    def test_identity_operator_keeps_uniform(self, coupled):
        from vianalab import UlamOperator
        g = GridSpec.for_map(coupled, n_theta=4, n_x=4)
        U = UlamOperator(P=sparse.identity(16, format="csr"), grid=g,
                         samples_per_cell=32, seed=0)
        est = stationary_density(U, tol=1e-12)
        assert est.iterations == 1
        assert np.allclose(est.rho, 1.0 / 16, atol=0)

    def test_fiber_oracle_frozen(self, decoupled):
        # stationary fiber density of the a0 = 2 quadratic against the
        # arcsine law 1/(pi sqrt(4 - x^2)), measured once and frozen
        fg = GridSpec.for_map(decoupled, n_theta=1, n_x=4096)
        est = stationary_density(
            assemble_ulam(decoupled, fg, samples_per_cell=256, seed=0))
        l1 = float(np.abs(est.rho - analytic_fiber_cell_masses(fg)).sum())
        assert l1 == pytest.approx(0.0236, abs=2e-3)
        assert l1 < 0.05
        assert est.rayleigh2 < 1.0
        assert est.converged

    def test_nonconvergence_reported_not_raised(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=16, n_x=16)
        U = assemble_ulam(coupled, g, samples_per_cell=32, seed=2)
        est = stationary_density(U, tol=1e-300, max_iter=3)
        assert not est.converged
        assert est.iterations == 3
        assert len(est.residual_trace) == 3

    def test_density_is_normalized_and_nonnegative(self, small_density):
        _, _, est = small_density
        assert est.rho.min() >= 0.0
        assert est.rho.sum() == pytest.approx(1.0, abs=1e-12)

    def test_oracle_mass_formula(self):
        g = GridSpec(n_theta=1, n_x=1000, x_lo=-2.0, x_hi=2.0)
        masses = analytic_fiber_cell_masses(g)
        assert masses.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(masses, masses[::-1], atol=1e-15)


class TestCrossValidation:
    def test_birkhoff_agrees_with_ulam_at_canary_scale(self, coupled):
        # small-grid canary for the full-size acceptance cross-validation
        g = GridSpec.for_map(coupled, n_theta=128, n_x=128)
        est = stationary_density(
            assemble_ulam(coupled, g, samples_per_cell=256, seed=0))
        bd = birkhoff_density(coupled, g, n_orbits=500, n_steps=8000, seed=42)
        assert float(np.abs(est.rho - bd).sum()) < 0.25

    def test_invariance_functionals(self, coupled, small_density):
        grid, _, est = small_density
        rep = invariance_functional_check(coupled, est, grid, n_psi=10,
                                          n_samples=20000, seed=0)
        assert rep["failures"] == 0
        assert rep["worst_z"] < 3.0


class TestLyapunov:
    def test_theta_exponent_exact(self, coupled):
        orb = iterate_orbit(PhasePoint(0.3, 0.7), 200, coupled, seed=1)
        rep = lyapunov(orb, coupled.params)
        assert rep["lambda_theta"] == math.log(16)

    def test_quadratic_oracle_log2(self, decoupled):
        # unit-scale version of the exponent oracle: 1e6 iterates per seed
        for seed in (1, 2, 3):
            rep = lyapunov_ensemble(decoupled, n_orbits=100, n_steps=10000,
                                    seed=seed)
            assert rep["lambda_x"] == pytest.approx(math.log(2), abs=0.02)

    def test_coupling_continuity_with_pinned_a0(self, coupled):
        # the alpha -> 0 comparison must keep a0 fixed; re-solving at
        # alpha = 0 would switch to the boundary parameter a0 = 2
        p0 = dataclasses.replace(coupled.params, alpha=0.0)
        fm0 = build_map(p0)
        for seed in (1, 2):
            l0 = lyapunov_ensemble(fm0, n_orbits=100, n_steps=10000,
                                   seed=seed)["lambda_x"]
            l1 = lyapunov_ensemble(coupled, n_orbits=100, n_steps=10000,
                                   seed=seed)["lambda_x"]
            assert l0 > 0 and l1 > 0
            assert abs(l1 - l0) < 0.05


class TestObservables:
    def test_shipped_constants(self, coupled):
        obs = make_observables(coupled)
        assert obs["x"].lip == 1.0
        assert obs["sin_theta"].lip == pytest.approx(2 * math.pi)
        xmax = max(abs(coupled.x_lo), abs(coupled.x_hi))
        assert obs["x_sin_theta"].lip == pytest.approx(
            math.hypot(2 * math.pi * xmax, 1.0))

    def test_callable_on_arrays(self, coupled):
        obs = make_observables(coupled)["x_sin_theta"]
        t = np.array([0.0, 0.25])
        x = np.array([1.0, 2.0])
        out = obs(t, x)
        assert out[0] == pytest.approx(0.0)
        assert out[1] == pytest.approx(2.0)


class TestCorrelation:
    def test_constant_observable_has_zero_series(self, coupled):
        const = Observable("const", 0.0, lambda t, x: np.zeros_like(x) + 1.0)
        obs_x = make_observables(coupled)["x"]
        cs = correlation_empirical(coupled, obs_x, const, n_max=16,
                                   n_orbits=4, length=2048, seed=0)
        assert float(np.max(cs.C)) == pytest.approx(0.0, abs=1e-12)

    def test_lag_zero_is_absolute_covariance(self, coupled, small_density):
        grid, U, est = small_density
        obs = make_observables(coupled)
        cs = correlation_operator(U, est, obs["x"], obs["x"], n_max=4)
        tt, xx = grid.centers()
        a = obs["x"](tt, xx)
        m = float(est.rho @ a)
        cov = float(est.rho @ (a * a)) - m * m
        assert cs.C[0] == pytest.approx(abs(cov), rel=1e-12)
        assert cs.C[0] >= 0.0

    def test_noise_floor_censors_not_zeroes(self, coupled):
        obs_x = make_observables(coupled)["x"]
        cs = correlation_empirical(coupled, obs_x, obs_x, n_max=64,
                                   n_orbits=8, length=8192, seed=0,
                                   fit_window=(5, 40))
        assert cs.censored.dtype == bool
        assert cs.censored[10:].any()
        # censored lags keep their measured values
        assert np.all(cs.C[cs.censored] >= 0.0)

    def test_methods_agree_at_short_lag(self, coupled, small_density):
        grid, U, est = small_density
        obs_x = make_observables(coupled)["x"]
        emp = correlation_empirical(coupled, obs_x, obs_x, n_max=16,
                                    n_orbits=8, length=8192, seed=0,
                                    fit_window=(5, 16))
        op = correlation_operator(U, est, obs_x, obs_x, n_max=16,
                                  fit_window=(5, 16))
        # same order of magnitude at lag 10 (frozen seeds)
        assert 0.3 < emp.C[10] / op.C[10] < 3.0

    def test_operator_decay_is_steep_at_smoke_scale(self, coupled,
                                                    small_density):
        grid, U, est = small_density
        obs_x = make_observables(coupled)["x"]
        op = correlation_operator(U, est, obs_x, obs_x, n_max=64,
                                  fit_window=(5, 40))
        assert op.power_exponent > 2.0

    def test_lag_budget_guard(self, coupled):
        obs_x = make_observables(coupled)["x"]
        with pytest.raises(ConfigurationError):
            correlation_empirical(coupled, obs_x, obs_x, n_max=600,
                                  n_orbits=2, length=2048)


class TestClt:
    def test_normalized_sums_look_normal(self, coupled):
        obs_x = make_observables(coupled)["x"]
        rep = clt_test(coupled, obs_x, n=256, ensemble_size=2000, seed=0)
        assert rep.ks_stat < 0.05
        assert rep.var_r2 > 0.95
        assert not rep.coboundary_suspect
        assert rep.sigma is not None and rep.sigma > 0
        assert abs(rep.mean) < 0.05

    def test_density_started_ensemble(self, coupled, small_density):
        grid, _, est = small_density
        obs_x = make_observables(coupled)["x"]
        rep = clt_test(coupled, obs_x, n=256, ensemble_size=2000, seed=0,
                       density=est, grid=grid)
        assert rep.ks_stat < 0.05
        assert not rep.coboundary_suspect

    def test_constant_observable_withholds_sigma(self, coupled):
        const = Observable("const", 0.0, lambda t, x: np.ones_like(x))
        rep = clt_test(coupled, const, n=64, ensemble_size=500, seed=0)
        assert rep.coboundary_suspect
        assert rep.sigma is None


class TestSampling:
    def test_point_mass_stays_in_cell(self, coupled):
        g = GridSpec.for_map(coupled, n_theta=8, n_x=8)
        rho = np.zeros(g.n_cells)
        rho[27] = 1.0
        est = DensityEstimate(rho=rho, residual=0.0, converged=True,
                              iterations=0, rayleigh2=0.0,
                              grid_fingerprint=g.fingerprint())
        theta, x = sample_from_density(est, g, 500, seed=3)
        assert np.all(g.cell_index(theta, x) == 27)

    def test_draws_are_deterministic(self, coupled, small_density):
        grid, _, est = small_density
        t1, x1 = sample_from_density(est, grid, 100, seed=9)
        t2, x2 = sample_from_density(est, grid, 100, seed=9)
        assert np.array_equal(t1, t2) and np.array_equal(x1, x2)
