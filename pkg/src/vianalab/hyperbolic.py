"""Hyperbolic-time detection and the coverage and budget audits built on it.

A time n is hyperbolic for contraction factor sigma_tilde when every suffix
window ending at n contracts the inverse derivative at rate sigma_tilde or
better.  Writing S for the prefix sums of log(1/|h'|) - log(sigma_tilde),
the condition is S_n <= min(S_0..S_{n-1}), so detection is a single
prefix-minimum scan; the quadratic reference implementation lives with the
acceptance tests, not here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .maps import TWO_PI, DerivedConstants, FiberMap
from .orbits import BaseStream, Orbit, ReturnStructure, deep_depth_threshold


def pliss_times(logd_inv: np.ndarray, log_sigma_tilde: float) -> np.ndarray:
    """Times n with sum(logd_inv[k:n]) <= (n-k) log_sigma_tilde for all k < n.

    Ties at the boundary count as hyperbolic (non-strict inequality).
    Returns the sorted times as 1-based integers.
    """
    if log_sigma_tilde >= 0:
        raise ConfigurationError("log sigma_tilde must be negative")
    a = np.asarray(logd_inv, dtype=float) - log_sigma_tilde
    s = np.concatenate(([0.0], np.cumsum(a)))
    prior_min = np.minimum.accumulate(s[:-1])
    return np.flatnonzero(s[1:] <= prior_min) + 1


def pliss_times_matrix(logd_inv: np.ndarray, log_sigma_tilde: float) -> np.ndarray:
    """Row-wise hyperbolic-time mask for an ensemble.

    Input is (samples, n); output is a boolean (samples, n) array whose
    column j flags time j+1.
    """
    if log_sigma_tilde >= 0:
        raise ConfigurationError("log sigma_tilde must be negative")
    a = np.asarray(logd_inv, dtype=float) - log_sigma_tilde
    s = np.concatenate((np.zeros((a.shape[0], 1)), np.cumsum(a, axis=1)), axis=1)
    prior_min = np.minimum.accumulate(s[:, :-1], axis=1)
    return s[:, 1:] <= prior_min


@dataclass(frozen=True)
class HyperbolicRecord:
    """Hyperbolic times of one orbit with the anchored first times.

    ``first_time`` is the first hyperbolic time at or after the anchor p;
    ``first_return`` the first strictly after p that is also a return
    situation.  Either is None when absent within the orbit.
    """

    times: np.ndarray
    first_time: int | None
    first_return: int | None
    density: float
    p: int


def classify(orbit: Orbit, p: int, dc: DerivedConstants) -> HyperbolicRecord:
    """Detect hyperbolic times and the anchored first time / first return."""
    if p < 1:
        raise ConfigurationError("anchor p must be >= 1")
    times = pliss_times(-orbit.logd, math.log(dc.sigma_tilde))
    n = len(orbit)
    rs = ReturnStructure.from_orbit(orbit, dc)
    situations = set(rs.situations.tolist())
    first_time = None
    for t in times:
        if t >= p:
            first_time = int(t)
            break
    first_return = None
    for t in times:
        if t > p and t < n and int(t) in situations:
            first_return = int(t)
            break
    return HyperbolicRecord(times=times, first_time=first_time,
                            first_return=first_return,
                            density=len(times) / n, p=p)


def remark_budget_check(orbit: Orbit, n: int, dc: DerivedConstants) -> dict:
    """Deep-return budget at a hyperbolic time.

    Hyperbolic times cannot afford many deep returns: over every suffix
    window [k, n) the deep depths must stay within (c+eps)(n-k)/(D-1).
    Returns the worst residual over k; inapplicable when n is not a
    hyperbolic time of the orbit.
    """
    times = pliss_times(-orbit.logd, math.log(dc.sigma_tilde))
    if n not in set(times.tolist()):
        return {"applicable": False, "residual": None, "ok": None}
    rs = ReturnStructure.from_orbit(orbit, dc)
    beta = (dc.c + dc.epsilon) / (dc.D - 1)
    deep = rs.deep[rs.deep < n]
    depths = orbit.r[deep].astype(float)
    worst = -beta * n  # k = 0 with empty window sum
    for k in range(n):
        tail = float(np.sum(depths[deep >= k])) if len(deep) else 0.0
        worst = max(worst, tail - beta * (n - k))
    return {"applicable": True, "residual": worst, "ok": worst <= 0.0}


@dataclass(frozen=True)
class HyperbolicEnsemble:
    """Vectorized ensemble sweep with everything the orbit audits consume."""

    n: int
    p: int
    times_mask: np.ndarray      # (samples, n) bool, column j = time j+1
    first_time: np.ndarray      # (samples,) int, -1 when absent
    first_return: np.ndarray    # (samples,) int, -1 when absent
    density: np.ndarray         # (samples,)
    in_B1: np.ndarray
    in_B2: np.ndarray
    remark_checks: int
    remark_violations: int
    remark_worst: float


def hyperbolic_ensemble(fm: FiberMap, dc: DerivedConstants, p: int, n: int,
                        n_samples: int, seed: int = 0) -> HyperbolicEnsemble:
    """Simulate an ensemble and run every hyperbolic-time audit on it.

    One pass stores the (samples, n) log-derivative and depth matrices,
    detects hyperbolic times row-wise, thins return situations under the
    binding-window rule, audits the deep-return budget at every detected
    hyperbolic time, and evaluates exceptional membership at time n.
    """
    if n < p:
        raise ConfigurationError("need n >= p")
    params = fm.params
    rng = np.random.default_rng(seed)
    base = BaseStream(params.d, n_samples, seed + 1)
    if fm.is_circle:
        x = rng.random(n_samples)
    else:
        x = rng.uniform(fm.x_lo, fm.x_hi, n_samples)
    theta = base.theta

    logd = np.empty((n_samples, n))
    rmat = np.zeros((n_samples, n), dtype=np.int64)
    deep_depth = np.zeros((n_samples, n), dtype=np.int64)
    situation_mask = np.zeros((n_samples, n), dtype=bool)
    next_allowed = np.zeros(n_samples, dtype=np.int64)
    min_dist_tail = np.full(n_samples, np.inf)
    deep_min = deep_depth_threshold(dc)
    N = max(1, dc.N_alpha)

    for i in range(n):
        dist = np.abs(x - params.x_tilde)
        if params.is_odd:
            dist = np.minimum(dist, 1.0 - dist)
        r_i = np.zeros(n_samples, dtype=np.int64)
        inside = (dist <= params.critical_radius) & (dist > 0.0)
        if inside.any():
            r_i[inside] = np.floor(np.log(
                params.critical_radius / dist[inside])).astype(np.int64) + 1
        rmat[:, i] = r_i
        situation = (r_i >= 1) & (i >= next_allowed)
        next_allowed[situation] = i + N
        situation_mask[:, i] = situation
        deep_now = situation & (r_i >= deep_min)
        deep_depth[deep_now, i] = r_i[deep_now]
        if i >= 1:
            np.minimum(min_dist_tail, dist, out=min_dist_tail)

        dv = np.abs(np.asarray(fm.deriv(x), dtype=float))
        dv[dv == 0.0] = np.finfo(float).tiny
        logd[:, i] = np.log(dv)
        xn = params.alpha * np.sin(TWO_PI * theta) + np.asarray(fm.value(x))
        x = np.mod(xn, 1.0) if fm.is_circle else np.clip(xn, fm.x_lo, fm.x_hi)
        theta = base.step()

    times_mask = pliss_times_matrix(-logd, math.log(dc.sigma_tilde))

    # anchored firsts; column t-1 holds time t
    def first_true(mask):
        any_row = mask.any(axis=1)
        idx = np.argmax(mask, axis=1) + 1
        return np.where(any_row, idx, -1)

    anchored = times_mask.copy()
    anchored[:, : p - 1] = False
    first_time = first_true(anchored)
    # a hyperbolic return pairs time t with a return situation at state
    # index t; the final state is out of range, so time n never qualifies
    return_times = np.zeros_like(anchored)
    return_times[:, :-1] = anchored[:, :-1] & situation_mask[:, 1:]
    return_times[:, :p] = False               # strictly after p
    first_return = first_true(return_times)

    density = times_mask.mean(axis=1)

    # deep-return budget at every hyperbolic time, via prefix maxima:
    # residual(t) = max_{k<t} [C_k + beta k] - C_t - beta t, where C_k is
    # the suffix sum of deep depths from step k on.
    beta = (dc.c + dc.epsilon) / (dc.D - 1)
    csum = np.cumsum(deep_depth[:, ::-1], axis=1)[:, ::-1].astype(float)
    C = np.concatenate((csum, np.zeros((n_samples, 1))), axis=1)
    karr = np.arange(n + 1, dtype=float)
    prefmax = np.maximum.accumulate(C + beta * karr, axis=1)
    t_arr = np.arange(1, n + 1, dtype=float)
    residual = prefmax[:, :-1] - C[:, 1:] - beta * t_arr
    audited = residual[times_mask]
    remark_checks = int(times_mask.sum())
    remark_violations = int(np.sum(audited > 1e-12))
    remark_worst = float(audited.max()) if remark_checks else -np.inf

    radius = dc.critical_radius * math.exp(-math.floor(n ** (1.0 / dc.D)))
    in_b2 = min_dist_tail < radius
    deep_total = deep_depth.sum(axis=1)
    in_b1 = ~in_b2 & (deep_total >= dc.c * n)

    return HyperbolicEnsemble(
        n=n, p=p, times_mask=times_mask, first_time=first_time,
        first_return=first_return, density=density,
        in_B1=in_b1, in_B2=in_b2, remark_checks=remark_checks,
        remark_violations=remark_violations, remark_worst=remark_worst)


def coverage_check(ensemble: HyperbolicEnsemble, n: int, p: int,
                   dc: DerivedConstants) -> dict:
    """Fraction of non-exceptional samples first hyperbolic at time in [p, n].

    Also reports the smallest n0 that would achieve full coverage on this
    ensemble (max anchored first time over the non-exceptional samples),
    or -1 if some such sample has no hyperbolic time at all.
    """
    if p != ensemble.p:
        raise ConfigurationError("ensemble was anchored at a different p")
    if n > ensemble.n:
        raise ConfigurationError("coverage horizon exceeds ensemble length")
    keep = ~(ensemble.in_B1 | ensemble.in_B2)
    total = int(keep.sum())
    if total == 0:
        return {"coverage": float("nan"), "n0": -1, "non_exceptional": 0,
                "excluded_fraction": 1.0}
    ft = ensemble.first_time[keep]
    covered = (ft >= p) & (ft <= n)
    n0 = int(ft.max()) if np.all(ft > 0) else -1
    return {
        "coverage": float(np.mean(covered)),
        "n0": n0,
        "non_exceptional": total,
        "excluded_fraction": 1.0 - total / len(ensemble.first_time),
    }


def density_across_seeds(fm: FiberMap, dc: DerivedConstants, p: int, n: int,
                         n_samples: int, seeds: tuple[int, ...]) -> dict:
    """Ensemble hyperbolic-time density for each seed, with the overall min."""
    out = {}
    for s in seeds:
        ens = hyperbolic_ensemble(fm, dc, p, n, n_samples, seed=s)
        out[int(s)] = float(np.mean(ens.density))
    return {"per_seed": out, "min": min(out.values()), "max": max(out.values())}
