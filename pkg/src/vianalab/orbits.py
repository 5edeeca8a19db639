"""Orbit generation, return-depth bookkeeping, and quantitative orbit audits.

The fiber coordinate iterates in ordinary floats.  The base coordinate does
not: theta -> d*theta mod 1 applied to floats reaches the fixed point 0 in
about 53/log2(d) steps, because every float is a dyadic rational whose digits
the map shifts away.  ``BaseStream`` therefore simulates the base orbit by
its symbolic digits: a seeded generator supplies iid base-d digits, theta_i
is read off a rolling window of them, and the step relation theta_{i+1} =
frac(d*theta_i) holds to about 2^-52.  This reproduces the statistics of
Lebesgue-typical base orbits, which is what every estimate here quantifies
over.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, CriticalHitError
from .maps import TWO_PI, DerivedConstants, FiberMap, MapParams

# Sentinel depth reported exactly at the critical point.
INFINITE_DEPTH = 2**31 - 1


class PhasePoint(NamedTuple):
    theta: float
    x: float


def params_fingerprint(params: MapParams) -> str:
    """Short stable hash of the map parameters, stamped into artifacts."""
    items = sorted(vars(params).items()) if hasattr(params, "__dict__") else [
        (f, getattr(params, f)) for f in params.__dataclass_fields__
    ]
    blob = repr(items).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class BaseStream:
    """Digit-exact simulation of theta -> d*theta mod 1 for an ensemble.

    theta_i is represented by the integer formed from the next K base-d
    digits, K chosen so d^K >= 2^53; stepping shifts one fresh digit in.
    Identical seeds replay identical streams.
    """

    def __init__(self, d: int, size: int, seed: int, theta0=None):
        self.d = int(d)
        self.size = int(size)
        self.K = max(2, math.ceil(53.0 / math.log2(self.d)))
        self._mod = self.d ** (self.K - 1)
        self._den = float(self.d ** self.K)
        self.rng = np.random.default_rng(seed)
        if theta0 is None:
            self.M = self.rng.integers(0, self.d ** self.K, size=self.size,
                                       dtype=np.uint64)
        else:
            t0 = np.mod(np.asarray(theta0, dtype=float), 1.0)
            t0 = np.broadcast_to(t0, (self.size,))
            self.M = (t0 * self._den).astype(np.uint64)

    @property
    def theta(self) -> np.ndarray:
        return self.M.astype(np.float64) / self._den

    def step(self) -> np.ndarray:
        """Advance one step and return the new theta array."""
        digit = self.rng.integers(0, self.d, size=self.size, dtype=np.uint64)
        self.M = (self.M % self._mod) * np.uint64(self.d) + digit
        return self.theta


@dataclass(frozen=True)
class Orbit:
    """A finite orbit segment with its fiber log-derivatives and depths.

    ``theta``/``x`` hold n+1 points; ``logd`` and ``r`` hold the n values
    log|h'(x_i)| and the annulus depth of x_i for i = 0..n-1.
    """

    theta: np.ndarray
    x: np.ndarray
    logd: np.ndarray
    r: np.ndarray
    seed: int
    fingerprint: str

    def __len__(self) -> int:
        return len(self.logd)

    def replay_check(self, fm: FiberMap, tol: float = 1e-12) -> float:
        """Max step defect |point_{i+1} - phi(point_i)| over the orbit."""
        worst = 0.0
        for i in range(len(self.logd)):
            th_next = (fm.params.d * self.theta[i]) % 1.0
            dth = abs(th_next - self.theta[i + 1])
            dth = min(dth, 1.0 - dth)
            x_next = fm.params.alpha * math.sin(TWO_PI * self.theta[i]) \
                + float(fm.value(self.x[i]))
            dx = abs(x_next - self.x[i + 1])
            if fm.is_circle:
                dx = min(dx % 1.0, 1.0 - dx % 1.0)
            worst = max(worst, dth, dx)
        if worst > tol:
            raise ConfigurationError(
                f"orbit replay defect {worst:.3e} exceeds {tol:.1e}")
        return worst


def return_index(x: float, params: MapParams) -> int:
    """Depth |r| of the annulus around the critical point containing x.

    Annuli are half-open in distance, (ra e^{-r}, ra e^{-(r-1)}] for depth
    r >= 1 with ra = alpha^{1/D}; distance exactly ra has depth 1, anything
    farther has depth 0.  The critical point itself gets INFINITE_DEPTH.
    """
    dist = abs(float(x) - params.x_tilde)
    if params.is_odd:
        dist = min(dist, 1.0 - dist)
    if dist == 0.0:
        return INFINITE_DEPTH
    ra = params.critical_radius
    if dist > ra:
        return 0
    return max(0, math.floor(math.log(ra / dist)) + 1)


def return_indices(xs: np.ndarray, params: MapParams) -> np.ndarray:
    """Vectorized ``return_index``."""
    dist = np.abs(np.asarray(xs, dtype=float) - params.x_tilde)
    if params.is_odd:
        dist = np.minimum(dist, 1.0 - dist)
    ra = params.critical_radius
    out = np.zeros(dist.shape, dtype=np.int64)
    hit = dist == 0.0
    inside = (dist <= ra) & ~hit
    with np.errstate(divide="ignore"):
        out[inside] = np.floor(np.log(ra / dist[inside])).astype(np.int64) + 1
    out[hit] = INFINITE_DEPTH
    np.maximum(out, 0, out=out)
    return out


def signed_return_index(x: float, params: MapParams) -> int:
    """Like ``return_index`` but negative on the left of the critical point."""
    k = return_index(x, params)
    if k == 0 or k == INFINITE_DEPTH:
        return k
    delta = float(x) - params.x_tilde
    if params.is_odd and abs(delta) > 0.5:
        delta = -math.copysign(1.0, delta) * (1.0 - abs(delta))
    return k if delta > 0 else -k


def iterate_orbit(start: PhasePoint, n: int, fm: FiberMap,
                  seed: int = 0) -> Orbit:
    """Iterate the skew product n steps from ``start``.

    The base follows a :class:`BaseStream` seeded with ``seed`` and started
    at ``start.theta``; replay with the same arguments is bit-identical.
    Landing exactly on the critical point raises
    :class:`~vianalab.errors.CriticalHitError`; callers that want to
    continue perturb by one ulp and record the event.
    """
    if n < 1:
        raise ConfigurationError("orbit length must be >= 1")
    params = fm.params
    if float(start.x) == params.x_tilde:
        raise CriticalHitError("start lies exactly on the critical point")
    base = BaseStream(params.d, 1, seed, theta0=start.theta)
    theta = np.empty(n + 1)
    x = np.empty(n + 1)
    logd = np.empty(n)
    r = np.empty(n, dtype=np.int64)
    theta[0] = base.theta[0]
    x[0] = float(start.x)
    for i in range(n):
        xi = x[i]
        if xi == params.x_tilde:
            raise CriticalHitError(f"orbit hit the critical point at step {i}")
        logd[i] = math.log(abs(float(fm.deriv(xi))))
        r[i] = return_index(xi, params)
        xn = params.alpha * math.sin(TWO_PI * theta[i]) + float(fm.value(xi))
        if fm.is_circle:
            xn %= 1.0
        else:
            xn = min(max(xn, fm.x_lo), fm.x_hi)
        theta[i + 1] = base.step()[0]
        x[i + 1] = xn
    return Orbit(theta=theta, x=x, logd=logd, r=r, seed=seed,
                 fingerprint=params_fingerprint(params))


def deep_depth_threshold(dc: DerivedConstants) -> int:
    """Minimum depth for a return to count toward the deep-return sums."""
    return max(1, dc.r_delta)


@dataclass(frozen=True)
class ReturnStructure:
    """Return situations of an orbit under the binding-window convention.

    A raw return is any step inside an annulus.  Return situations thin the
    raw returns recursively: after a situation at v the next one is the
    first raw return at least N_alpha steps later, so consecutive situations
    are >= N_alpha apart by construction.  Deep situations additionally meet
    the depth threshold and carry the sums entering the expansion estimates.
    """

    situations: np.ndarray
    deep: np.ndarray
    depths: np.ndarray
    N_alpha: int
    deep_min: int

    @classmethod
    def from_orbit(cls, orbit: Orbit, dc: DerivedConstants) -> "ReturnStructure":
        return cls.from_depths(orbit.r, dc)

    @classmethod
    def from_depths(cls, r: np.ndarray, dc: DerivedConstants) -> "ReturnStructure":
        N = max(1, dc.N_alpha)
        deep_min = deep_depth_threshold(dc)
        raw = np.flatnonzero(r >= 1)
        keep = []
        next_allowed = 0
        for v in raw:
            if v >= next_allowed:
                keep.append(int(v))
                next_allowed = v + N
        situations = np.asarray(keep, dtype=np.int64)
        depths = r[situations] if len(situations) else np.empty(0, np.int64)
        deep = situations[depths >= deep_min] if len(situations) else situations
        return cls(situations=situations, deep=deep, depths=depths,
                   N_alpha=N, deep_min=deep_min)

    def deep_sum(self, n: int, r: np.ndarray) -> int:
        """Sum of depths over deep situations before step n."""
        sel = self.deep[self.deep < n]
        return int(np.sum(r[sel])) if len(sel) else 0

    def count(self, n: int) -> int:
        return int(np.sum(self.situations < n))


def derivative_lower_bound_check(orbit: Orbit, n: int,
                                 dc: DerivedConstants) -> dict:
    """Audit the expansion lower bound at a return situation.

    Requires n itself to be a return situation (the hypothesis the bound is
    derived under); otherwise reports inapplicable without judgment.
    Residual is sum(logd) - [(D+2)c n - (D-1) * deep depth sum].
    """
    if n < 1:
        raise ConfigurationError("window length must be >= 1")
    if n >= len(orbit.r):
        raise ConfigurationError("orbit too short: need r at step n")
    rs = ReturnStructure.from_orbit(orbit, dc)
    if n not in set(rs.situations.tolist()):
        return {"applicable": False, "residual": None, "ok": None}
    D = dc.D
    bound = (D + 2) * dc.c * n - (D - 1) * rs.deep_sum(n, orbit.r)
    residual = float(np.sum(orbit.logd[:n])) - bound
    return {"applicable": True, "residual": residual, "ok": residual >= 0.0}


def comparison_bound_check(orbit_a: Orbit, orbit_b: Orbit, n: int,
                           dc: DerivedConstants) -> dict:
    """Audit the paired-orbit expansion bound under depth domination.

    Hypothesis: depth_a[j] <= depth_b[j] + 4 for j = 0..n-1.  When it fails
    the violating indices are listed and no judgment is made.  Otherwise the
    log-residual of sum(logd_a) against (D+1)c n - (D-1) * deep sum of the
    dominating orbit is returned.
    """
    if n < 1 or n > min(len(orbit_a), len(orbit_b)):
        raise ConfigurationError("window exceeds orbit length")
    ra, rb = orbit_a.r[:n], orbit_b.r[:n]
    bad = np.flatnonzero(ra > rb + 4)
    if len(bad):
        return {"applicable": False, "violations": bad.tolist(),
                "residual": None, "ok": None}
    rs_b = ReturnStructure.from_orbit(orbit_b, dc)
    D = dc.D
    bound = (D + 1) * dc.c * n - (D - 1) * rs_b.deep_sum(n, orbit_b.r)
    residual = float(np.sum(orbit_a.logd[:n])) - bound
    return {"applicable": True, "violations": [], "residual": residual,
            "ok": residual >= 0.0}


def exceptional_membership(orbit: Orbit, n: int, dc: DerivedConstants) -> dict:
    """Membership of the orbit's start in the two exceptional sets at time n.

    Deep-approach set: some 1 <= j < n has |x_j - x_tilde| below
    ra * e^{-floor(n^{1/D})}.  Heavy-return set, tested only outside the
    first: deep situation depths before n sum to at least c n.
    """
    if n < 1 or n > len(orbit):
        raise ConfigurationError("window exceeds orbit length")
    radius = dc.critical_radius * math.exp(-math.floor(n ** (1.0 / dc.D)))
    x_t = 0.5 if dc.D % 2 == 1 else 0.0
    dist = np.abs(orbit.x[1:n] - x_t)
    if dc.D % 2 == 1:
        dist = np.minimum(dist, 1.0 - dist)
    in_b2 = bool(np.any(dist < radius))
    if in_b2:
        return {"in_B1": False, "in_B2": True}
    rs = ReturnStructure.from_orbit(orbit, dc)
    in_b1 = rs.deep_sum(n, orbit.r) >= dc.c * n
    return {"in_B1": bool(in_b1), "in_B2": False}


def truncated_log_distance(dist: np.ndarray, delta: float) -> np.ndarray:
    """-log of the delta-truncated distance.

    The truncated distance equals the true distance up to and including
    delta and is 1 beyond it, so the contribution is 0 strictly past delta.
    """
    dist = np.asarray(dist, dtype=float)
    out = np.zeros(dist.shape)
    close = dist <= delta
    out[close] = -np.log(dist[close])
    return out


def nue_and_slow_approx(orbit: Orbit, n: int, dc: DerivedConstants,
                        gamma_budget: float | None = None) -> dict:
    """Nonuniform-expansion and slow-approximation sums for one orbit.

    Inapplicable when the start is exceptional at time n.  The inverse
    derivative norm along the fiber is 1/|h'(x)| exactly, so the expansion
    sum is minus the accumulated logd.  The approximation sum uses the
    distance truncated at delta_dist; the budget defaults to the
    Pliss-margin constant times n.
    """
    memb = exceptional_membership(orbit, n, dc)
    if memb["in_B1"] or memb["in_B2"]:
        return {"applicable": False, "nue_sum": None, "approx_sum": None,
                "pass": None}
    gamma = dc.gamma_pliss if gamma_budget is None else gamma_budget
    nue_sum = -float(np.sum(orbit.logd[:n]))
    x_t = 0.5 if dc.D % 2 == 1 else 0.0
    dist = np.abs(orbit.x[:n] - x_t)
    if dc.D % 2 == 1:
        dist = np.minimum(dist, 1.0 - dist)
    approx_sum = float(np.sum(truncated_log_distance(dist, dc.delta_dist)))
    ok = (nue_sum <= -dc.c * n) and (approx_sum <= gamma * n)
    return {"applicable": True, "nue_sum": nue_sum, "approx_sum": approx_sum,
            "pass": bool(ok)}


@dataclass(frozen=True)
class EnsembleTracker:
    """Per-sample running sums produced by a vectorized ensemble sweep."""

    n: int
    cum_logd: np.ndarray
    deep_sum: np.ndarray
    situation_count: np.ndarray
    min_dist_tail: np.ndarray  # min over steps 1..n-1 of distance to x_tilde
    checkpoints: dict = field(default_factory=dict)


def sweep_ensemble(fm: FiberMap, dc: DerivedConstants, n: int,
                   n_samples: int, seed: int = 0,
                   checkpoints: tuple[int, ...] = (),
                   audit_eq8: bool = False) -> EnsembleTracker:
    """One vectorized pass of n steps over an ensemble of random starts.

    Tracks the quantities the downstream audits need: cumulative fiber
    log-derivative, deep situation depth sums under the binding-window
    thinning, situation counts, and the running minimum distance to the
    critical point over steps >= 1.  At each checkpoint m the exceptional
    masks and (optionally) expansion-bound residuals are snapshotted.

    With ``audit_eq8`` the expansion lower bound and the situation-count
    cap s <= m/N + 1 are checked at every return situation of every sample;
    violation counts land in ``checkpoints['eq8']``.
    """
    params = fm.params
    rng = np.random.default_rng(seed)
    base = BaseStream(params.d, n_samples, seed + 1)
    if fm.is_circle:
        x = rng.random(n_samples)
    else:
        x = rng.uniform(fm.x_lo, fm.x_hi, n_samples)
    theta = base.theta

    cum_logd = np.zeros(n_samples)
    deep_sum = np.zeros(n_samples, dtype=np.int64)
    situation_count = np.zeros(n_samples, dtype=np.int64)
    next_allowed = np.zeros(n_samples, dtype=np.int64)
    min_dist_tail = np.full(n_samples, np.inf)
    eq8_checks = 0
    eq8_violations = 0
    eq8_worst = np.inf
    s_cap_violations = 0
    N = max(1, dc.N_alpha)
    deep_min = deep_depth_threshold(dc)
    D = dc.D
    snaps = {}
    cps = sorted(set(int(m) for m in checkpoints))

    for i in range(n):
        dist = np.abs(x - params.x_tilde)
        if params.is_odd:
            dist = np.minimum(dist, 1.0 - dist)
        r_i = np.zeros(n_samples, dtype=np.int64)
        inside = (dist <= params.critical_radius) & (dist > 0.0)
        if inside.any():
            r_i[inside] = np.floor(
                np.log(params.critical_radius / dist[inside])).astype(np.int64) + 1
            np.maximum(r_i, 0, out=r_i)
        situation = (r_i >= 1) & (i >= next_allowed)
        next_allowed[situation] = i + N
        situation_count[situation] += 1
        deep_now = situation & (r_i >= deep_min)
        deep_sum[deep_now] += r_i[deep_now]

        if audit_eq8 and situation.any() and i >= 1:
            idx = np.flatnonzero(situation)
            bound = (D + 2) * dc.c * i - (D - 1) * deep_sum[idx]
            resid = cum_logd[idx] - bound
            eq8_checks += len(idx)
            eq8_violations += int(np.sum(resid < 0))
            if len(idx):
                eq8_worst = min(eq8_worst, float(resid.min()))
            s_cap_violations += int(
                np.sum(situation_count[idx] > i / N + 1))

        if i >= 1:
            np.minimum(min_dist_tail, dist, out=min_dist_tail)

        # step
        dv = np.abs(np.asarray(fm.deriv(x), dtype=float))
        dv[dv == 0.0] = np.finfo(float).tiny
        cum_logd += np.log(dv)
        xn = params.alpha * np.sin(TWO_PI * theta) + np.asarray(fm.value(x))
        if fm.is_circle:
            x = np.mod(xn, 1.0)
        else:
            x = np.clip(xn, fm.x_lo, fm.x_hi)
        theta = base.step()

        m = i + 1
        if m in cps:
            radius = dc.critical_radius * math.exp(-math.floor(m ** (1.0 / D)))
            in_b2 = min_dist_tail < radius
            in_b1 = ~in_b2 & (deep_sum >= dc.c * m)
            snaps[m] = {
                "frac_B1": float(np.mean(in_b1)),
                "frac_B2": float(np.mean(in_b2)),
                "frac_E": float(np.mean(in_b1 | in_b2)),
                "mean_logd_rate": float(np.mean(cum_logd)) / m,
            }

    if audit_eq8:
        snaps["eq8"] = {"checks": eq8_checks, "violations": eq8_violations,
                        "worst_residual": eq8_worst,
                        "s_cap_violations": s_cap_violations}
    return EnsembleTracker(n=n, cum_logd=cum_logd, deep_sum=deep_sum,
                           situation_count=situation_count,
                           min_dist_tail=min_dist_tail, checkpoints=snaps)


def exceptional_decay_fit(fractions: dict[int, float]) -> dict:
    """Fit K e^{-gamma sqrt(n)} to exceptional-set fractions.

    Zero fractions are dropped from the fit (log-linear least squares in
    sqrt(n)); a fit over fewer than two positive points reports gamma = inf,
    i.e. decay faster than any fitted exponential.
    """
    ns = np.array(sorted(fractions), dtype=float)
    fr = np.array([fractions[int(n)] for n in ns])
    pos = fr > 0
    if pos.sum() < 2:
        return {"K": 0.0, "gamma": np.inf, "r2": 1.0, "n_pos": int(pos.sum())}
    s = np.sqrt(ns[pos])
    y = np.log(fr[pos])
    slope, intercept = np.polyfit(s, y, 1)
    yhat = slope * s + intercept
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"K": float(np.exp(intercept)), "gamma": float(-slope),
            "r2": r2, "n_pos": int(pos.sum())}
