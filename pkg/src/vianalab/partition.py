"""Inductive rectangle partitions for the skew product.

Builds the families R_n / S_n of rectangles omega x J (omega a d-adic
Markov cell of the base, J a fiber interval) by the division cascade:
a candidate rectangle survives at stage n when it contains a point
whose first anchored hyperbolic return is n, and fiber intervals are
cut along preimages of the annular partition around the critical point.
Witness points are found by root finding, not sampling: the n-step
fiber push is evaluated on a fine grid, preimages of the shallow annuli
are bracketed and refined by bisection, and each candidate is validated
by replaying its full orbit through the hyperbolic-time detector.  The
module also verifies the per-rectangle conditions (witness presence,
bounded boundary trajectories, star or subordination structure,
cell-shaped leftovers) and the induced-map estimates (uniform
expansion, image size, bounded distortion) that make the return map
piecewise expanding.

Base arithmetic is exact: a cell at depth n is an integer k, and the
iterates of its left endpoint are reconstructed per step from k*d^j mod
d^n, so roundoff never compounds along the base orbit.  Fiber images
are computed two ways that are kept deliberately separate: the
construction uses pushed point grids (fast, resolution-limited), while
the condition audits recompute every image with exact interval
arithmetic through ``FiberMap.interval_image``.

The full cascade is enormous (d^p first-stage cells, piece counts that
grow with every substep), so the builder enumerates a budgeted,
heaviest-first window into it and reports everything it could not
process as deferred mass; unbiased mass accounting comes from
``open_mass_estimate``, which follows random points through their own
nested rectangles without any budget.

Fiber intervals use closed-left / open-right bookkeeping throughout;
ties at shared endpoints belong to the right interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, ConstructionError, LemmaViolationError
from .hyperbolic import pliss_times_matrix
from .maps import DerivedConstants, FiberMap
from .orbits import params_fingerprint

TWO_PI = 2.0 * math.pi

__all__ = [
    "AdmissibleCurve",
    "DadicInterval",
    "PartitionResult",
    "QInterval",
    "QPartition",
    "Rectangle",
    "ThetaPath",
    "build_partition",
    "choose_p",
    "constant_curve",
    "image_interval",
    "induced_map_checks",
    "markov_cell",
    "open_mass_estimate",
    "pcond_value",
    "push_admissible",
    "random_admissible_curve",
    "verify_conditions",
]


# ---------------------------------------------------------------------------
# Markov cells of the base map


@dataclass(frozen=True)
class DadicInterval:
    """One cell [k/d^n, (k+1)/d^n) of the depth-n Markov partition.

    ``g^n`` maps the cell onto the whole circle and ``g^j`` sends it
    exactly onto another cell, all in integer arithmetic.
    """

    d: int
    depth: int
    k: int

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigurationError("cell depth must be >= 1")
        if not 0 <= self.k < self.d ** self.depth:
            raise ConfigurationError("cell index out of range")

    @property
    def lo(self) -> Fraction:
        return Fraction(self.k, self.d ** self.depth)

    @property
    def hi(self) -> Fraction:
        return Fraction(self.k + 1, self.d ** self.depth)

    @property
    def width(self) -> Fraction:
        return Fraction(1, self.d ** self.depth)

    @property
    def digits(self) -> tuple[int, ...]:
        out = []
        k = self.k
        for _ in range(self.depth):
            k, digit = divmod(k, self.d)
            out.append(digit)
        return tuple(reversed(out))

    def refine(self) -> tuple["DadicInterval", ...]:
        """The d depth-(n+1) children, left to right."""
        base = self.k * self.d
        return tuple(DadicInterval(self.d, self.depth + 1, base + i)
                     for i in range(self.d))

    def g_image(self, j: int) -> "DadicInterval":
        """The cell g^j maps this one onto, exactly."""
        if not 0 <= j < self.depth:
            raise ConfigurationError("iterate must stay below the depth")
        modulus = self.d ** self.depth
        kj = (self.k * self.d ** j) % modulus
        return DadicInterval(self.d, self.depth - j, kj // self.d ** j)

    def contains(self, other: "DadicInterval") -> bool:
        if other.depth < self.depth:
            return False
        shift = self.d ** (other.depth - self.depth)
        return other.k // shift == self.k


def markov_cell(theta: float, n: int, d: int = 16) -> DadicInterval:
    """Depth-n cell containing theta, exact through rational arithmetic."""
    frac = Fraction(theta) % 1
    k = int(frac * d ** n)
    return DadicInterval(d, n, k)


class ThetaPath:
    """Exact base iterates over one cell.

    For a depth-n cell k the j-th image of theta = (k+t)/d^n is
    frac(K_j/d^n + t*d^(j-n)) with K_j = k*d^j mod d^n; every step is a
    fresh float rounding of an exact rational, so the error stays at one
    ulp uniformly in j instead of compounding through repeated mod-1
    multiplication.
    """

    def __init__(self, cell: DadicInterval):
        self.cell = cell
        d, n, k = cell.d, cell.depth, cell.k
        modulus = d ** n
        den = float(modulus)
        base = []
        kj = k % modulus
        for _ in range(n + 1):
            base.append(float(kj) / den)
            kj = (kj * d) % modulus
        self.base = np.array(base)
        self.scale = np.array([float(d) ** (j - n) for j in range(n + 1)])

    def theta(self, j: int, t=0.0):
        """g^j of (k+t)/d^n for offsets t in [0, 1]; vectorized in t."""
        return (self.base[j] + np.asarray(t) * self.scale[j]) % 1.0


# ---------------------------------------------------------------------------
# The annular fiber partition


@dataclass(frozen=True)
class QInterval:
    """One fiber cell [lo, hi).

    ``tag`` is a signed annulus depth for the geometric cells, or one of
    "0+", "0-", "+", "-", "c", "core".  Circle-family endpoints live in
    the lift window [x_tilde - e*ra, 1 + x_tilde - e*ra).
    """

    tag: object
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains_point(self, x: float) -> bool:
        return self.lo <= x < self.hi


class QPartition:
    """The annular partition of the fiber interval or circle.

    Annuli deeper than ``r_cap`` collapse into a residual "core" cell
    around the critical point; its width is 2*ra*exp(-r_cap), invisible
    at double precision mass scales for the default cap, and anything
    landing there is reported as permanently open rather than subdivided.
    """

    def __init__(self, fm: FiberMap, r_cap: int = 25):
        if r_cap < 3:
            raise ConfigurationError("r_cap must be >= 3")
        params = fm.params
        ra = params.critical_radius
        xt = params.x_tilde
        e = math.e
        self.is_circle = fm.is_circle
        self.x_tilde = xt
        self.ra = ra
        self.r_cap = r_cap
        cells: list[QInterval] = []
        if self.is_circle:
            self.domain_lo = xt - e * ra
            self.domain_hi = 1.0 + xt - e * ra
        else:
            self.domain_lo = fm.x_lo
            self.domain_hi = fm.x_hi
            cells.append(QInterval("-", fm.x_lo, xt - e * ra))
        cells.append(QInterval("0-", xt - e * ra, xt - ra))
        for r in range(1, r_cap + 1):
            cells.append(QInterval(-r, xt - ra * e ** (1 - r),
                                   xt - ra * e ** (-r)))
        cells.append(QInterval("core", xt - ra * e ** (-r_cap),
                               xt + ra * e ** (-r_cap)))
        for r in range(r_cap, 0, -1):
            cells.append(QInterval(r, xt + ra * e ** (-r),
                                   xt + ra * e ** (1 - r)))
        cells.append(QInterval("0+", xt + ra, xt + e * ra))
        if self.is_circle:
            cells.append(QInterval("c", xt + e * ra, self.domain_hi))
        else:
            cells.append(QInterval("+", xt + e * ra, fm.x_hi))
        self.cells = cells
        self.index = {c.tag: i for i, c in enumerate(cells)}
        self.boundaries = np.array([c.lo for c in cells] + [cells[-1].hi])

    def cell(self, tag) -> QInterval:
        return self.cells[self.index[tag]]

    def to_domain(self, x: float) -> float:
        """Fold a fiber coordinate into the bookkeeping window."""
        if not self.is_circle:
            return min(max(x, self.domain_lo), self.domain_hi)
        return (x - self.domain_lo) % 1.0 + self.domain_lo

    def locate(self, x: float) -> QInterval:
        """The cell containing x; boundary ties go right."""
        y = self.to_domain(x)
        i = int(np.searchsorted(self.boundaries, y, side="right")) - 1
        i = min(max(i, 0), len(self.cells) - 1)
        return self.cells[i]

    def closure_span(self, tag) -> tuple[float, float]:
        """Endpoints of the cell joined with both neighbors.

        Every such union is contiguous in window coordinates; on the
        circle the wrap cell "c" joins "0+" and "0-" through the seam, so
        spans may extend one period past the window on either side.
        """
        i = self.index[tag]
        n = len(self.cells)
        if self.is_circle:
            lo = self.cells[(i - 1) % n].lo - (1.0 if i == 0 else 0.0)
            hi = self.cells[(i + 1) % n].hi + (1.0 if i == n - 1 else 0.0)
            return lo, hi
        lo = self.cells[max(i - 1, 0)].lo
        hi = self.cells[min(i + 1, n - 1)].hi
        return lo, hi

    def neighbor_tag(self, tag, step: int):
        """Tag of the cell ``step`` positions over, None past an edge."""
        i = self.index[tag] + step
        n = len(self.cells)
        if self.is_circle:
            return self.cells[i % n].tag
        if 0 <= i < n:
            return self.cells[i].tag
        return None

    def tiling_defect(self) -> float:
        """Largest gap or overlap between consecutive cells."""
        worst = 0.0
        for a, b in zip(self.cells, self.cells[1:]):
            worst = max(worst, abs(a.hi - b.lo))
        return worst


def _cell_inside(qp: QPartition, tag, lo: float, hi: float,
                 slack: float = 1e-12) -> bool:
    """Whether the cell fits inside [lo, hi], modulo 1 on the circle."""
    c = qp.cell(tag)
    if qp.is_circle:
        k = math.ceil(lo - c.lo - slack)
        return c.hi + k <= hi + slack
    return lo <= c.lo + slack and c.hi <= hi + slack


def _contained_cells(qp: QPartition, img: tuple[float, float]) -> list:
    """Tags of non-core cells fully inside the image interval."""
    lo, hi = img
    return [c.tag for c in qp.cells
            if c.tag != "core" and _cell_inside(qp, c.tag, lo, hi)]


def _within_closure(qp: QPartition, img: tuple[float, float], tag,
                    slack: float = 1e-9) -> bool:
    lo, hi = qp.closure_span(tag)
    a, b = img
    if qp.is_circle:
        if b - a >= 1.0:
            return False
        base = math.floor(a - lo)
        for k in (base, base + 1):
            if lo - slack <= a - k and b - k <= hi + slack:
                return True
        return False
    return lo - slack <= a and b <= hi + slack


def _boundaries_inside(qp: QPartition, img: tuple[float, float]) -> list:
    """Image-coordinate values of partition boundaries inside the image.

    On the circle one boundary can occur at several integer translates
    when the image winds past a full turn.
    """
    lo, hi = img
    eps = 1e-14
    out = []
    for b in qp.boundaries:
        if qp.is_circle:
            k0 = math.ceil(lo - b + eps)
            k1 = math.floor(hi - b - eps)
            out.extend(float(b + k) for k in range(k0, k1 + 1))
        elif lo + eps < b < hi - eps:
            out.append(float(b))
    return sorted(set(out))


# ---------------------------------------------------------------------------
# Fiber pushes along a base orbit


def _push_points(fm: FiberMap, tp: ThetaPath, x, t: int) -> np.ndarray:
    """t-step fiber push over the cell's left endpoint; lift coordinates
    on the circle so the result is continuous and monotone in x."""
    v = np.array(x, dtype=float, copy=True)
    alpha = fm.params.alpha
    for s in range(t):
        drift = alpha * math.sin(TWO_PI * float(tp.theta(s)))
        if fm.is_circle:
            v = np.asarray(fm.lift(v), dtype=float) + drift
        else:
            v = np.clip(np.asarray(fm.value(v), dtype=float) + drift,
                        fm.x_lo, fm.x_hi)
    return v


def _point_value(fm: FiberMap, tp: ThetaPath, x: float, t: int) -> float:
    return float(_push_points(fm, tp, np.array([x]), t)[0])


def image_interval(fm: FiberMap, tp: ThetaPath, lo: float, hi: float,
                   t: int) -> tuple[float, float]:
    """Exact image of the fiber slice {omega^-} x [lo, hi] after t steps.

    Composes the exact one-step interval image; interval maps return a
    subinterval of the invariant interval, circle maps return lift
    coordinates whose width is capped at one full turn.
    """
    alpha = fm.params.alpha
    a, b = float(lo), float(hi)
    for s in range(t):
        if fm.is_circle and b - a > 1.0:
            b = a + 1.0
        drift = alpha * math.sin(TWO_PI * float(tp.theta(s)))
        a, b = fm.interval_image(a, b)
        a, b = a + drift, b + drift
        if not fm.is_circle:
            a, b = max(a, fm.x_lo), min(b, fm.x_hi)
    return a, b


def _cut_points(fm: FiberMap, tp: ThetaPath, xs: np.ndarray, v: np.ndarray,
                t: int, targets: list, max_cuts: int = 512) -> list:
    """Fiber preimages of target values at substep t.

    Brackets come from sign changes of the pushed grid; each bracket is
    narrowed by vectorized bisection and finished with one secant step.
    Crossing pairs closer than the grid spacing are invisible here; the
    condition audits re-derive every image with interval arithmetic, so
    a missed fold surfaces as an honest audit failure rather than a
    silent misplacement.  Returns (x, target) pairs sorted by x.
    """
    br_a, br_b, br_fa, br_tg = [], [], [], []
    out = []
    for b in targets:
        w = v - b
        sgn = np.sign(w)
        for i in np.flatnonzero(sgn == 0):
            out.append((float(xs[i]), float(b)))
        idx = np.flatnonzero(sgn[:-1] * sgn[1:] < 0)
        for i in idx:
            br_a.append(xs[i])
            br_b.append(xs[i + 1])
            br_fa.append(w[i])
            br_tg.append(b)
    if len(br_a) + len(out) > max_cuts:
        raise ConstructionError(
            f"{len(br_a)} boundary crossings in one piece; the cascade "
            "grid cannot represent this fold structure")
    if br_a:
        a = np.array(br_a)
        b2 = np.array(br_b)
        fa = np.array(br_fa)
        tg = np.array(br_tg)
        for _ in range(14):
            mid = 0.5 * (a + b2)
            fv = _push_points(fm, tp, mid, t) - tg
            left = (fv > 0) == (fa > 0)
            a = np.where(left, mid, a)
            fa = np.where(left, fv, fa)
            b2 = np.where(left, b2, mid)
        fb = _push_points(fm, tp, b2, t) - tg
        denom = np.where(fb == fa, 1.0, fb - fa)
        x = np.clip(a - fa * (b2 - a) / denom, a, b2)
        out.extend((float(xi), float(ti)) for xi, ti in zip(x, tg))
    return sorted(out)


def _hull(xs: np.ndarray, v: np.ndarray, a: float, b: float,
          va: float, vb: float) -> tuple[float, float]:
    """Value hull of the push over [a, b] given exact endpoint values."""
    i = int(np.searchsorted(xs, a, side="right"))
    j = int(np.searchsorted(xs, b, side="left"))
    lo = min(va, vb)
    hi = max(va, vb)
    if j > i:
        seg = v[i:j]
        lo = min(lo, float(seg.min()))
        hi = max(hi, float(seg.max()))
    return lo, hi


# ---------------------------------------------------------------------------
# Witness search against H_n


def _thin_situations(rmat: np.ndarray, n_gap: int) -> np.ndarray:
    """Greedy binding-window thinning of raw annulus depths, row-wise."""
    rows, cols = rmat.shape
    keep = np.zeros((rows, cols), dtype=bool)
    nxt = np.zeros(rows, dtype=np.int64)
    raw = rmat >= 1
    for v in range(cols):
        k = raw[:, v] & (nxt <= v)
        keep[:, v] = k
        nxt[k] = v + n_gap
    return keep


@dataclass
class HitInfo:
    """Outcome of the witness search over one candidate rectangle.

    ``count`` is the number of annulus-preimage candidates the search
    bracketed, hit or miss; (u, x0) is the validated witness sample.
    """

    hit: bool
    count: int
    u: float | None
    x0: float | None
    min_crit_dist: float


def witness_orbit(fm: FiberMap, cell: DadicInterval, u: float, x0: float,
                  m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replay one sample: depths r_0..r_m, log-derivatives, fiber states.

    This scalar replay is the single source of truth for H_n
    membership; the vectorized search routines only propose candidates
    that are confirmed or rejected here.
    """
    tp = ThetaPath(cell)
    params = fm.params
    x = float(x0)
    rs = np.zeros(m + 1, dtype=np.int64)
    logd = np.zeros(m)
    xs = np.zeros(m + 1)
    for t in range(m + 1):
        xs[t] = x % 1.0 if fm.is_circle else x
        dist = abs(xs[t] - params.x_tilde)
        if params.is_odd:
            dist = min(dist, 1.0 - dist)
        if 0.0 < dist <= params.critical_radius:
            rs[t] = math.floor(math.log(params.critical_radius / dist)) + 1
        if t == m:
            break
        theta = float(tp.theta(t, u))
        dv = abs(float(fm.deriv(xs[t])))
        logd[t] = math.log(max(dv, np.finfo(float).tiny))
        xn = params.alpha * math.sin(TWO_PI * theta) + float(fm.value(xs[t]))
        x = xn % 1.0 if fm.is_circle else min(max(xn, fm.x_lo), fm.x_hi)
    return rs, logd, xs


def _replay_first_return(rs: np.ndarray, logd: np.ndarray,
                         dc: DerivedConstants, p: int) -> int:
    """First anchored hyperbolic return of a replayed orbit, -1 if none."""
    times = pliss_times_matrix(-logd[None, :], math.log(dc.sigma_tilde))[0]
    sit = _thin_situations(rs[None, :], max(1, dc.N_alpha))[0]
    for t in range(p, len(logd) + 1):
        if times[t - 1] and sit[t]:
            return t
    return -1


def depth_budget_margin(fm: FiberMap, dc: DerivedConstants,
                        rs: np.ndarray, n: int) -> float:
    """Worst slack in the slow-recurrence budget of a depth sequence.

    Return situations at least as deep as the eta threshold must keep
    their total depth over every window [k, n) within
    (c + eps)(n - k)/(D - 1); shallower entries are exempt because the
    threshold itself caps them.  The return at time n is excluded.
    Nonpositive margin means the budget holds.  Membership in H_n
    carries this budget: the derivative cocycle estimate that grounds
    every distance-versus-time bound downstream is exactly the Pliss
    inequality rewritten through it, so a hyperbolic return whose
    prehistory overspends the budget supports none of the geometry the
    rectangles are built for.
    """
    if n <= 0:
        return 0.0
    D = dc.D
    cap = (1.0 / (D - 1)) * (1.0 / D - 2.0 * dc.eta / (D - 1)) * math.log(
        1.0 / fm.params.alpha)
    r = np.asarray(rs[:n], dtype=float)
    r = np.where((r >= 1.0) & (r >= cap), r, 0.0)
    suffix = np.cumsum(r[::-1])[::-1]
    rate = (dc.c + dc.epsilon) / (D - 1)
    windows = n - np.arange(n, dtype=float)
    return float(np.max(suffix - rate * windows))


def _fold_dist(fm: FiberMap, w) -> np.ndarray:
    """Distance from fiber coordinates to the critical point."""
    w = np.asarray(w, dtype=float)
    if fm.is_circle:
        return np.abs((w - fm.params.x_tilde + 0.5) % 1.0 - 0.5)
    return np.abs(w - fm.params.x_tilde)


def _push_final(fm: FiberMap, tp: ThetaPath, x, t: int) -> np.ndarray:
    """t-step fiber push with per-step folding on the circle.

    Unlike ``_push_points`` this keeps circle states in [0, 1), trading
    the monotone-lift structure for full precision of the final state;
    the witness search only consumes pointwise values, never hulls.
    """
    v = np.array(x, dtype=float, copy=True)
    alpha = fm.params.alpha
    for s in range(t):
        drift = alpha * math.sin(TWO_PI * float(tp.theta(s)))
        v = np.asarray(fm.value(v), dtype=float) + drift
        if fm.is_circle:
            v = np.mod(v, 1.0)
        else:
            v = np.clip(v, fm.x_lo, fm.x_hi)
    return v


def _budget_blocked(fm: FiberMap, dc: DerivedConstants, lo: float,
                    hi: float, m: int) -> bool:
    """True when no point of [lo, hi] can carry an H_m witness.

    A starting point at annulus depth r already spends r of the
    recurrence budget at the k = 0 window, so intervals buried deeper
    than (c + eps) m/(D - 1) cannot return hyperbolically by m.  This
    is exactly the validation's first budget row, decided without
    pushing the interval.
    """
    dmax = float(max(_fold_dist(fm, lo), _fold_dist(fm, hi)))
    ra = fm.params.critical_radius
    if dmax > ra or dmax <= 0.0:
        return False
    r_min = math.floor(math.log(ra / dmax)) + 1
    D = dc.D
    cap = (1.0 / (D - 1)) * (1.0 / D - 2.0 * dc.eta / (D - 1)) * math.log(
        1.0 / fm.params.alpha)
    if r_min < max(cap, 1.0):
        return False
    rate = (dc.c + dc.epsilon) / (D - 1)
    return r_min > rate * m + 1e-9


# preferred n-th-state targets inside the critical ball, shallow first:
# midpoints of the depth-1 and depth-2 annuli and the ball edge itself
_LEVEL_EXPONENTS = (-0.5, -1.5, 0.0)
_U_LINES = (0.5, 0.25, 0.75)


def _bracket_roots(fm: FiberMap, tp: ThetaPath, xs: np.ndarray,
                   w: np.ndarray, m: int, targets: list,
                   cap: int = 96) -> np.ndarray:
    """Preimages of target values under the m-step push, by bisection.

    One root per sign-change bracket per target; an oversupply of
    brackets is thinned evenly across the interval rather than
    truncated at one end.
    """
    br_a, br_b, br_fa, br_tg = [], [], [], []
    for b in targets:
        f = w - b
        sgn = np.sign(f)
        idx = np.flatnonzero(sgn[:-1] * sgn[1:] < 0)
        for i in idx:
            br_a.append(xs[i])
            br_b.append(xs[i + 1])
            br_fa.append(f[i])
            br_tg.append(b)
    if not br_a:
        return np.empty(0)
    a = np.array(br_a)
    b2 = np.array(br_b)
    fa = np.array(br_fa)
    tg = np.array(br_tg)
    if len(a) > cap:
        pick = np.unique(np.linspace(0, len(a) - 1, cap).astype(int))
        a, b2, fa, tg = a[pick], b2[pick], fa[pick], tg[pick]
    for _ in range(18):
        mid = 0.5 * (a + b2)
        fv = _push_final(fm, tp, mid, m) - tg
        left = (fv > 0) == (fa > 0)
        a = np.where(left, mid, a)
        fa = np.where(left, fv, fa)
        b2 = np.where(left, b2, mid)
    return 0.5 * (a + b2)


def _find_witnesses(fm: FiberMap, dc: DerivedConstants, p: int, m: int,
                    tp: ThetaPath, segs: list, grid: int = 32,
                    max_candidates: int = 8) -> list[HitInfo]:
    """Search each fiber interval for a point of H_m over the cell.

    H_m has positive measure but is a union of microscopic strips, the
    m-step preimages of the critical annuli, so membership of a
    rectangle is decided by construction rather than sampling: bracket
    preimages of shallow-annulus midpoints on a ``4*grid + 1`` point
    push of the interval, refine by bisection, and confirm candidates
    with the scalar replay.  A candidate is accepted only when its
    first anchored hyperbolic return is m and its prehistory satisfies
    the slow-recurrence depth budget.  Strips narrower than the grid
    resolution can be missed, which errs on the side of keeping mass
    open; a miss never fabricates a rectangle.
    """
    params = fm.params
    ra = params.critical_radius
    xt = params.x_tilde
    npts = 4 * grid + 1
    out: list[HitInfo] = []
    for lo, hi in segs:
        if hi - lo < 1e-12:
            out.append(HitInfo(False, 0, None, None, math.inf))
            continue
        if _budget_blocked(fm, dc, lo, hi, m):
            out.append(HitInfo(False, 0, None, None, math.inf))
            continue
        xs = np.linspace(lo, hi, npts)
        w = _push_final(fm, tp, xs, m)
        dist = _fold_dist(fm, w)
        inside = np.flatnonzero((dist > 0.0) & (dist <= ra))
        cand_x = [float(xs[i]) for i in inside]
        cand_d = [float(dist[i]) for i in inside]
        ks = (-1, 0, 1) if fm.is_circle else (0,)
        targets = [xt + k + s * ra * math.exp(e)
                   for k in ks for e in _LEVEL_EXPONENTS for s in (1, -1)]
        roots = _bracket_roots(fm, tp, xs, w, m, targets)
        if len(roots):
            rd = _fold_dist(fm, _push_final(fm, tp, roots, m))
            keep = (rd > 0.0) & (rd <= ra)
            cand_x.extend(float(r) for r in roots[keep])
            cand_d.extend(float(r) for r in rd[keep])
        if not cand_x:
            out.append(HitInfo(False, 0, None, None, float(dist.min())))
            continue
        depth = np.floor(np.log(ra / np.array(cand_d))) + 1
        order = np.argsort(depth, kind="stable")[:max_candidates]
        found = None
        tried = 0
        for ci in order:
            for u in _U_LINES:
                rs, logd, states = witness_orbit(
                    fm, tp.cell, u, cand_x[int(ci)], m)
                tried += 1
                if (_replay_first_return(rs, logd, dc, p) == m
                        and depth_budget_margin(fm, dc, rs, m) <= 1e-9):
                    mind = float(_fold_dist(fm, states[:m]).min())
                    found = HitInfo(True, len(cand_x), u,
                                    cand_x[int(ci)], mind)
                    break
                if tried >= 3 * max_candidates:
                    break
            if found or tried >= 3 * max_candidates:
                break
        out.append(found if found is not None
                   else HitInfo(False, len(cand_x), None, None,
                                float(dist.min())))
    return out


def _classify_cells(fm: FiberMap, dc: DerivedConstants, p: int, m: int,
                    items: list, grid: int = 32) -> list[HitInfo]:
    """Witness search over (ThetaPath, j_lo, j_hi) triples.

    Consecutive items sharing a path are searched together.
    """
    results: list[HitInfo] = []
    i = 0
    while i < len(items):
        tp = items[i][0]
        j = i
        segs = []
        while j < len(items) and items[j][0] is tp:
            segs.append((items[j][1], items[j][2]))
            j += 1
        results.extend(_find_witnesses(fm, dc, p, m, tp, segs, grid))
        i = j
    return results


# ---------------------------------------------------------------------------
# Rectangles


@dataclass
class Rectangle:
    """One rectangle omega x J of the construction.

    ``star`` records that some iterate of the left-boundary slice fully
    contains an annular cell; ``star_witness`` is the certifying
    (iterate, tag) pair, always the rectangle's own latest division
    event because earlier events belonged to wider ancestors.  Non-star
    kind-R rectangles and partial-cell kind-S rectangles carry a
    ``subordinate_to`` link (stage, rectangle id, iterate, tag) instead.
    ``hn_witness`` is the (u, x) sample whose first anchored hyperbolic
    return is exactly ``depth``.
    """

    id: int
    omega: DadicInterval
    j_lo: float
    j_hi: float
    depth: int
    kind: str                            # "R" or "S"
    q_tag: object
    star: bool = False
    star_witness: tuple | None = None
    subordinate_to: tuple | None = None
    hn_witness: tuple | None = None
    events: tuple = ()
    terminal: bool = False               # core slivers, never refined
    budget_deferred: bool = False
    parent: int | None = None

    @property
    def j_width(self) -> float:
        return self.j_hi - self.j_lo

    @property
    def mass(self) -> float:
        return float(self.omega.width) * self.j_width


@dataclass
class PartitionResult:
    """Everything build_partition produces, plus mass bookkeeping.

    ``open_mass`` is the fraction of the processed slab still in play
    after the last stage: unrefined S rectangles, budget and cascade
    deferrals, and core slivers.  ``stage_counts`` maps each stage to
    its (new R, new S) rectangle counts.
    """

    p: int
    n_max: int
    d: int
    fingerprint: str
    parents: list
    rectangles: list
    stage_counts: dict
    open_mass: float
    deferred_mass: float
    witness_grid: int
    r_cap: int

    def by_kind(self, kind: str) -> list:
        return [r for r in self.rectangles if r.kind == kind]

    def get(self, rect_id: int) -> Rectangle:
        if not hasattr(self, "_idx"):
            self._idx = {r.id: r for r in self.rectangles}
        return self._idx[rect_id]


# ---------------------------------------------------------------------------
# Anchor feasibility


def pcond_value(dc: DerivedConstants, p: int, beta: float,
                d: int = 16) -> float:
    """Left side of the anchor-time condition; admissible when < 1."""
    rate = dc.D * dc.c - dc.epsilon
    return ((d - dc.alpha) ** (-p) + math.exp(-rate * p)) * (1.0 + 1.0 / beta)


def choose_p(dc: DerivedConstants, beta: float | None = None, d: int = 16,
             p_max: int = 400) -> int:
    """Smallest anchor time satisfying the expansion-vs-cone condition.

    Uses the a-priori cone slope 1/sqrt(1+alpha^2) when no measured
    value is supplied.
    """
    if beta is None:
        beta = 1.0 / math.sqrt(1.0 + dc.alpha ** 2)
    for p in range(1, p_max + 1):
        if pcond_value(dc, p, beta, d) < 1.0:
            return p
    raise ConfigurationError(
        "no anchor time satisfies the expansion condition; the derived "
        "constants leave no admissible p below the search cap")


# ---------------------------------------------------------------------------
# The division cascade


@dataclass
class _Piece:
    lo: float
    hi: float
    tag: object
    events: list
    witness: tuple | None


def _split_piece(fm: FiberMap, qp: QPartition, tp: ThetaPath,
                 pc_lo: float, pc_hi: float, xs: np.ndarray,
                 v: np.ndarray, t: int) -> list:
    """Cut one piece along partition-boundary preimages at substep t.

    Returns joined segments [lo, hi, tag, full]: segments whose own
    image hull fails to contain their cell are merged into the passing
    segment on their left, and a leading run of failures attaches to
    the first passing segment.
    """
    img = (float(v.min()), float(v.max()))
    targets = _boundaries_inside(qp, img)
    cuts = _cut_points(fm, tp, xs, v, t, targets)
    edges = [(pc_lo, float(v[0]))] + cuts + [(pc_hi, float(v[-1]))]
    segs = []
    for (a, va), (b, vb) in zip(edges, edges[1:]):
        if b - a < 1e-13:
            continue
        h_lo, h_hi = _hull(xs, v, a, b, va, vb)
        mid_tag = qp.locate(0.5 * (h_lo + h_hi)).tag
        full = mid_tag != "core" and _cell_inside(
            qp, mid_tag, h_lo, h_hi, 1e-9)
        segs.append([a, b, mid_tag, full])
    joined: list = []
    for seg in segs:
        if seg[3] or not joined:
            joined.append(seg)
        else:
            joined[-1][1] = seg[1]
    while len(joined) >= 2 and not joined[0][3]:
        joined[1][0] = joined[0][0]
        del joined[0]
    return joined


def _develop(fm: FiberMap, dc: DerivedConstants, qp: QPartition,
             cell: DadicInterval, j_lo: float, j_hi: float, tag, m: int,
             p: int, grid: int, seed: HitInfo, cascade_grid: int = 257,
             cascade_cap: int = 96) -> tuple:
    """Run the division cascade for one candidate rectangle.

    Substep t in 1..m-1 cuts every piece whose t-step image fully
    contains some partition cell; freshly cut pieces must re-establish
    an H_m witness or they drop to the complement.  Segments landing in
    the core cell become terminal slivers.  Piece counts grow with the
    substeps, so at most ``cascade_cap`` pieces, widest first, continue
    past each substep; the rest drop to the complement as well, so the
    emitted rectangles always tile the cell.
    Returns (pieces, complement intervals, core slivers).
    """
    tp = ThetaPath(cell)
    home = qp.cell(tag)
    exact = abs(j_lo - home.lo) < 1e-15 and abs(j_hi - home.hi) < 1e-15
    pieces = [_Piece(j_lo, j_hi, tag, [(0, tag)] if exact else [],
                     (seed.u, seed.x0))]
    dropped: list = []
    core_slivers: list = []
    for t in range(1, m):
        if len(pieces) > cascade_cap:
            pieces.sort(key=lambda c: c.hi - c.lo, reverse=True)
            dropped.extend((pc.lo, pc.hi) for pc in pieces[cascade_cap:])
            pieces = pieces[:cascade_cap]
        survivors: list = []
        fresh: list = []
        for pc in pieces:
            xs = np.linspace(pc.lo, pc.hi, cascade_grid)
            v = _push_points(fm, tp, xs, t)
            if not _contained_cells(qp, (float(v.min()), float(v.max()))):
                survivors.append(pc)
                continue
            for a, b, seg_tag, full in _split_piece(
                    fm, qp, tp, pc.lo, pc.hi, xs, v, t):
                if seg_tag == "core":
                    core_slivers.append((a, b))
                    continue
                ev = pc.events + ([(t, seg_tag)] if full else [])
                fresh.append(_Piece(a, b, seg_tag, ev, None))
        if fresh:
            infos = _find_witnesses(
                fm, dc, p, m, tp, [(c.lo, c.hi) for c in fresh], grid)
            for child, info in zip(fresh, infos):
                if info.hit:
                    child.witness = (info.u, info.x0)
                    survivors.append(child)
                else:
                    dropped.append((child.lo, child.hi))
        pieces = sorted(survivors, key=lambda c: c.lo)
    return pieces, dropped, core_slivers


def _merge_components(parts: list) -> list:
    if not parts:
        return []
    parts = sorted(parts)
    out = [list(parts[0])]
    for lo, hi in parts[1:]:
        if lo <= out[-1][1] + 1e-12:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [(a, b) for a, b in out]


def _subordination_witness(fm: FiberMap, qp: QPartition, lo: float,
                           hi: float, host, tp: ThetaPath):
    """Search all iterates j <= host depth for a subordination witness.

    Both image intervals are pushed over the host's left endpoint path.
    Returns (j, tag) such that the tagged cell sits inside the host's
    j-step image and one of its neighbors inside the candidate's, or
    None.
    """
    for j in range(1, host.depth + 1):
        host_img = image_interval(fm, tp, host.j_lo, host.j_hi, j)
        inside = _contained_cells(qp, host_img)
        if not inside:
            continue
        own_img = image_interval(fm, tp, lo, hi, j)
        own = set(_contained_cells(qp, own_img))
        if not own:
            continue
        for tag in inside:
            for step in (1, -1):
                ntag = qp.neighbor_tag(tag, step)
                if ntag is not None and ntag != "core" and ntag in own:
                    return (j, tag)
    return None


def _resolve_subordination(fm: FiberMap, qp: QPartition, comp, stars,
                           inherited, pool=None):
    """Find a star rectangle the interval is subordinate to.

    Same-cascade flanking stars come first: the shared endpoint is
    structural, and every iterate up to the host's depth is searched
    for the two containments with exact interval arithmetic.  Falls
    back to the link inherited from the parent rectangle, re-verified
    against its original host, which the candidate must still touch.
    """
    lo, hi = comp
    for rect, tp in stars:
        if not (abs(rect.j_hi - lo) < 1e-12 or abs(rect.j_lo - hi) < 1e-12):
            continue
        found = _subordination_witness(fm, qp, lo, hi, rect, tp)
        if found is not None:
            return (rect.depth, rect.id, found[0], found[1])
    if inherited is not None and pool is not None:
        host = pool[inherited[1]]
        if abs(host.j_hi - lo) < 1e-12 or abs(host.j_lo - hi) < 1e-12:
            tp = ThetaPath(host.omega)
            found = _subordination_witness(fm, qp, lo, hi, host, tp)
            if found is not None:
                return (host.depth, host.id, found[0], found[1])
    return inherited


# ---------------------------------------------------------------------------
# The builder


def build_partition(fm: FiberMap, dc: DerivedConstants, p: int | None = None,
                    n_max: int | None = None, witness_grid: int = 32,
                    n_parents: int = 2, stage_budget: int = 1024,
                    cascade_cap: int = 96,
                    r_cap: int = 25) -> PartitionResult:
    """Build the rectangle families R_n, S_n for p <= n <= n_max.

    The first stage runs the witness search on every annular cell over
    ``n_parents`` representative depth-p base cells (the full family
    has d^p members, far beyond enumeration) and develops the cascade
    where a witness exists.  Later stages split each live S rectangle
    into its d base children and repeat against H_n.  ``stage_budget``
    caps the child searches per stage; the heaviest rectangles go first
    and the remainder is carried as deferred open mass.
    """
    if witness_grid < 8:
        raise ConfigurationError("witness grid too coarse to be meaningful")
    if p is None:
        p = choose_p(dc, d=fm.params.d)
    if n_max is None:
        n_max = p + 10
    if n_max < p:
        raise ConfigurationError("n_max must be at least p")
    if n_parents < 1:
        raise ConfigurationError("n_parents must be >= 1")
    d = fm.params.d
    qp = QPartition(fm, r_cap)
    total = d ** p
    parents = []
    for i in range(n_parents):
        k = (total * (2 * i + 1)) // (2 * n_parents)
        parents.append(DadicInterval(d, p, max(k, 1)))
    slab = sum(float(c.width) for c in parents) * (
        qp.domain_hi - qp.domain_lo)

    rects: list[Rectangle] = []
    stage_counts: dict = {}
    next_id = [0]

    def emit(**kw) -> Rectangle:
        r = Rectangle(id=next_id[0], **kw)
        next_id[0] += 1
        rects.append(r)
        return r

    def harvest(cell, developed, m, parent_id, inherited):
        pieces, drops, cores = developed
        made_r, made_s = [], []
        for pc in pieces:
            made_r.append(emit(
                omega=cell, j_lo=pc.lo, j_hi=pc.hi, depth=m, kind="R",
                q_tag=pc.tag, star=bool(pc.events),
                star_witness=pc.events[-1] if pc.events else None,
                hn_witness=pc.witness, events=tuple(pc.events),
                subordinate_to=None if pc.events else inherited,
                parent=parent_id))
        tp = ThetaPath(cell)
        stars = [(r, tp) for r in made_r if r.star]
        for r in made_r:
            if not r.star:
                r.subordinate_to = _resolve_subordination(
                    fm, qp, (r.j_lo, r.j_hi), stars, inherited, rects)
        for lo, hi in _merge_components(drops):
            link = _resolve_subordination(fm, qp, (lo, hi), stars,
                                          inherited, rects)
            made_s.append(emit(
                omega=cell, j_lo=lo, j_hi=hi, depth=m, kind="S",
                q_tag=qp.locate(0.5 * (lo + hi)).tag, subordinate_to=link,
                parent=parent_id))
        for lo, hi in _merge_components(cores):
            made_s.append(emit(
                omega=cell, j_lo=lo, j_hi=hi, depth=m, kind="S",
                q_tag="core", terminal=True, parent=parent_id))
        return made_r, made_s

    frontier: list[Rectangle] = []
    for parent in parents:
        tp = ThetaPath(parent)
        cand = [c for c in qp.cells if c.tag != "core"]
        infos = _find_witnesses(fm, dc, p, p,
                                tp, [(c.lo, c.hi) for c in cand],
                                witness_grid)
        for c, info in zip(cand, infos):
            if not info.hit:
                frontier.append(emit(
                    omega=parent, j_lo=c.lo, j_hi=c.hi, depth=p, kind="S",
                    q_tag=c.tag))
                continue
            developed = _develop(
                fm, dc, qp, parent, c.lo, c.hi, c.tag, p, p, witness_grid,
                info, cascade_cap=cascade_cap)
            _, made_s = harvest(parent, developed, p, None, None)
            frontier.extend(s for s in made_s if not s.terminal)
        core = qp.cell("core")
        emit(omega=parent, j_lo=core.lo, j_hi=core.hi, depth=p, kind="S",
             q_tag="core", terminal=True)
    stage_counts[p] = (sum(1 for r in rects if r.kind == "R"),
                       sum(1 for r in rects if r.kind == "S"))

    budget_deferred_mass = 0.0
    for m in range(p + 1, n_max + 1):
        frontier.sort(key=lambda r: (-r.mass, r.omega.k, r.j_lo))
        budget = stage_budget
        process: list[Rectangle] = []
        sleeping: list[Rectangle] = []
        for r in frontier:
            # intervals too deep to return by m sleep without charge;
            # once slept their base cell lags the stage and they stay
            # open for the rest of the enumeration
            if r.omega.depth != m - 1 or _budget_blocked(
                    fm, dc, r.j_lo, r.j_hi, m):
                sleeping.append(r)
                continue
            if budget >= d:
                process.append(r)
                budget -= d
            else:
                r.budget_deferred = True
                budget_deferred_mass += r.mass
        children = [(r, cc) for r in process for cc in r.omega.refine()]
        infos = _classify_cells(
            fm, dc, p, m,
            [(ThetaPath(cc), r.j_lo, r.j_hi) for r, cc in children],
            witness_grid)
        frontier = sleeping
        n_r = n_s = 0
        for (pr, cc), info in zip(children, infos):
            if not info.hit:
                s = emit(omega=cc, j_lo=pr.j_lo, j_hi=pr.j_hi, depth=m,
                         kind="S", q_tag=pr.q_tag,
                         subordinate_to=pr.subordinate_to, parent=pr.id)
                frontier.append(s)
                n_s += 1
                continue
            developed = _develop(
                fm, dc, qp, cc, pr.j_lo, pr.j_hi, pr.q_tag, m, p,
                witness_grid, info, cascade_cap=cascade_cap)
            made_r, made_s = harvest(cc, developed, m, pr.id,
                                     pr.subordinate_to)
            n_r += len(made_r)
            n_s += len(made_s)
            frontier.extend(s for s in made_s if not s.terminal)
        stage_counts[m] = (n_r, n_s)

    open_mass = (sum(r.mass for r in rects if r.kind == "S"
                     and (r.terminal or r.budget_deferred))
                 + sum(r.mass for r in frontier)) / slab
    return PartitionResult(
        p=p, n_max=n_max, d=d, fingerprint=params_fingerprint(fm.params),
        parents=parents, rectangles=rects, stage_counts=stage_counts,
        open_mass=open_mass, deferred_mass=budget_deferred_mass / slab,
        witness_grid=witness_grid, r_cap=r_cap)


# ---------------------------------------------------------------------------
# Monte-Carlo open-mass accounting


def _develop_point(fm: FiberMap, dc: DerivedConstants, qp: QPartition,
                   cell: DadicInterval, lo: float, hi: float, tag,
                   x: float, m: int, p: int, grid: int,
                   cascade_grid: int = 257) -> tuple:
    """Follow one point through its own branch of the division cascade.

    Only the piece containing x is ever cut or re-searched, so the cost
    per stage is substeps, not pieces.  Returns ("captured",) when the
    point survives every substep, ("open", lo, hi, tag) when its piece
    drops to the complement, and ("core",) when it lands in the
    terminal core sliver.
    """
    tp = ThetaPath(cell)
    cur_lo, cur_hi, cur_tag = lo, hi, tag
    for t in range(1, m):
        xs = np.linspace(cur_lo, cur_hi, cascade_grid)
        v = _push_points(fm, tp, xs, t)
        if not _contained_cells(qp, (float(v.min()), float(v.max()))):
            continue
        joined = _split_piece(fm, qp, tp, cur_lo, cur_hi, xs, v, t)
        seg = None
        for a, b, seg_tag, full in joined:
            if a <= x < b:
                seg = (a, b, seg_tag)
                break
        if seg is None:
            a, b, seg_tag, _full = joined[-1]
            seg = (a, b, seg_tag)
        a, b, seg_tag = seg
        if seg_tag == "core":
            return ("core",)
        info = _find_witnesses(fm, dc, p, m, tp, [(a, b)], grid)[0]
        if not info.hit:
            return ("open", a, b, seg_tag)
        cur_lo, cur_hi, cur_tag = a, b, seg_tag
    return ("captured",)


def open_mass_estimate(fm: FiberMap, dc: DerivedConstants, p: int,
                       n_max: int, n_points: int = 400, seed: int = 0,
                       witness_grid: int = 32, r_cap: int = 25) -> dict:
    """Estimate the open-mass curve by following random points' cells.

    Each sample traces the construction path of the nested rectangles
    containing it: same witness search, same cascade, no stage or piece
    budget, so the curve is an unbiased estimate for the untruncated
    construction that the enumerating builder cannot reach.  A point
    whose piece drops continues inside its own complement segment,
    which understates the true segment width slightly and so can only
    delay capture, never hasten it.  Returns the open fraction after
    every stage p..n_max.
    """
    rng = np.random.default_rng(seed)
    qp = QPartition(fm, r_cap)
    thetas = rng.random(n_points)
    span = qp.domain_hi - qp.domain_lo
    xs = qp.domain_lo + span * rng.random(n_points)
    captured = np.zeros(n_points, dtype=np.int64)
    lo_arr = np.empty(n_points)
    hi_arr = np.empty(n_points)
    tags: list = [None] * n_points
    for i in range(n_points):
        c = qp.locate(float(xs[i]))
        lo_arr[i], hi_arr[i], tags[i] = c.lo, c.hi, c.tag
    open_frac: dict = {}
    for m in range(p, n_max + 1):
        for i in range(n_points):
            if captured[i] != 0 or tags[i] == "core":
                continue
            cell = markov_cell(float(thetas[i]), m, fm.params.d)
            tp = ThetaPath(cell)
            info = _find_witnesses(
                fm, dc, p, m, tp, [(float(lo_arr[i]), float(hi_arr[i]))],
                witness_grid)[0]
            if not info.hit:
                continue
            res = _develop_point(
                fm, dc, qp, cell, float(lo_arr[i]), float(hi_arr[i]),
                tags[i], float(xs[i]), m, p, witness_grid)
            if res[0] == "captured":
                captured[i] = m
            elif res[0] == "core":
                tags[i] = "core"
            else:
                _, lo, hi, tag = res
                lo_arr[i], hi_arr[i], tags[i] = lo, hi, tag
        open_frac[m] = float(np.mean(captured == 0))
    return {"open_frac": open_frac, "final": open_frac[n_max],
            "n_points": n_points, "captured_stage": captured}


# ---------------------------------------------------------------------------
# Admissible curves


@dataclass
class AdmissibleCurve:
    """Graph of X: circle -> fiber sampled on a uniform grid.

    The only allowed discontinuity sits on the left of theta = 0, the
    fixed point of the base map, so derivative audits skip differences
    that straddle the seam.
    """

    values: np.ndarray
    is_circle: bool = False

    @property
    def grid(self) -> int:
        return len(self.values)

    def eval(self, theta):
        """Piecewise-linear evaluation at theta mod 1."""
        m = self.grid
        t = np.asarray(theta, dtype=float) % 1.0
        idx = np.minimum((t * m).astype(int), m - 1)
        frac = t * m - idx
        v0 = self.values[idx]
        v1 = self.values[(idx + 1) % m]
        dv = v1 - v0
        if self.is_circle:
            dv = (dv + 0.5) % 1.0 - 0.5
        out = v0 + frac * dv
        return np.mod(out, 1.0) if self.is_circle else out

    def derivative_bounds(self) -> tuple[float, float]:
        """(max |X'|, max |X''|) by differences, seam excluded."""
        v = self.values
        m = self.grid
        dv = np.diff(v)
        if self.is_circle:
            dv = (dv + 0.5) % 1.0 - 0.5
        d1 = dv * m
        d1max = float(np.max(np.abs(d1)))
        d2 = np.diff(d1) * m
        d2max = float(np.max(np.abs(d2))) if len(d2) else 0.0
        return d1max, d2max

    def audit(self, alpha: float, slack: float = 1.10) -> None:
        d1, d2 = self.derivative_bounds()
        if d1 > alpha * slack or d2 > alpha * slack:
            raise LemmaViolationError(
                f"curve fails admissibility: max|X'|={d1:.6e}, "
                f"max|X''|={d2:.6e}, alpha={alpha:.6e}")


def constant_curve(x0: float, grid: int = 1024,
                   is_circle: bool = False) -> AdmissibleCurve:
    return AdmissibleCurve(np.full(grid, float(x0)), is_circle)


def random_admissible_curve(fm: FiberMap, seed: int = 0, grid: int = 1024,
                            modes: int = 8,
                            margin: float = 0.9) -> AdmissibleCurve:
    """Random trigonometric polynomial inside the admissibility bounds."""
    rng = np.random.default_rng(seed)
    alpha = fm.params.alpha
    amps = rng.random(modes) / (1.0 + np.arange(modes)) ** 3
    phases = rng.random(modes) * TWO_PI
    ks = np.arange(1, modes + 1)
    load = max(float(np.sum(amps * TWO_PI * ks)),
               float(np.sum(amps * (TWO_PI * ks) ** 2))) / alpha
    amps = amps * margin / load
    total = float(np.sum(amps))
    if fm.is_circle:
        center = float(rng.random())
    else:
        center = float(rng.uniform(fm.x_lo + total, fm.x_hi - total))
    t = np.arange(grid) / grid
    vals = center + np.sum(
        amps[:, None] * np.sin(TWO_PI * ks[:, None] * t[None, :]
                               + phases[:, None]), axis=0)
    curve = AdmissibleCurve(vals % 1.0 if fm.is_circle else vals,
                            fm.is_circle)
    curve.audit(alpha)
    return curve


def push_admissible(fm: FiberMap, curve: AdmissibleCurve,
                    cell: DadicInterval, audit: bool = True,
                    slack: float = 1.10) -> AdmissibleCurve:
    """Image of the curve's graph over one cell, reparametrized by g^n.

    Samples t -> F_n((k+t)/d^n, X((k+t)/d^n)) on the curve's own grid
    with exact base iterates.  With ``audit`` the result must satisfy
    the derivative bounds; failure raises with both maxima reported.
    """
    tp = ThetaPath(cell)
    m = curve.grid
    t = np.arange(m) / m
    x = np.asarray(curve.eval(tp.theta(0, t)), dtype=float)
    alpha = fm.params.alpha
    for j in range(cell.depth):
        theta = tp.theta(j, t)
        xn = alpha * np.sin(TWO_PI * theta) + np.asarray(fm.value(x))
        x = np.mod(xn, 1.0) if fm.is_circle else np.clip(
            xn, fm.x_lo, fm.x_hi)
    out = AdmissibleCurve(x, fm.is_circle)
    if audit:
        out.audit(alpha, slack)
    return out


# ---------------------------------------------------------------------------
# Per-rectangle condition audits


def _witness_lattice(grid: int) -> tuple[np.ndarray, np.ndarray]:
    offs = (np.arange(grid) + 0.5) / grid
    return np.repeat(offs, grid), np.tile(offs, grid)


def _rect_lattice(fm: FiberMap, rect: Rectangle, grid: int):
    """Orbit data over a rectangle's sample lattice.

    Returns (depth matrix, log-derivatives, minimal critical distance
    over iterates below n, theta rows, fiber states)."""
    tp = ThetaPath(rect.omega)
    m = rect.depth
    params = fm.params
    u_off, x_off = _witness_lattice(grid)
    x = rect.j_lo + rect.j_width * x_off
    rows = len(x)
    rmat = np.zeros((rows, m + 1), dtype=np.int64)
    logd = np.zeros((rows, m))
    dists = np.full(rows, np.inf)
    thetas = np.empty((rows, m))
    states = np.empty((rows, m + 1))
    tiny = np.finfo(float).tiny
    for t in range(m + 1):
        xm = x % 1.0 if fm.is_circle else x
        states[:, t] = xm
        dist = np.abs(xm - params.x_tilde)
        if params.is_odd:
            dist = np.minimum(dist, 1.0 - dist)
        if t < m:
            np.minimum(dists, dist, out=dists)
        inside = (dist <= params.critical_radius) & (dist > 0.0)
        if inside.any():
            rmat[inside, t] = np.floor(np.log(
                params.critical_radius / dist[inside])).astype(np.int64) + 1
        if t == m:
            break
        theta = (tp.base[t] + u_off * tp.scale[t]) % 1.0
        thetas[:, t] = theta
        dv = np.abs(np.asarray(fm.deriv(xm), dtype=float))
        logd[:, t] = np.log(np.maximum(dv, tiny))
        xn = params.alpha * np.sin(TWO_PI * theta) + np.asarray(fm.value(xm))
        x = np.mod(xn, 1.0) if fm.is_circle else np.clip(
            xn, fm.x_lo, fm.x_hi)
    return rmat, logd, dists, thetas, states


def condition_II(fm: FiberMap, qp: QPartition, rect: Rectangle) -> dict:
    """Boundary-slice images stay within one cell's neighbor closure.

    Exact interval arithmetic per iterate.  The cascade only constrains
    iterates below n, so the audit reports the below-n range and the
    full range including n separately.
    """
    tp = ThetaPath(rect.omega)
    ok = []
    for j in range(rect.depth + 1):
        img = image_interval(fm, tp, rect.j_lo, rect.j_hi, j)
        mid = _point_value(fm, tp, 0.5 * (rect.j_lo + rect.j_hi), j)
        tag = qp.locate(mid).tag
        good = _within_closure(qp, img, tag)
        if not good:
            for step in (1, -1):
                ntag = qp.neighbor_tag(tag, step)
                if ntag is not None and _within_closure(qp, img, ntag):
                    good = True
                    break
        ok.append(good)
    return {"below_n": all(ok[:-1]), "full": all(ok),
            "first_failure": ok.index(False) if not all(ok) else None}


def _check_link(fm: FiberMap, qp: QPartition, rect: Rectangle,
                part: PartitionResult) -> bool:
    """Re-verify a subordination link with exact interval arithmetic.

    The tagged cell must sit inside the host's j-step image, and a
    neighboring cell inside the image of the candidate's own fiber
    interval pushed over the host's left endpoint path.
    """
    link = rect.subordinate_to
    if link is None:
        return False
    _, rid, j, tag = link
    host = part.get(rid)
    if host.omega != rect.omega and not host.omega.contains(rect.omega):
        return False
    if not (abs(host.j_hi - rect.j_lo) < 1e-12
            or abs(host.j_lo - rect.j_hi) < 1e-12):
        return False
    tp = ThetaPath(host.omega)
    host_img = image_interval(fm, tp, host.j_lo, host.j_hi, j)
    if tag not in _contained_cells(qp, host_img):
        return False
    own_img = image_interval(fm, tp, rect.j_lo, rect.j_hi, j)
    for step in (1, -1):
        ntag = qp.neighbor_tag(tag, step)
        if ntag is not None and ntag in _contained_cells(qp, own_img):
            return True
    return False


def condition_III(fm: FiberMap, qp: QPartition, rect: Rectangle,
                  part: PartitionResult) -> bool:
    """Star witness or subordination link, re-verified numerically."""
    if rect.kind != "R":
        return True
    if rect.star and rect.star_witness is not None:
        j, tag = rect.star_witness
        if j == 0:
            c = qp.cell(tag)
            return (abs(rect.j_lo - c.lo) < 1e-12
                    and abs(rect.j_hi - c.hi) < 1e-12)
        tp = ThetaPath(rect.omega)
        img = image_interval(fm, tp, rect.j_lo, rect.j_hi, j)
        return tag in _contained_cells(qp, img)
    return _check_link(fm, qp, rect, part)


def condition_IV(fm: FiberMap, qp: QPartition, rect: Rectangle,
                 part: PartitionResult) -> bool:
    """S rectangles are a full cell, a core sliver, or subordinate."""
    if rect.kind != "S" or rect.terminal:
        return True
    c = qp.cell(rect.q_tag)
    if abs(rect.j_lo - c.lo) < 1e-12 and abs(rect.j_hi - c.hi) < 1e-12:
        return True
    return _check_link(fm, qp, rect, part)


def verify_conditions(part: PartitionResult, fm: FiberMap,
                      dc: DerivedConstants,
                      max_rects: int | None = None) -> dict:
    """Audit every rectangle against the construction's invariants.

    Per rectangle: witness replay with first anchored return equal to
    the depth (kind R), boundary images inside neighbor closures below n
    and at n reported separately, star or subordination resolution,
    full-cell shape for S leftovers, the two bound-trajectory
    inequalities on the witness depths, the lattice depth-transfer bound
    r_j <= witness + 4, strictly positive critical distance, and
    admissibility of the pushed constant boundary curves.  Kinds are
    then re-derived with a doubled search grid; a flip means the grid
    is too coarse for the claimed partition.
    """
    qp = QPartition(fm, part.r_cap)
    grid = part.witness_grid
    expo = (1.0 / (dc.D - 1)) * (1.0 - 2.0 * dc.eta / (dc.D - 1))
    ra = dc.critical_radius
    rows = []
    rect_list = part.rectangles[:max_rects] if max_rects else part.rectangles
    for rect in rect_list:
        n = rect.depth
        row = {"id": rect.id, "depth": n, "kind": rect.kind,
               "star": rect.star, "terminal": rect.terminal}
        if rect.kind == "R":
            c2 = condition_II(fm, qp, rect)
            row["II_below_n"] = c2["below_n"]
            row["II_full"] = c2["full"]
        else:
            row["II_below_n"] = row["II_full"] = True
        row["III"] = condition_III(fm, qp, rect, part)
        row["IV"] = condition_IV(fm, qp, rect, part)
        if rect.kind == "R":
            u, x0 = rect.hn_witness
            rs, logd, _ = witness_orbit(fm, rect.omega, u, x0, n)
            row["I"] = _replay_first_return(rs, logd, dc, part.p) == n
            js = np.arange(n, dtype=float)
            lhs = dc.delta0 * ra * np.exp(-rs[:n].astype(float))
            mid = dc.delta0 * dc.alpha ** expo * np.exp(
                -(dc.c + dc.epsilon) * (n - js))
            rhs = 4.0 * dc.alpha * float(fm.params.d - dc.alpha) ** -(n - js)
            row["lemma34_first"] = bool(np.all(lhs >= mid * (1 - 1e-9)))
            row["lemma34_second"] = bool(np.all(mid >= rhs * (1 - 1e-9)))
            row["depth_budget"] = depth_budget_margin(fm, dc, rs, n) <= 1e-9
            rmat, _, dists, _, _ = _rect_lattice(fm, rect, max(grid // 2, 8))
            row["lemma35"] = bool(np.all(rmat[:, :n] <= rs[None, :n] + 4))
            row["cor36_min_dist"] = float(dists.min())
            try:
                for endpoint in (rect.j_lo, rect.j_hi):
                    push_admissible(
                        fm, constant_curve(endpoint, 512, fm.is_circle),
                        rect.omega)
                row["cor33"] = True
            except LemmaViolationError:
                row["cor33"] = False
        else:
            row.update(I=True, lemma34_first=True, lemma34_second=True,
                       lemma35=True, cor33=True, depth_budget=True,
                       cor36_min_dist=math.inf)
        rows.append(row)

    flips = 0
    by_path: dict = {}
    for r in rect_list:
        if not r.terminal:
            by_path.setdefault((r.omega.depth, r.omega.k), []).append(r)
    for (depth, k), group in by_path.items():
        tp = ThetaPath(group[0].omega)
        infos = _find_witnesses(
            fm, dc, part.p, depth, tp,
            [(r.j_lo, r.j_hi) for r in group], grid * 2)
        for r, info in zip(group, infos):
            if r.kind == "R" and not info.hit:
                flips += 1

    return {
        "rectangles": len(rows),
        "I": all(r["I"] for r in rows),
        "II_below_n": all(r["II_below_n"] for r in rows),
        "II_full": all(r["II_full"] for r in rows),
        "III": all(r["III"] for r in rows),
        "IV": all(r["IV"] for r in rows),
        "lemma34_first": all(r["lemma34_first"] for r in rows),
        "lemma34_second": all(r["lemma34_second"] for r in rows),
        "lemma35": all(r["lemma35"] for r in rows),
        "cor33": all(r["cor33"] for r in rows),
        "cor36_min_dist": min((r["cor36_min_dist"] for r in rows),
                              default=math.inf),
        "depth_budget": all(r["depth_budget"] for r in rows),
        "stability_flips": flips,
        "delta0": dc.delta0,
        "rows": rows,
    }


# ---------------------------------------------------------------------------
# Induced-map verification


def induced_map_checks(fm: FiberMap, dc: DerivedConstants, rect: Rectangle,
                       sample_grid: int = 16) -> dict:
    """Expansion, image size, and distortion estimates for one rectangle.

    Samples the rectangle on a lattice and accumulates the derivative
    cocycle and its first variations analytically.  Reported against the
    theory: the inverse-norm expansion bound below one, the image-size
    floor delta1, the derivative-ratio ceiling, suffix expansion along
    the orbit, the cocycle lower bound driven by the thinned return
    depths, and the near-critical derivative growth.  The distortion
    constant is estimated twice, by finite differences of the Jacobian
    across the lattice and from the analytic variations, and the finite
    difference route is repeated at doubled density for the stability
    verdict.
    """
    if rect.kind != "R":
        raise ConfigurationError("induced-map checks apply to R rectangles")
    n = rect.depth
    d = fm.params.d
    alpha = fm.params.alpha
    theta_c = TWO_PI * alpha / (d - 4.0)
    rate = dc.D * dc.c - dc.epsilon
    bound = (d - alpha) ** (-n) + (1.0 + theta_c) * math.exp(-rate * n)
    out: dict = {"id": rect.id, "depth": n, "expansion_bound": bound,
                 "theta_ratio_bound": theta_c, "delta1": dc.delta1}

    def lattice_pass(grid: int) -> dict:
        rmat, logd, dists, thetas, states = _rect_lattice(fm, rect, grid)
        rows = rmat.shape[0]
        T = np.zeros(rows)             # dtheta F_j / d^j
        dx_pref = np.ones(rows)        # dx F_j
        s_theta = np.zeros(rows)       # sum (h''/h')(x_j) dtheta F_j
        s_x = np.zeros(rows)           # sum (h''/h')(x_j) dx F_j
        scale = 1.0
        for j in range(n):
            xj = states[:, j]
            hp = np.asarray(fm.deriv(xj), dtype=float)
            hpp = np.asarray(fm.deriv2(xj), dtype=float)
            ratio = hpp / np.where(hp == 0.0, np.finfo(float).tiny, hp)
            s_theta += ratio * T * scale
            s_x += ratio * dx_pref
            T = (hp * T + TWO_PI * alpha * np.cos(
                TWO_PI * thetas[:, j])) / d
            dx_pref = dx_pref * hp
            scale *= d
        dtFn = T * scale
        abs_dx = np.maximum(np.abs(dx_pref), 1e-300)
        jac = scale * abs_dx
        inv_norm = np.maximum.reduce([
            np.full(rows, 1.0 / scale),
            1.0 / abs_dx,
            np.abs(T) / abs_dx])
        analytic = np.maximum(np.abs(s_theta * dx_pref - s_x * dtFn),
                              np.abs(s_x) * scale) / jac
        jf = (scale * dx_pref).reshape(grid, grid)
        du = float(rect.omega.width) / grid
        dxs = rect.j_width / grid
        dj_t = np.gradient(jf, du, axis=0)
        dj_x = np.gradient(jf, dxs, axis=1)
        num = np.maximum(
            np.abs(dj_t * dx_pref.reshape(grid, grid)
                   - dj_x * dtFn.reshape(grid, grid)),
            np.abs(dj_x) * scale)
        fd = num / np.maximum(jf * jf, 1e-300)
        return {"expansion": float(inv_norm.max()),
                "theta_ratio": float(np.abs(T).max()),
                "fd": float(fd.max()),
                "analytic": float(analytic.max()),
                "logd": logd, "rmat": rmat, "dists": dists,
                "states": states}

    base = lattice_pass(sample_grid)
    twice = lattice_pass(sample_grid * 2)
    out["expansion"] = max(base["expansion"], twice["expansion"])
    out["expansion_ok"] = out["expansion"] < 1.0 and \
        out["expansion"] <= bound * (1 + 1e-9)
    out["theta_ratio"] = max(base["theta_ratio"], twice["theta_ratio"])
    out["theta_ratio_ok"] = out["theta_ratio"] <= theta_c * (1 + 1e-9)
    out["distortion"] = base["fd"]
    out["distortion_2x"] = twice["fd"]
    out["distortion_analytic"] = base["analytic"]
    denom = max(abs(base["fd"]), 1e-300)
    out["distortion_stable"] = (
        math.isfinite(base["fd"]) and math.isfinite(twice["fd"])
        and abs(twice["fd"] - base["fd"]) / denom <= 0.2)

    # image size from the pushed boundary slices
    tp = ThetaPath(rect.omega)
    tgrid = 256
    t = np.arange(tgrid) / tgrid
    x_lo = np.full(tgrid, rect.j_lo)
    x_hi = np.full(tgrid, rect.j_hi)
    for j in range(n):
        drift = alpha * np.sin(TWO_PI * tp.theta(j, t))
        if fm.is_circle:
            x_lo = drift + np.asarray(fm.lift(x_lo), dtype=float)
            x_hi = drift + np.asarray(fm.lift(x_hi), dtype=float)
        else:
            x_lo = np.clip(drift + np.asarray(fm.value(x_lo)),
                           fm.x_lo, fm.x_hi)
            x_hi = np.clip(drift + np.asarray(fm.value(x_hi)),
                           fm.x_lo, fm.x_hi)
    gap = np.abs(x_hi - x_lo)
    if fm.is_circle:
        gap = np.minimum(gap, 1.0)
    out["image_size"] = float(gap.min())
    out["image_ok"] = out["image_size"] >= dc.delta1

    logd = base["logd"]
    rmat = base["rmat"]
    suffix = np.cumsum(logd[:, ::-1], axis=1)[:, ::-1]
    need = rate * (n - np.arange(n, dtype=float))
    out["suffix_margin"] = float((suffix - need[None, :]).min())
    out["suffix_ok"] = out["suffix_margin"] >= -1e-9
    sit = _thin_situations(rmat, max(1, dc.N_alpha))
    deep = np.sum(np.where(sit[:, :n], rmat[:, :n], 0), axis=1)
    lower = (dc.D + 2) * dc.c * n - (dc.D - 1) * deep
    out["cocycle_margin"] = float((np.sum(logd, axis=1) - lower).min())
    out["cocycle_ok"] = out["cocycle_margin"] >= -1e-9

    xs = base["states"][:, :n].ravel()
    dist = np.abs(xs - fm.params.x_tilde)
    if fm.params.is_odd:
        dist = np.minimum(dist, 1.0 - dist)
    near = (dist < fm.params.critical_radius) & (dist > 0)
    if near.any():
        lhs = np.abs(np.asarray(fm.deriv(xs[near]), dtype=float))
        rhs = (dc.D * fm.params.A - alpha) * dist[near] ** (dc.D - 1)
        out["cond2_margin"] = float((lhs - rhs).min())
        out["cond2_ok"] = bool(np.all(lhs >= rhs * (1 - 1e-9)))
    else:
        out["cond2_margin"] = math.inf
        out["cond2_ok"] = True
    return out
