"""Event-driven integration of Filippov solutions: smooth flow with boundary
event localization, crossing, and sliding motion on switching manifolds.

Flow segments use classical RK4 with a fixed base step; boundary hits are
localized by bisection on the sign change of each manifold function. Sliding
segments integrate the convex-combination sliding field along the manifold
with post-step projection back onto it, and exit when the combination weight
reaches 0 or 1. For affine systems the smooth flow is advanced in vectorized
blocks through the exact single-step RK4 transition map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import (
    PwsSystem,
    Manifold,
    TopologyError,
    check_intersection_assumption,
    locate,
)

__all__ = [
    "SolverOptions",
    "BoundaryClass",
    "Segment",
    "Trajectory",
    "EscapingRegionError",
    "IntersectionAssumptionError",
    "StepUnderflowError",
    "lie_derivative",
    "classify_boundary",
    "sliding_coefficient",
    "sliding_field",
    "integrate",
    "write_trajectory_csv",
]

CROSSING = "crossing"
SLIDING = "sliding"
ESCAPING = "escaping"
TANGENTIAL = "tangential"


class EscapingRegionError(RuntimeError):
    """Trajectory reached an escaping region where the solution is not unique."""

    def __init__(self, t, x, manifold, sigma_i, sigma_j):
        super().__init__(
            f"escaping region on {manifold} at t={t:.6g}, x={np.asarray(x)}: "
            f"sigma_i={sigma_i:.6g} < 0 < sigma_j={sigma_j:.6g}; "
            "the Filippov solution is not unique here")
        self.t = t
        self.x = np.asarray(x, dtype=float)
        self.manifold = manifold
        self.sigma_i = sigma_i
        self.sigma_j = sigma_j


class IntersectionAssumptionError(RuntimeError):
    """Trajectory reached the manifold intersection but the common-sector
    assumption does not hold."""


class StepUnderflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    """Fixed-step solver knobs; the defaults reproduce all shipped results."""

    step: float = 1e-3
    tol_event: float = 1e-10
    max_bisect: int = 80
    tol_lie: float = 1e-10
    tol_lambda: float = 1e-10
    tol_boundary: float = 1e-9
    block: int = 256
    max_transitions: int = 200_000

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")


@dataclass(frozen=True)
class BoundaryClass:
    """Classification of a boundary point by the two adjacent Lie derivatives."""

    kind: str
    sigma_i: float
    sigma_j: float
    pair: tuple


@dataclass
class Segment:
    kind: str  # "flow" | "slide" | "cross"
    t_start: float
    t_end: float
    mode: Optional[int] = None
    manifold: Optional[str] = None
    pair: Optional[tuple] = None  # slide: (i, j); cross: (mode_from, mode_to)


@dataclass
class Trajectory:
    """Timestamped states with per-sample segment annotation.

    ``lambdas[k]`` holds the sliding weight at sample k and is NaN outside
    slide segments. ``seg_index[k]`` points into ``segments``.
    """

    times: np.ndarray
    states: np.ndarray
    lambdas: np.ndarray
    seg_index: np.ndarray
    segments: list

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def grid_samples(self, h: float):
        """Samples lying on the aligned time grid k*h (plus the final time)."""
        k = np.round(self.times / h)
        on_grid = np.abs(self.times - k * h) <= 1e-9 * max(h, 1.0)
        on_grid[-1] = True
        idx = np.flatnonzero(on_grid)
        # keep the first sample at each distinct time
        keep = np.concatenate(([True], np.diff(self.times[idx]) > 1e-12))
        idx = idx[keep]
        return self.times[idx], self.states[idx]

    def has_sliding(self) -> bool:
        return any(s.kind == "slide" for s in self.segments)

    def slide_history(self, seg: Segment):
        """(times, lambdas) recorded along one slide segment."""
        sid = self.segments.index(seg)
        mask = self.seg_index == sid
        return self.times[mask], self.lambdas[mask]


def lie_derivative(manifold: Manifold, field_value, x) -> float:
    """Directional derivative of H along a field value: grad H(x) . f."""
    return float(np.dot(manifold.grad(x), np.asarray(field_value, dtype=float)))


def classify_boundary(system: PwsSystem, manifold_idx: int, x,
                      tol_lie: float = 1e-10,
                      resolve_tangential: bool = True) -> BoundaryClass:
    """Classify a point on a single manifold as crossing, sliding, or escaping.

    Tangential points (one Lie derivative within tol_lie of zero) resolve to
    sliding unless ``resolve_tangential`` is False. The point must not lie on
    any other manifold.
    """
    x = np.asarray(x, dtype=float)
    i, j = system.adjacent_modes(manifold_idx, x)
    man = system.manifolds[manifold_idx]
    g = man.grad(x)
    si = float(np.dot(g, system.f(i, x)))
    sj = float(np.dot(g, system.f(j, x)))
    zi, zj = abs(si) <= tol_lie, abs(sj) <= tol_lie
    if zi and zj:
        raise TopologyError(
            f"both Lie derivatives vanish on {man.label} at x={x}; "
            "transversality (Assumption on switching data) is violated")
    if zi or zj:
        kind = SLIDING if resolve_tangential else TANGENTIAL
    elif si * sj > 0:
        kind = CROSSING
    elif si > 0:
        kind = SLIDING
    else:
        kind = ESCAPING
    return BoundaryClass(kind, si, sj, (i, j))


def sliding_coefficient(sigma_i: float, sigma_j: float) -> float:
    """Filippov combination weight lambda = sigma_i / (sigma_i - sigma_j).

    Requires the strict sliding configuration sigma_i > 0 > sigma_j, which
    makes (1 - lambda) sigma_i + lambda sigma_j = 0 with lambda in (0, 1).
    """
    if not (sigma_i > 0.0 and sigma_j < 0.0):
        raise ValueError(
            f"not a sliding configuration: sigma_i={sigma_i:.6g}, "
            f"sigma_j={sigma_j:.6g} (need sigma_i > 0 > sigma_j)")
    return sigma_i / (sigma_i - sigma_j)


def _lambda_raw(si: float, sj: float) -> float:
    den = si - sj
    if den == 0.0:
        return 0.5
    return si / den


def sliding_field(system: PwsSystem, i: int, j: int, x) -> np.ndarray:
    """Sliding vector (1-lambda) f_i + lambda f_j, tangent to the manifold.

    ``i`` must be the mode on the negative side of the separating manifold and
    ``j`` the mode on the positive side. Tangential configurations (one Lie
    derivative zero) are accepted and give lambda 0 or 1.
    """
    x = np.asarray(x, dtype=float)
    man_idx = system.manifold_between(i, j)
    man = system.manifolds[man_idx]
    neg, pos = system.adjacent_modes(man_idx, x)
    if (i, j) != (neg, pos):
        raise ValueError(
            f"mode order ({i}, {j}) does not match the (negative, positive) "
            f"sides ({neg}, {pos}) of {man.label}")
    fi = system.f(i, x)
    fj = system.f(j, x)
    g = man.grad(x)
    si = float(np.dot(g, fi))
    sj = float(np.dot(g, fj))
    if si < 0.0 and sj > 0.0:
        raise ValueError("escaping configuration has no sliding vector")
    lam = _lambda_raw(si, sj)
    if not -1e-9 <= lam <= 1.0 + 1e-9:
        raise ValueError(
            f"point is not in the sliding region (lambda={lam:.6g})")
    return fi + lam * (fj - fi)


# ---------------------------------------------------------------------------
# stepping primitives


def _rk4(f: Callable, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _AffineKernel:
    """Precomputed RK4 transition maps for affine modes.

    One RK4 step of x' = Ax + b with step h is exactly x -> R(h) x + r(h)
    with R the degree-4 truncated exponential; blocks of steps are evaluated
    through stacked cumulative powers.
    """

    def __init__(self, system: PwsSystem, opts: SolverOptions):
        n = system.dimension
        self.n = n
        self.block = opts.block
        self._pow = []
        eye = np.eye(n)
        for mode in system.modes:
            A, b = mode.affine.A, mode.affine.b
            A2 = A @ A
            A3 = A2 @ A
            A4 = A3 @ A
            self._pow.append(((eye, A, A2, A3, A4), (b, A @ b, A2 @ b, A3 @ b)))
        if system.manifolds:
            self.C = np.vstack([m.affine[0] for m in system.manifolds])
            self.d = np.array([m.affine[1] for m in system.manifolds])
        else:
            self.C = np.zeros((0, n))
            self.d = np.zeros(0)
        self._stacks = {}

    def step_map(self, mode_idx: int, h: float):
        mats, vecs = self._pow[mode_idx - 1]
        eye, A, A2, A3, A4 = mats
        b, Ab, A2b, A3b = vecs
        R = eye + h * A + (h * h / 2.0) * A2 + (h ** 3 / 6.0) * A3 + (h ** 4 / 24.0) * A4
        r = h * b + (h * h / 2.0) * Ab + (h ** 3 / 6.0) * A2b + (h ** 4 / 24.0) * A3b
        return R, r

    def state(self, mode_idx: int, x: np.ndarray, h: float) -> np.ndarray:
        R, r = self.step_map(mode_idx, h)
        return R @ x + r

    def stacks(self, mode_idx: int, h: float):
        key = (mode_idx, h)
        if key not in self._stacks:
            R, r = self.step_map(mode_idx, h)
            Rs = np.empty((self.block, self.n, self.n))
            rs = np.empty((self.block, self.n))
            Rs[0] = R
            rs[0] = r
            for k in range(1, self.block):
                Rs[k] = R @ Rs[k - 1]
                rs[k] = R @ rs[k - 1] + r
            self._stacks[key] = (Rs, rs)
        return self._stacks[key]


def _event_flags(h0, h1, tol):
    """Detect a root of H in one step: strict sign change, or landing on the
    manifold from a point clearly off it. Starting on the manifold (|H| within
    tol) never triggers, which lets trajectories leave a boundary cleanly."""
    s0 = 0 if abs(h0) <= tol else (1 if h0 > 0 else -1)
    s1 = 0 if abs(h1) <= tol else (1 if h1 > 0 else -1)
    return (s0 * s1 < 0) or (s0 != 0 and s1 == 0)


def _bisect_manifold(step_fn, man: Manifold, x0, delta, h0, opts: SolverOptions):
    """Locate a root of H along the step map, returning (theta, state)."""
    if abs(h0) <= opts.tol_event:
        return 0.0, np.asarray(x0, dtype=float)
    pos0 = h0 > 0
    lo, hi = 0.0, 1.0
    for _ in range(opts.max_bisect):
        mid = 0.5 * (lo + hi)
        xm = step_fn(x0, mid * delta)
        hm = man.h(xm)
        if abs(hm) <= opts.tol_event:
            return mid, xm
        if (hm > 0) == pos0:
            lo = mid
        else:
            hi = mid
    return hi, step_fn(x0, hi * delta)


def _next_grid(t: float, h: float, t_stop: float) -> float:
    k = math.floor(t / h + 1e-9) + 1
    tn = k * h
    if tn >= t_stop - 1e-12 * max(h, 1.0):
        return t_stop
    return tn


class _Builder:
    """Accumulates samples and segments while the state machine runs."""

    def __init__(self, n: int):
        self.n = n
        self._t = []
        self._x = []
        self._lam = []
        self._seg = []
        self.segments: list = []

    def open_segment(self, kind, t, mode=None, manifold=None, pair=None) -> int:
        self.segments.append(Segment(kind, t, t, mode=mode, manifold=manifold, pair=pair))
        return len(self.segments) - 1

    def close_segment(self, seg_id: int, t_end: float):
        self.segments[seg_id].t_end = t_end

    def add_point(self, t, x, seg_id, lam=math.nan):
        self._t.append(np.array([t]))
        self._x.append(np.asarray(x, dtype=float).reshape(1, -1))
        self._lam.append(np.array([lam]))
        self._seg.append(np.array([seg_id]))

    def add_block(self, ts, X, seg_id):
        k = len(ts)
        if k == 0:
            return
        self._t.append(np.asarray(ts, dtype=float))
        self._x.append(np.asarray(X, dtype=float))
        self._lam.append(np.full(k, math.nan))
        self._seg.append(np.full(k, seg_id, dtype=int))

    def finish(self) -> Trajectory:
        times = np.concatenate(self._t)
        states = np.vstack(self._x)
        lams = np.concatenate(self._lam)
        segs = np.concatenate(self._seg).astype(int)
        return Trajectory(times, states, lams, segs, self.segments)


# ---------------------------------------------------------------------------
# flow engines


def _run_flow_generic(system, mode_idx, x, t, t_stop, opts, builder, seg_id):
    """Step one smooth mode until a manifold hit or t_stop; returns
    ("t_stop", t, x) or ("hit", manifold_idx, t_e, x_e)."""
    f = system.modes[mode_idx - 1].f
    mans = system.manifolds
    h0 = [m.h(x) for m in mans]
    step_fn = lambda x0, d: _rk4(f, x0, d)
    while t < t_stop - 1e-14:
        tn = _next_grid(t, opts.step, t_stop)
        delta = tn - t
        x1 = _rk4(f, x, delta)
        h1 = [m.h(x1) for m in mans]
        flagged = [k for k in range(len(mans))
                   if _event_flags(h0[k], h1[k], opts.tol_event)]
        if flagged:
            best = None
            for k in flagged:
                theta, xe = _bisect_manifold(step_fn, mans[k], x, delta, h0[k], opts)
                if best is None or theta < best[0]:
                    best = (theta, k, xe)
            theta, k, xe = best
            xe = mans[k].project(xe)
            return "hit", k, t + theta * delta, xe
        t, x, h0 = tn, x1, h1
        builder.add_point(t, x, seg_id)
    return "t_stop", t, x


def _run_flow_affine(system, kern, mode_idx, x, t, t_stop, opts, builder, seg_id):
    h = opts.step
    mans = system.manifolds
    n_man = len(mans)
    step_fn = lambda x0, d: kern.state(mode_idx, x0, d)

    def scan_single(x0, t0, delta):
        x1 = kern.state(mode_idx, x0, delta)
        if n_man:
            h0 = kern.C @ x0 - kern.d
            h1 = kern.C @ x1 - kern.d
            flagged = [k for k in range(n_man)
                       if _event_flags(h0[k], h1[k], opts.tol_event)]
            if flagged:
                best = None
                for k in flagged:
                    theta, xe = _bisect_manifold(step_fn, mans[k], x0, delta,
                                                 float(h0[k]), opts)
                    if best is None or theta < best[0]:
                        best = (theta, k, xe)
                theta, k, xe = best
                return ("hit", k, t0 + theta * delta, mans[k].project(xe))
        return ("ok", x1)

    while t < t_stop - 1e-14:
        k0 = math.floor(t / h + 1e-9)
        aligned = abs(t - k0 * h) <= 1e-12 * max(h, 1.0)
        if not aligned:
            tn = _next_grid(t, h, t_stop)
            res = scan_single(x, t, tn - t)
            if res[0] == "hit":
                return res
            x = res[1]
            t = tn
            builder.add_point(t, x, seg_id)
            continue
        m_total = int(math.floor((t_stop - t) / h + 1e-12))
        if m_total == 0:
            res = scan_single(x, t, t_stop - t)
            if res[0] == "hit":
                return res
            x = res[1]
            t = t_stop
            builder.add_point(t, x, seg_id)
            break
        m = min(kern.block, m_total)
        Rs, rs = kern.stacks(mode_idx, h)
        X = Rs[:m] @ x + rs[:m]
        ts = (k0 + 1 + np.arange(m)) * h
        if n_man:
            Hs = np.empty((m + 1, n_man))
            Hs[0] = kern.C @ x - kern.d
            Hs[1:] = X @ kern.C.T - kern.d
            absH = np.abs(Hs)
            sgn = np.where(absH <= opts.tol_event, 0, np.sign(Hs))
            a, b = sgn[:-1], sgn[1:]
            ev = (a * b < 0) | ((a != 0) & (b == 0))
            rows = np.flatnonzero(ev.any(axis=1))
            if rows.size:
                idx = int(rows[0])
                x_prev = x if idx == 0 else X[idx - 1]
                t_prev = t + idx * h
                builder.add_block(ts[:idx], X[:idx], seg_id)
                best = None
                for k in np.flatnonzero(ev[idx]):
                    theta, xe = _bisect_manifold(step_fn, mans[k], x_prev, h,
                                                 float(Hs[idx, k]), opts)
                    if best is None or theta < best[0]:
                        best = (theta, int(k), xe)
                theta, k, xe = best
                return "hit", k, t_prev + theta * h, mans[k].project(xe)
        builder.add_block(ts, X, seg_id)
        x = X[-1]
        t = ts[-1]
    return "t_stop", t, x


# ---------------------------------------------------------------------------
# sliding engine


def _run_slide(system, man_idx, i, j, x, t, t_stop, opts, builder, seg_id):
    """Integrate the sliding field along one manifold.

    Returns ("t_stop", t, x), ("exit", mode, t_e, x_e), or
    ("hit", other_manifold_idx, t_e, x_e) when the slide reaches another
    manifold (for a planar cross: the intersection point).
    """
    man = system.manifolds[man_idx]
    others = [k for k in range(len(system.manifolds)) if k != man_idx]
    fi_fn = system.modes[i - 1].f
    fj_fn = system.modes[j - 1].f

    def lam_at(xq):
        g = man.grad(xq)
        return _lambda_raw(float(np.dot(g, fi_fn(xq))), float(np.dot(g, fj_fn(xq))))

    def fs(xq):
        fi = fi_fn(xq)
        fj = fj_fn(xq)
        g = man.grad(xq)
        lam = _lambda_raw(float(np.dot(g, fi)), float(np.dot(g, fj)))
        return fi + lam * (fj - fi)

    def slide_step(x0, d):
        return man.project(_rk4(fs, x0, d))

    lo_bound = opts.tol_lambda
    hi_bound = 1.0 - opts.tol_lambda
    while t < t_stop - 1e-14:
        tn = _next_grid(t, opts.step, t_stop)
        delta = tn - t
        if delta < 1e-15:
            raise StepUnderflowError(f"sliding step underflow at t={t}")
        x1 = slide_step(x, delta)
        # another manifold reached mid-slide (planar cross: the intersection)
        hit = None
        for k in others:
            h0 = system.manifolds[k].h(x)
            h1 = system.manifolds[k].h(x1)
            if _event_flags(h0, h1, opts.tol_event):
                theta, xe = _bisect_manifold(slide_step, system.manifolds[k],
                                             x, delta, h0, opts)
                if hit is None or theta < hit[0]:
                    hit = (theta, k, xe)
        # combination weight leaving [0, 1] marks a candidate exit
        lam1 = lam_at(x1)
        lam_exit = None
        if not (lo_bound <= lam1 <= hi_bound):
            lo_th, hi_th = 0.0, 1.0
            xe = x
            for _ in range(opts.max_bisect):
                mid = 0.5 * (lo_th + hi_th)
                xm = slide_step(x, mid * delta)
                if lo_bound <= lam_at(xm) <= hi_bound:
                    lo_th, xe = mid, xm
                else:
                    hi_th = mid
                if hi_th - lo_th <= 1e-12:
                    break
            lam_exit = (lo_th, xe)
        if hit is not None and (lam_exit is None or hit[0] < lam_exit[0]):
            theta, k, xe = hit
            te = t + theta * delta
            builder.add_point(te, xe, seg_id, lam=min(max(lam_at(xe), 0.0), 1.0))
            return "hit", k, te, xe
        if lam_exit is None:
            t, x = tn, x1
            builder.add_point(t, x, seg_id, lam=lam1)
            continue
        theta, xe = lam_exit
        # persistence probe: finish the interval; only a sustained excursion
        # beyond the threshold leaves the manifold (anti-chattering)
        rest = (1.0 - theta) * delta
        x_probe = slide_step(xe, rest) if rest > 1e-15 else xe
        lam_probe = lam_at(x_probe)
        if lo_bound <= lam_probe <= hi_bound:
            t, x = tn, x_probe
            builder.add_point(t, x, seg_id, lam=lam_probe)
            continue
        te = t + theta * delta
        lam_e = min(max(lam_at(xe), 0.0), 1.0)
        builder.add_point(te, xe, seg_id, lam=lam_e)
        exit_mode = i if lam_probe < lo_bound else j
        return "exit", exit_mode, te, xe
    return "t_stop", t, x


# ---------------------------------------------------------------------------
# orchestration


def integrate(system: PwsSystem, x0, t_f: float,
              opts: Optional[SolverOptions] = None) -> Trajectory:
    """Integrate the Filippov solution from x0 over [0, t_f].

    The trajectory alternates smooth flow segments, zero-duration crossing
    events, and sliding segments. Boundary hits are localized by bisection to
    ``opts.tol_event`` in |H|; classification uses field values evaluated on
    the projected boundary point. Sliding exits when the combination weight
    leaves [0, 1] persistently (one-step hysteresis). At the intersection of a
    planar cross the trajectory crosses into the sector certified by the
    common-sector check.

    Raises EscapingRegionError when an escaping boundary point is reached and
    IntersectionAssumptionError when the intersection is reached but the
    common-sector assumption fails.
    """
    opts = opts or SolverOptions()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.dimension,):
        raise ValueError(f"x0 must have shape ({system.dimension},)")
    if not system.box.contains(x0, tol=1e-9):
        raise ValueError("x0 lies outside the analysis box")
    if t_f < 0:
        raise ValueError("t_f must be nonnegative")

    builder = _Builder(system.dimension)
    kern = _AffineKernel(system, opts) if system.is_affine else None
    sector_cache: dict = {}

    def certified_sector() -> int:
        if "sector" not in sector_cache:
            chk = check_intersection_assumption(system)
            if not chk.ok:
                raise IntersectionAssumptionError(chk.detail)
            sector_cache["sector"] = chk.sector
        return sector_cache["sector"]

    def classify_entry(man_idx, t, x, mode_from=None):
        """Decide what happens at a boundary point; returns the next state."""
        cls = classify_boundary(system, man_idx, x, tol_lie=opts.tol_lie)
        i, j = cls.pair
        label = system.manifolds[man_idx].label
        if cls.kind == ESCAPING:
            raise EscapingRegionError(t, x, label, cls.sigma_i, cls.sigma_j)
        if cls.kind == CROSSING:
            target = j if cls.sigma_i > 0 else i
            source = mode_from if mode_from is not None else (i if target == j else j)
            sid = builder.open_segment("cross", t, manifold=label,
                                       pair=(source, target))
            builder.add_point(t, x, sid)
            return ("flow", target)
        return ("slide", man_idx, i, j)

    def boundary_state(man_idx, t, x, mode_from=None):
        loc = locate(system, x, tol_boundary=opts.tol_boundary)
        if loc.kind == "on_manifold" and len(loc.manifolds) >= 2:
            target = certified_sector()
            sid = builder.open_segment(
                "cross", t, manifold="&".join(loc.manifolds),
                pair=(mode_from, target))
            builder.add_point(t, x, sid)
            return ("flow", target)
        return classify_entry(man_idx, t, x, mode_from=mode_from)

    # initial state
    t, x = 0.0, x0.copy()
    loc = locate(system, x, tol_boundary=opts.tol_boundary)
    if loc.kind == "interior":
        state = ("flow", loc.mode)
    elif len(loc.manifolds) >= 2:
        state = ("flow", certified_sector())
    else:
        man_idx = next(k for k, m in enumerate(system.manifolds)
                       if m.label == loc.manifolds[0])
        state = classify_entry(man_idx, t, x, mode_from=None)

    if t_f == 0.0:
        sid = builder.open_segment("flow", 0.0,
                                   mode=state[1] if state[0] == "flow" else None)
        builder.add_point(0.0, x, sid)
        return builder.finish()

    first = True
    transitions = 0
    while t < t_f - 1e-14:
        transitions += 1
        if transitions > opts.max_transitions:
            raise StepUnderflowError(
                "too many segment transitions (chattering or step underflow)")
        if state[0] == "flow":
            mode_idx = state[1]
            sid = builder.open_segment("flow", t, mode=mode_idx)
            if first:
                builder.add_point(t, x, sid)
                first = False
            if kern is not None:
                res = _run_flow_affine(system, kern, mode_idx, x, t, t_f, opts,
                                       builder, sid)
            else:
                res = _run_flow_generic(system, mode_idx, x, t, t_f, opts,
                                        builder, sid)
            if res[0] == "t_stop":
                _, t, x = res
                builder.close_segment(sid, t)
                break
            _, man_idx, te, xe = res
            builder.close_segment(sid, te)
            t, x = te, xe
            state = boundary_state(man_idx, t, x, mode_from=mode_idx)
        else:
            _, man_idx, i, j = state
            label = system.manifolds[man_idx].label
            sid = builder.open_segment("slide", t, manifold=label, pair=(i, j))
            g = system.manifolds[man_idx].grad(x)
            lam0 = _lambda_raw(float(np.dot(g, system.f(i, x))),
                               float(np.dot(g, system.f(j, x))))
            builder.add_point(t, x, sid, lam=min(max(lam0, 0.0), 1.0))
            first = False
            res = _run_slide(system, man_idx, i, j, x, t, t_f, opts, builder, sid)
            if res[0] == "t_stop":
                _, t, x = res
                builder.close_segment(sid, t)
                break
            if res[0] == "exit":
                _, exit_mode, te, xe = res
                builder.close_segment(sid, te)
                t, x = te, xe
                state = ("flow", exit_mode)
            else:  # reached another manifold: for a planar cross this is x~
                _, other_idx, te, xe = res
                builder.close_segment(sid, te)
                t, x = te, xe
                state = boundary_state(other_idx, t, x, mode_from=None)
    return builder.finish()


def write_trajectory_csv(traj: Trajectory, fh) -> None:
    """Write the trajectory in the CSV schema
    ``t,x1,...,xn,segment,mode_or_pair,lambda`` (lambda empty outside slides)."""
    n = traj.states.shape[1]
    cols = ",".join(f"x{k + 1}" for k in range(n))
    fh.write(f"t,{cols},segment,mode_or_pair,lambda\n")
    fmt = "{:.17g}"
    for k in range(len(traj.times)):
        seg = traj.segments[traj.seg_index[k]]
        if seg.kind == "flow":
            tag = "" if seg.mode is None else str(seg.mode)
        elif seg.kind == "slide":
            tag = f"{seg.pair[0]}-{seg.pair[1]}"
        else:
            src = "" if seg.pair[0] is None else str(seg.pair[0])
            tag = f"{src}->{seg.pair[1]}"
        lam = traj.lambdas[k]
        lam_s = "" if math.isnan(lam) else fmt.format(lam)
        xs = ",".join(fmt.format(v) for v in traj.states[k])
        fh.write(f"{fmt.format(traj.times[k])},{xs},{seg.kind},{tag},{lam_s}\n")
