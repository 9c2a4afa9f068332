"""Search for a certificate metric (Q, c): outer bisection on the rate c with
an inner derivative-free simplex search over Cholesky-factor parameters of Q.

The search is heuristic: failure to find a metric proves nothing (the
certificate conditions are sufficient only), and any returned metric is
re-checked before being reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .measure import Metric, matrix_measure
from .model import AnalysisBox, PwsSystem, check_intersection_assumption
from .certify import (
    CertificateReport,
    check_chain_certificate,
    check_cross_certificate,
    PASS_TOL,
    _COMBO_DIAG,
    _COMBO_FULL_1,
    _COMBO_FULL_2,
    _cross_combo,
    _hyperplane_box_vertices,
    _polytope_vertices_2d,
)

__all__ = ["SearchOptions", "SearchResult", "margin", "search_certificate"]

_PENALTY = -1e6


@dataclass(frozen=True)
class SearchOptions:
    c_lo: float = 0.0
    c_hi: float = 10.0
    c_tol: float = 1e-3
    max_iter: int = 200
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.c_lo < self.c_hi):
            raise ValueError("need 0 <= c_lo < c_hi")


@dataclass
class SearchResult:
    found: bool
    metric: Optional[Metric]
    report: Optional[CertificateReport]
    trace: list = field(default_factory=list)  # (c, best inner margin)


def _check(system: PwsSystem, metric: Metric, box) -> CertificateReport:
    if system.topology == "chain":
        return check_chain_certificate(system, metric, box)
    return check_cross_certificate(system, metric, box)


class _ConditionProgram:
    """Metric-independent precomputation of the vertex certificate conditions.

    For affine data the quantified matrices at the domain vertices and the
    intersection residual do not depend on (Q, c), so a search can reuse them
    across every margin evaluation.
    """

    def __init__(self, system: PwsSystem, box: Optional[AnalysisBox]):
        if not system.is_affine:
            raise ValueError("metric search requires affine system data")
        box = box or system.box
        self.flow_mats = [m.affine.A for m in system.modes]
        self.zero_groups: list = []  # list of lists of matrices, bound 0
        self.residual = 0.0
        if system.topology == "chain":
            for k, man in enumerate(system.manifolds):
                pts = _hyperplane_box_vertices(*man.affine, box)
                mats = [np.outer(system.f(k + 2, x) - system.f(k + 1, x),
                                 man.grad(x)) for x in pts]
                self.zero_groups.append(mats)
        else:
            chk = check_intersection_assumption(system)
            if not chk.ok:
                raise ValueError(
                    f"common-sector assumption fails: {chk.detail}")
            m1, m2 = system.manifolds
            full1 = _cross_combo(system, _COMBO_FULL_1)
            full2 = _cross_combo(system, _COMBO_FULL_2)
            diag = _cross_combo(system, _COMBO_DIAG)
            neg = _cross_combo(system, tuple(-s for s in _COMBO_DIAG))
            for man, combo in ((m1, full1), (m2, full2)):
                pts = _hyperplane_box_vertices(*man.affine, box)
                self.zero_groups.append(
                    [np.outer(combo(x), man.grad(x)) for x in pts])
            for man, other, side, combo in ((m1, m2, 1, diag), (m1, m2, -1, neg),
                                            (m2, m1, 1, diag), (m2, m1, -1, neg)):
                oc, od = other.affine
                pts = _polytope_vertices_2d([man.affine],
                                            [((-side) * oc, (-side) * od)], box)
                self.zero_groups.append(
                    [np.outer(combo(x), man.grad(x)) for x in pts])
            self.residual = float(np.linalg.norm(diag(chk.x_tilde)))

    def margin(self, Q: np.ndarray, c: float) -> float:
        """Aggregate margin; see ``margin`` below for the convention."""
        out = min(-c - matrix_measure(Q, A) for A in self.flow_mats)
        for mats in self.zero_groups:
            worst = max((matrix_measure(Q, M) for M in mats), default=-math.inf)
            if worst > PASS_TOL + 1e-9:
                out = min(out, -worst)
        if self.residual > 1e-9 + PASS_TOL:
            out = min(out, -self.residual)
        return out


def margin(system: PwsSystem, metric: Metric,
           box: Optional[AnalysisBox] = None) -> float:
    """Smallest (required bound - worst case) over the certificate conditions,
    against the exact bounds; positive iff the certificate passes with slack.

    Zero-bound conditions (manifold jump terms and the intersection equality)
    are hard gates: when satisfied within their floating-point allowance they
    do not cap the margin, since no choice of c improves them; when violated
    they contribute their negative margin.
    """
    report = _check(system, metric, box)
    out = math.inf
    for cond in report.conditions:
        sm = cond.strict_margin()
        if cond.kind == "flow":
            out = min(out, sm)
        elif cond.margin < -PASS_TOL:
            out = min(out, sm)
    return out


def _params_to_q(theta: np.ndarray, n: int) -> Optional[np.ndarray]:
    L = np.zeros((n, n))
    idx = 0
    for i in range(n):
        for j in range(i + 1):
            L[i, j] = theta[idx]
            idx += 1
    Q = L @ L.T
    dmax = float(np.max(np.diag(Q)))
    if not math.isfinite(dmax) or dmax <= 1e-12:
        return None
    # mu_Q is invariant under positive scaling of Q: pin the largest diagonal
    return Q / dmax


def _initial_params(n: int) -> np.ndarray:
    theta = []
    for i in range(n):
        for j in range(i + 1):
            theta.append(1.0 if i == j else 0.0)
    return np.array(theta)


def _inner_search(program: _ConditionProgram, n, c, opts: SearchOptions, rng) -> tuple:
    """Maximize the certificate margin over Q at fixed rate c.

    Returns (best margin, best Q) across seeded restarts; deterministic for a
    fixed seed."""

    def neg_margin(theta):
        Q = _params_to_q(theta, n)
        if Q is None:
            return -_PENALTY
        try:
            return -program.margin(Q, c)
        except Exception:
            return -_PENALTY

    starts = [_initial_params(n)]
    for _ in range(max(0, opts.restarts - 1)):
        starts.append(_initial_params(n) + 0.25 * rng.standard_normal(len(starts[0])))
    best = (-math.inf, None)
    for theta0 in starts:
        m0 = -neg_margin(theta0)
        if m0 > best[0]:
            best = (m0, _params_to_q(theta0, n))
        if best[0] >= -PASS_TOL:
            # feasibility is all the bisection needs; skip the polish
            return best
        res = minimize(neg_margin, theta0, method="Nelder-Mead",
                       options={"maxiter": opts.max_iter, "xatol": 1e-8,
                                "fatol": 1e-10, "disp": False})
        m1 = -float(res.fun)
        if m1 > best[0]:
            best = (m1, _params_to_q(res.x, n))
        if best[0] >= -PASS_TOL:
            return best
    return best


def search_certificate(system: PwsSystem, box: Optional[AnalysisBox] = None,
                       opts: Optional[SearchOptions] = None) -> SearchResult:
    """Find the largest certifiable rate by bisection on c, with the metric
    re-optimized at every probed rate. The returned metric is re-checked; a
    SearchResult with ``found=False`` means only that the budgeted search
    failed, not that no certificate exists."""
    opts = opts or SearchOptions()
    rng = np.random.default_rng(opts.seed)
    trace = []
    best: Optional[tuple] = None  # (c, Q)
    try:
        program = _ConditionProgram(system, box)
    except ValueError:
        return SearchResult(False, None, None, [])
    n = system.dimension

    def feasible(c: float) -> bool:
        nonlocal best
        m, Q = _inner_search(program, n, c, opts, rng)
        trace.append((c, m))
        if m >= -PASS_TOL and Q is not None:
            if best is None or c > best[0]:
                best = (c, Q)
            return True
        return False

    lo, hi = opts.c_lo, opts.c_hi
    if feasible(hi):
        lo = hi
    elif not feasible(max(lo, opts.c_tol)):
        # even the smallest positive rate failed: one more sweep downward
        probe = max(lo, opts.c_tol) / 8.0
        if probe <= 0 or not feasible(probe):
            return SearchResult(False, None, None, trace)
        hi = max(lo, opts.c_tol)
        lo = probe
    else:
        lo = max(lo, opts.c_tol)
    while hi - lo > opts.c_tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    c_star, q_star = best
    metric = Metric(q_star, c_star)
    report = _check(system, metric, box)
    if not report.passed:
        # soundness guard: never return a metric whose re-check fails
        return SearchResult(False, None, None, trace)
    return SearchResult(True, metric, report, trace)
