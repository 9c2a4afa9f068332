"""Contraction certificate checks for a given metric over the analysis box,
plus the empirical pairwise decay test.

The limit checkers quantify the flow conditions mu_Q(df_i/dx) <= -c over the
closed mode regions and the manifold (jump) conditions over the switching
manifolds; the regularized checkers quantify the same data over band-inflated
regions. For affine data every quantified matrix is affine in x, so worst
cases are attained at polytope vertices (mu_Q is convex); the vertex strategy
evaluates only there. The grid strategy meshes each domain instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measure import Metric
from .model import AnalysisBox, PwsSystem, check_intersection_assumption
from .filippov import SolverOptions, integrate
from .model import _manifold_grid  # shared manifold meshing

__all__ = [
    "CertificateError",
    "ConditionResult",
    "CertificateReport",
    "PairwiseReport",
    "check_chain_certificate",
    "check_cross_certificate",
    "check_regularized_chain",
    "check_regularized_cross",
    "pairwise_contraction_test",
]

TOL_ZERO = 1e-9  # allowance for mu-conditions whose exact bound is 0
TOL_EQ = 1e-9  # allowance for the intersection equality residual
PASS_TOL = 1e-12
GRID_MANIFOLD = 41
GRID_REGION = 21


class CertificateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConditionResult:
    cond_id: str
    kind: str  # "flow" | "jump" | "equality"
    domain: str
    worst: float
    bound: float
    margin: float
    point: Optional[tuple]
    method: str

    def strict_margin(self) -> float:
        """Margin against the exact bound, without the floating-point allowance."""
        if self.kind == "flow":
            return self.margin
        return self.margin - (TOL_EQ if self.kind == "equality" else TOL_ZERO)


@dataclass
class CertificateReport:
    metric: Metric
    conditions: list
    strategy: str
    rate: float
    notes: str = ""

    @property
    def min_margin(self) -> float:
        return min((c.margin for c in self.conditions), default=math.inf)

    @property
    def passed(self) -> bool:
        return self.min_margin >= -PASS_TOL

    def condition(self, cond_id: str) -> ConditionResult:
        for c in self.conditions:
            if c.cond_id == cond_id:
                return c
        raise KeyError(cond_id)

    def to_dict(self) -> dict:
        return {
            "verdict": "pass" if self.passed else "fail",
            "rate": self.rate,
            "strategy": self.strategy,
            "metric": {"Q": self.metric.Q.tolist(), "c": self.metric.c},
            "notes": self.notes,
            "conditions": [
                {
                    "id": c.cond_id,
                    "domain": c.domain,
                    "worst": c.worst,
                    "margin": c.margin,
                    "point": None if c.point is None else list(c.point),
                    "method": c.method,
                }
                for c in self.conditions
            ],
        }


# ---------------------------------------------------------------------------
# polytope vertex enumeration (affine data only)


def _dedupe(points, tol=1e-9):
    out = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    return out


def _hyperplane_box_vertices(c, d, box: AnalysisBox, tol=1e-9):
    """Vertices of {x in box : c.x = d}: box-edge intersections and box
    corners lying on the plane. Works in any dimension."""
    c = np.asarray(c, dtype=float)
    n = box.dimension
    corners = box.corners()
    hv = corners @ c - d
    pts = [corners[k].copy() for k in range(len(corners)) if abs(hv[k]) <= tol]
    for k in range(len(corners)):
        for a in range(n):
            if (k >> a) & 1:
                continue
            k2 = k | (1 << a)
            h0, h1 = hv[k], hv[k2]
            if h0 * h1 < 0:
                t = h0 / (h0 - h1)
                p = corners[k].copy()
                p[a] += t * (corners[k2][a] - corners[k][a])
                pts.append(p)
    return _dedupe(pts)


def _slab_box_vertices(c, d, eps, box: AnalysisBox, tol=1e-9):
    """Vertices of {x in box : |c.x - d| <= eps}."""
    pts = _hyperplane_box_vertices(c, d + eps, box, tol)
    pts += _hyperplane_box_vertices(c, d - eps, box, tol)
    for corner in box.corners():
        if abs(float(np.dot(c, corner)) - d) <= eps + tol:
            pts.append(corner.copy())
    return _dedupe(pts)


def _polytope_vertices_2d(eqs, ineqs, box: AnalysisBox, tol=1e-9):
    """Vertices of a planar polytope given by equalities a.x = b, inequalities
    a.x <= b, and the box."""
    lines = [(np.asarray(a, dtype=float), float(b)) for a, b in eqs]
    cons = [(np.asarray(a, dtype=float), float(b)) for a, b in ineqs]
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        cons.append((e.copy(), float(box.upper[i])))
        cons.append((-e, float(-box.lower[i])))
    boundaries = lines + cons
    pts = []
    for i in range(len(boundaries)):
        for j in range(i + 1, len(boundaries)):
            M = np.vstack([boundaries[i][0], boundaries[j][0]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            p = np.linalg.solve(M, np.array([boundaries[i][1], boundaries[j][1]]))
            ok = all(abs(float(np.dot(a, p)) - b) <= tol for a, b in lines) and \
                all(float(np.dot(a, p)) <= b + tol for a, b in cons)
            if ok:
                pts.append(p)
    return _dedupe(pts)


# ---------------------------------------------------------------------------
# condition evaluation


def _mu_worst(metric: Metric, matfun: Callable, points) -> tuple:
    worst = -math.inf
    arg = None
    for x in points:
        v = metric.measure(matfun(x))
        if v > worst:
            worst, arg = v, np.asarray(x, dtype=float)
    return worst, arg


def _flow_condition(system, metric, box, i, domain, strategy, inflate=None):
    mode = system.modes[i - 1]
    c = metric.c
    if mode.is_affine:
        worst = metric.measure(mode.affine.A)
        return ConditionResult(f"flow[{i}]", "flow", domain, worst, -c,
                               -c - worst, None, "vertex (constant)")
    if strategy == "vertex":
        raise CertificateError("vertex strategy requires affine data")
    pts = _region_mesh(system, box, i, inflate)
    worst, arg = _mu_worst(metric, mode.jac, pts)
    return ConditionResult(f"flow[{i}]", "flow", domain, worst, -c, -c - worst,
                           None if arg is None else tuple(arg), f"grid({GRID_REGION})")


def _region_mesh(system, box, i, inflate):
    axes = [np.linspace(box.lower[k], box.upper[k], GRID_REGION)
            for k in range(box.dimension)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    signs = system.region_signs(i)
    keep = []
    for x in pts:
        ok = True
        for j, s in enumerate(signs):
            slack = 1e-12 + (inflate(i, j) if inflate else 0.0)
            if s * system.manifolds[j].h(x) < -slack:
                ok = False
                break
        if ok:
            keep.append(x)
    return keep


def _jump_condition(system, metric, box, cond_id, domain, matfun, points_vertex,
                    strategy, manifold_idx=None, extra_filter=None):
    if strategy == "vertex":
        if not system.is_affine:
            raise CertificateError("vertex strategy requires affine data")
        pts = points_vertex()
        method = "vertex"
    else:
        pts = _manifold_grid(system, system.manifolds[manifold_idx], GRID_MANIFOLD)
        if extra_filter is not None:
            pts = [p for p in pts if extra_filter(p)]
        method = f"grid({GRID_MANIFOLD})"
    worst, arg = _mu_worst(metric, matfun, pts)
    return ConditionResult(cond_id, "jump", domain, worst, TOL_ZERO,
                           TOL_ZERO - worst,
                           None if arg is None else tuple(arg), method)


def _require_metric(system: PwsSystem, metric: Metric):
    if metric.dimension != system.dimension:
        raise CertificateError("metric dimension does not match the system")


# ---------------------------------------------------------------------------
# chain checkers


def check_chain_certificate(system: PwsSystem, metric: Metric,
                            box: Optional[AnalysisBox] = None,
                            strategy: str = "vertex") -> CertificateReport:
    """Limit conditions for a chain: contracting flow in every closed mode
    region and nonpositive measure of the field-jump rank-one matrix on every
    manifold inside the box."""
    if system.topology != "chain":
        raise CertificateError("chain certificate needs a chain system")
    _require_metric(system, metric)
    box = box or system.box
    conds = [
        _flow_condition(system, metric, box, i,
                        f"closure(S_{i}) in box", strategy)
        for i in range(1, system.n_modes + 1)
    ]
    for k, man in enumerate(system.manifolds):
        i, j = k + 1, k + 2

        def matfun(x, i=i, j=j, man=man):
            return np.outer(system.f(j, x) - system.f(i, x), man.grad(x))

        conds.append(_jump_condition(
            system, metric, box, f"jump[{k + 1}]",
            f"{man.label} in box", matfun,
            lambda man=man: _hyperplane_box_vertices(*man.affine, box),
            strategy, manifold_idx=k))
    return CertificateReport(metric, conds, strategy, metric.c)


def check_regularized_chain(system: PwsSystem, metric: Metric, eps: float,
                            box: Optional[AnalysisBox] = None,
                            strategy: str = "vertex") -> CertificateReport:
    """Band-inflated conditions for the regularized chain: flow conditions
    over each mode region united with the closures of its adjacent bands, and
    jump conditions over the closed bands."""
    if system.topology != "chain":
        raise CertificateError("chain certificate needs a chain system")
    _require_metric(system, metric)
    if eps <= 0:
        raise CertificateError("eps must be positive")
    box = box or system.box
    if not _chain_bands_disjoint(system, eps, box):
        raise CertificateError("bands intersect - chain regularization invalid")

    def inflate(i, j):
        return eps if j in (i - 2, i - 1) else 0.0

    conds = [
        _flow_condition(system, metric, box, i,
                        f"closure(S_{i}) + adjacent {eps}-bands in box",
                        strategy, inflate=inflate)
        for i in range(1, system.n_modes + 1)
    ]
    for k, man in enumerate(system.manifolds):
        i, j = k + 1, k + 2

        def matfun(x, i=i, j=j, man=man):
            return np.outer(system.f(j, x) - system.f(i, x), man.grad(x))

        conds.append(_jump_condition(
            system, metric, box, f"jump[{k + 1}]",
            f"closed {eps}-band of {man.label} in box", matfun,
            lambda man=man: _slab_box_vertices(man.affine[0], man.affine[1], eps, box),
            strategy, manifold_idx=k))
    return CertificateReport(metric, conds, strategy, metric.c,
                             notes=f"band half-width eps={eps}")


def _chain_bands_disjoint(system: PwsSystem, eps: float,
                          box: AnalysisBox) -> bool:
    """No two consecutive bands may meet inside the box (affine data: exact
    via slab vertices)."""
    if not system.is_affine:
        raise CertificateError("band disjointness check requires affine manifolds")
    for k in range(len(system.manifolds) - 1):
        c0, d0 = system.manifolds[k].affine
        c1, d1 = system.manifolds[k + 1].affine
        verts0 = _slab_box_vertices(c0, d0, eps, box)
        verts1 = _slab_box_vertices(c1, d1, eps, box)
        if not verts0 or not verts1:
            continue
        # next manifold value must stay below -eps on band k, and the previous
        # manifold value above +eps on band k+1
        if max(float(np.dot(c1, v)) - d1 for v in verts0) >= -eps:
            return False
        if min(float(np.dot(c0, v)) - d0 for v in verts1) <= eps:
            return False
    return True


# ---------------------------------------------------------------------------
# planar cross checkers


def _cross_combo(system, signs):
    """x -> sum_k signs[k] * f_k(x) for the four cross modes."""

    def combo(x):
        out = np.zeros(2)
        for k, s in enumerate(signs):
            if s:
                out += s * system.f(k + 1, x)
        return out

    return combo


_COMBO_FULL_1 = (1, 1, -1, -1)  # f1 + f2 - f3 - f4
_COMBO_FULL_2 = (-1, 1, 1, -1)  # f2 + f3 - f1 - f4
_COMBO_DIAG = (-1, 1, -1, 1)  # f2 + f4 - f1 - f3


def check_cross_certificate(system: PwsSystem, metric: Metric,
                            box: Optional[AnalysisBox] = None,
                            strategy: str = "vertex") -> CertificateReport:
    """Limit conditions for a planar cross: contracting flow in the four
    closed quadrant regions, jump conditions on each full manifold, the four
    half-manifold diagonal conditions, and the field-sum equality at the
    intersection point."""
    if system.topology != "planar_cross":
        raise CertificateError("cross certificate needs a planar_cross system")
    _require_metric(system, metric)
    box = box or system.box
    chk = check_intersection_assumption(system)
    if not chk.ok:
        raise CertificateError(
            f"common-sector assumption fails at the intersection: {chk.detail}")
    x_tilde = chk.x_tilde
    m1, m2 = system.manifolds
    g1 = lambda x: m1.grad(x)
    g2 = lambda x: m2.grad(x)

    conds = [
        _flow_condition(system, metric, box, i,
                        f"closure(S_{i}) in box", strategy)
        for i in (1, 2, 3, 4)
    ]

    full1 = _cross_combo(system, _COMBO_FULL_1)
    full2 = _cross_combo(system, _COMBO_FULL_2)
    diag = _cross_combo(system, _COMBO_DIAG)
    neg_diag = _cross_combo(system, tuple(-s for s in _COMBO_DIAG))

    conds.append(_jump_condition(
        system, metric, box, "manifold[1]", f"{m1.label} in box",
        lambda x: np.outer(full1(x), g1(x)),
        lambda: _hyperplane_box_vertices(*m1.affine, box),
        strategy, manifold_idx=0))
    conds.append(_jump_condition(
        system, metric, box, "manifold[2]", f"{m2.label} in box",
        lambda x: np.outer(full2(x), g2(x)),
        lambda: _hyperplane_box_vertices(*m2.affine, box),
        strategy, manifold_idx=1))

    half_specs = [
        ("half[1,+]", 0, m2, 1, diag, g1, f"{m1.label} with {m2.label}>0"),
        ("half[1,-]", 0, m2, -1, neg_diag, g1, f"{m1.label} with {m2.label}<0"),
        ("half[2,+]", 1, m1, 1, diag, g2, f"{m2.label} with {m1.label}>0"),
        ("half[2,-]", 1, m1, -1, neg_diag, g2, f"{m2.label} with {m1.label}<0"),
    ]
    for cond_id, man_idx, other, side, combo, grad, domain in half_specs:
        man = system.manifolds[man_idx]
        oc, od = other.affine

        def vertex_pts(man=man, oc=oc, od=od, side=side):
            return _polytope_vertices_2d(
                [man.affine], [((-side) * oc, (-side) * od)], box)

        conds.append(_jump_condition(
            system, metric, box, cond_id, domain,
            lambda x, combo=combo, grad=grad: np.outer(combo(x), grad(x)),
            vertex_pts, strategy, manifold_idx=man_idx,
            extra_filter=lambda p, oc=oc, od=od, side=side:
                side * (float(np.dot(oc, p)) - od) >= -1e-12))

    residual = float(np.linalg.norm(diag(x_tilde)))
    conds.append(ConditionResult(
        "intersection-eq", "equality", f"x_tilde={tuple(x_tilde)}",
        residual, TOL_EQ, TOL_EQ - residual, tuple(x_tilde), "point"))
    return CertificateReport(metric, conds, strategy, metric.c,
                             notes=f"certified crossing sector S_{chk.sector}")


def check_regularized_cross(system: PwsSystem, metric: Metric, eps: float,
                            box: Optional[AnalysisBox] = None,
                            strategy: str = "vertex") -> CertificateReport:
    """Band-inflated conditions for the regularized cross: flow conditions on
    the four inflated quadrants, jump conditions on the two closed bands, the
    diagonal conditions on the four band arms outside the central square, and
    the field-sum equality over the whole closed central square."""
    if system.topology != "planar_cross":
        raise CertificateError("cross certificate needs a planar_cross system")
    _require_metric(system, metric)
    if eps <= 0:
        raise CertificateError("eps must be positive")
    if strategy != "vertex" or not system.is_affine:
        raise CertificateError(
            "the regularized cross checker evaluates affine data by vertices")
    box = box or system.box
    chk = check_intersection_assumption(system)
    if not chk.ok:
        raise CertificateError(
            f"common-sector assumption fails at the intersection: {chk.detail}")
    m1, m2 = system.manifolds
    c1, d1 = m1.affine
    c2, d2 = m2.affine
    c = metric.c

    # flow domains of the inflated quadrants: sign pattern relaxed by eps
    quad_ineqs = {
        1: [(-c1, -(d1 - eps)), (c2, d2 + eps)],   # H1 >= -eps, H2 <= eps
        2: [(-c1, -(d1 - eps)), (-c2, -(d2 - eps))],
        3: [(c1, d1 + eps), (-c2, -(d2 - eps))],
        4: [(c1, d1 + eps), (c2, d2 + eps)],
    }
    conds = []
    for i in (1, 2, 3, 4):
        worst = metric.measure(system.modes[i - 1].affine.A)
        conds.append(ConditionResult(
            f"flow[{i}]", "flow", f"{eps}-inflated quadrant of S_{i} in box",
            worst, -c, -c - worst, None, "vertex (constant)"))

    full1 = _cross_combo(system, _COMBO_FULL_1)
    full2 = _cross_combo(system, _COMBO_FULL_2)
    diag = _cross_combo(system, _COMBO_DIAG)
    neg_diag = _cross_combo(system, tuple(-s for s in _COMBO_DIAG))
    g1 = lambda x: m1.grad(x)
    g2 = lambda x: m2.grad(x)

    def add_mu(cond_id, domain, matfun, pts):
        worst, arg = _mu_worst(metric, matfun, pts)
        conds.append(ConditionResult(
            cond_id, "jump", domain, worst, TOL_ZERO, TOL_ZERO - worst,
            None if arg is None else tuple(arg), "vertex"))

    add_mu("band[1]", f"closed {eps}-band of {m1.label}",
           lambda x: np.outer(full1(x), g1(x)),
           _slab_box_vertices(c1, d1, eps, box))
    add_mu("band[2]", f"closed {eps}-band of {m2.label}",
           lambda x: np.outer(full2(x), g2(x)),
           _slab_box_vertices(c2, d2, eps, box))

    band1 = [(c1, d1 + eps), (-c1, -(d1 - eps))]  # |H1| <= eps
    band2 = [(c2, d2 + eps), (-c2, -(d2 - eps))]  # |H2| <= eps
    arm_specs = [
        ("region[6]", band1 + [(-c2, -(d2 + eps))],  # |H1|<=eps, H2 >= eps
         lambda x: np.outer(diag(x), g1(x)),
         f"{m1.label}-band arm with {m2.label}>= {eps}"),
        ("region[4]", band1 + [(c2, d2 - eps)],  # |H1|<=eps, H2 <= -eps
         lambda x: np.outer(neg_diag(x), g1(x)),
         f"{m1.label}-band arm with {m2.label}<= -{eps}"),
        ("region[2]", band2 + [(-c1, -(d1 + eps))],  # |H2|<=eps, H1 >= eps
         lambda x: np.outer(diag(x), g2(x)),
         f"{m2.label}-band arm with {m1.label}>= {eps}"),
        ("region[8]", band2 + [(c1, d1 - eps)],  # |H2|<=eps, H1 <= -eps
         lambda x: np.outer(neg_diag(x), g2(x)),
         f"{m2.label}-band arm with {m1.label}<= -{eps}"),
    ]
    for cond_id, ineqs, matfun, domain in arm_specs:
        add_mu(cond_id, domain, matfun, _polytope_vertices_2d([], ineqs, box))

    square = _polytope_vertices_2d([], band1 + band2, box)
    residual = max((float(np.linalg.norm(diag(p))) for p in square),
                   default=0.0)
    worst_pt = max(square, key=lambda p: float(np.linalg.norm(diag(p))),
                   default=None)
    conds.append(ConditionResult(
        "square-eq", "equality", f"closed central square, half-width {eps}",
        residual, TOL_EQ, TOL_EQ - residual,
        None if worst_pt is None else tuple(worst_pt), "vertex"))
    return CertificateReport(metric, conds, "vertex", metric.c,
                             notes=f"band half-width eps={eps}")


# ---------------------------------------------------------------------------
# empirical pairwise decay test


@dataclass
class PairwiseReport:
    entries: list  # dicts per pair
    tol_decay: float
    metric: Metric

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "verdict": "pass" if self.passed else "fail",
            "tol_decay": self.tol_decay,
            "metric": {"Q": self.metric.Q.tolist(), "c": self.metric.c},
            "pairs": self.entries,
        }


def pairwise_contraction_test(system: PwsSystem, metric: Metric, pairs,
                              t_f: float, opts: Optional[SolverOptions] = None,
                              tol_decay: float = 1e-2) -> PairwiseReport:
    """Integrate trajectory pairs and verify that the Q-weighted separation
    decays at the certified rate between every ordered grid time pair:
    d(t) <= exp(-c (t - s)) d(s) (1 + tol_decay) for all s < t.

    The reported ``alpha`` is cond(Q) * max_t d(t) e^{c t} / d(0), an
    admissible constant for the plain Euclidean decay bound.
    """
    opts = opts or SolverOptions()
    c = metric.c
    entries = []
    cond_q = metric.cond()
    log_allow = math.log1p(tol_decay)
    for xa0, xb0 in pairs:
        ta = integrate(system, xa0, t_f, opts)
        tb = integrate(system, xb0, t_f, opts)
        tg_a, xs_a = ta.grid_samples(opts.step)
        tg_b, xs_b = tb.grid_samples(opts.step)
        m = min(len(tg_a), len(tg_b))
        d = np.linalg.norm((xs_a[:m] - xs_b[:m]) @ metric.Q.T, axis=1)
        entry = {"xa0": list(np.asarray(xa0, dtype=float)),
                 "xb0": list(np.asarray(xb0, dtype=float))}
        if d[0] <= 0.0:
            entry.update(passed=bool(np.all(d <= 1e-12)), alpha=1.0,
                         max_log_ratio=-math.inf, worst_violation=0.0)
            entries.append(entry)
            continue
        with np.errstate(divide="ignore"):
            g = np.log(d) + c * tg_a[:m]
        run_min = np.minimum.accumulate(g)
        worst = float(np.max(g - run_min))
        entry.update(
            passed=bool(worst <= log_allow),
            worst_violation=worst,
            max_log_ratio=float(np.max(g) - g[0]),
            alpha=float(cond_q * np.max(d * np.exp(c * tg_a[:m])) / d[0]),
        )
        entries.append(entry)
    return PairwiseReport(entries, tol_decay, metric)
