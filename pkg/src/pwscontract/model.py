"""Piecewise-smooth system data model: modes, switching manifolds, topology,
region membership, and config ingestion.

Two topologies are supported. A "chain" has N modes separated by N-1
non-intersecting manifolds, mode 1 on the negative side of the first manifold.
A "planar_cross" is a planar system with two intersecting manifolds and four
modes in the fixed sign order::

    mode 1: H1 > 0, H2 < 0      mode 2: H1 > 0, H2 > 0
    mode 3: H1 < 0, H2 > 0      mode 4: H1 < 0, H2 < 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np

from .measure import Metric

__all__ = [
    "ConfigError",
    "TopologyError",
    "AffineField",
    "Mode",
    "Manifold",
    "AnalysisBox",
    "PwsSystem",
    "RegionLocation",
    "TransversalityReport",
    "IntersectionCheck",
    "load_system",
    "load_system_file",
    "builtin_config_path",
    "locate",
    "check_transversality",
    "check_intersection_assumption",
    "check_box_invariance",
]

TOL_BOUNDARY = 1e-9
TOL_LIE = 1e-10

# planar cross sign table: mode index -> (sign of H1, sign of H2)
_CROSS_SIGNS = {1: (1, -1), 2: (1, 1), 3: (-1, 1), 4: (-1, -1)}


class ConfigError(ValueError):
    """Raised when a config document violates the schema."""


class TopologyError(RuntimeError):
    """Raised when a state's sign pattern matches no region."""


def _vec(v, n: Optional[int] = None, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim != 1:
        raise ConfigError(f"{name} must be a flat vector, got shape {a.shape}")
    if n is not None and a.shape[0] != n:
        raise ConfigError(f"{name} must have length {n}, got {a.shape[0]}")
    return a


@dataclass(frozen=True)
class AffineField:
    """Affine vector field f(x) = A x + b."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"mode matrix must be square, got shape {A.shape}")
        if b.shape != (A.shape[0],):
            raise ConfigError(f"mode offset b has shape {b.shape}, expected ({A.shape[0]},)")
        A = A.copy()
        b = b.copy()
        A.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b


class Mode:
    """One smooth mode of the system: a vector field plus its Jacobian.

    Affine modes evaluate exactly as f(x) = A x + b with constant Jacobian A.
    Smooth modes wrap caller-supplied handles; a finite-difference Jacobian is
    available only behind the explicit ``allow_fd_jacobian`` opt-in.
    """

    def __init__(self, index: int, field_fn: Callable, jacobian_fn: Optional[Callable],
                 affine: Optional[AffineField] = None):
        self.index = int(index)
        self.affine = affine
        self._field = field_fn
        self._jac = jacobian_fn

    @classmethod
    def from_affine(cls, index: int, A, b) -> "Mode":
        aff = AffineField(A, b)
        return cls(index, aff, lambda x, A=aff.A: A, affine=aff)

    @classmethod
    def from_handles(cls, index: int, field_fn: Callable, jacobian_fn: Optional[Callable] = None,
                     allow_fd_jacobian: bool = False) -> "Mode":
        if jacobian_fn is None:
            if not allow_fd_jacobian:
                raise ConfigError(
                    "smooth mode needs a Jacobian handle (or allow_fd_jacobian=True)")
            jacobian_fn = _fd_jacobian(field_fn)
        return cls(index, field_fn, jacobian_fn)

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    def f(self, x) -> np.ndarray:
        return np.asarray(self._field(np.asarray(x, dtype=float)), dtype=float)

    def jac(self, x) -> np.ndarray:
        return np.asarray(self._jac(np.asarray(x, dtype=float)), dtype=float)


def _fd_jacobian(field_fn: Callable) -> Callable:
    # central differences, step 1e-6 * (1 + |x_i|) per coordinate
    def jac(x):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        f0 = np.asarray(field_fn(x), dtype=float)
        J = np.empty((f0.shape[0], n))
        for i in range(n):
            h = 1e-6 * (1.0 + abs(x[i]))
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            J[:, i] = (np.asarray(field_fn(xp)) - np.asarray(field_fn(xm))) / (2.0 * h)
        return J

    return jac


class Manifold:
    """Codimension-one switching manifold {x | H(x) = 0}."""

    def __init__(self, label: str, h_fn: Callable, grad_fn: Callable,
                 affine: Optional[tuple] = None):
        self.label = label
        self.affine = affine  # (c, d) for H(x) = c.x - d
        self._h = h_fn
        self._grad = grad_fn

    @classmethod
    def from_affine(cls, label: str, c, d: float) -> "Manifold":
        c = _vec(c, name=f"manifold {label} normal").copy()
        if not np.any(c):
            raise ConfigError(f"manifold {label} has zero normal vector")
        c.flags.writeable = False
        d = float(d)
        return cls(label, lambda x: float(np.dot(c, x)) - d, lambda x: c, affine=(c, d))

    @classmethod
    def from_handles(cls, label: str, h_fn: Callable, grad_fn: Callable) -> "Manifold":
        return cls(label, h_fn, grad_fn)

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    def h(self, x) -> float:
        return float(self._h(np.asarray(x, dtype=float)))

    def grad(self, x) -> np.ndarray:
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)

    def project(self, x) -> np.ndarray:
        """Nearest-point projection onto {H = 0}; exact for the affine form."""
        x = np.asarray(x, dtype=float)
        if self.affine is not None:
            c, d = self.affine
            return x - c * ((float(np.dot(c, x)) - d) / float(np.dot(c, c)))
        # one damped Newton step along the gradient, repeated
        for _ in range(8):
            hv = self.h(x)
            if abs(hv) < 1e-14:
                break
            g = self.grad(x)
            x = x - g * (hv / float(np.dot(g, g)))
        return x


@dataclass(frozen=True)
class AnalysisBox:
    """Axis-aligned box standing in for the forward-invariant analysis set."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _vec(self.lower, name="box lower").copy()
        up = _vec(self.upper, n=lo.shape[0], name="box upper").copy()
        if not np.all(lo < up):
            raise ConfigError("box lower bound must be strictly below upper bound")
        lo.flags.writeable = False
        up.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def dimension(self) -> int:
        return int(self.lower.shape[0])

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def corners(self) -> np.ndarray:
        n = self.dimension
        out = np.empty((2 ** n, n))
        for k in range(2 ** n):
            for i in range(n):
                out[k, i] = self.upper[i] if (k >> i) & 1 else self.lower[i]
        return out


@dataclass(frozen=True)
class RegionLocation:
    """Where a state sits relative to the switching manifolds."""

    kind: str  # "interior" | "on_manifold"
    mode: Optional[int]
    manifolds: tuple
    h_values: np.ndarray

    @property
    def is_interior(self) -> bool:
        return self.kind == "interior"


class PwsSystem:
    """A piecewise-smooth system: modes, manifolds, topology, analysis box."""

    def __init__(self, dimension: int, topology: str, modes: Sequence[Mode],
                 manifolds: Sequence[Manifold], box: AnalysisBox,
                 metric: Optional[Metric] = None):
        self.dimension = int(dimension)
        self.topology = topology
        self.modes = list(modes)
        self.manifolds = list(manifolds)
        self.box = box
        self.metric = metric
        self._validate()

    def _validate(self):
        if self.topology not in ("chain", "planar_cross"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.box.dimension != self.dimension:
            raise ConfigError("box dimension does not match system dimension")
        if self.topology == "chain":
            if len(self.modes) != len(self.manifolds) + 1:
                raise ConfigError(
                    f"chain needs N modes and N-1 manifolds, got {len(self.modes)} "
                    f"modes and {len(self.manifolds)} manifolds")
        else:
            if self.dimension != 2:
                raise ConfigError("planar_cross topology requires dimension 2")
            if len(self.modes) != 4 or len(self.manifolds) != 2:
                raise ConfigError("planar_cross needs exactly 4 modes and 2 manifolds")
        for k, mode in enumerate(self.modes, start=1):
            if mode.index != k:
                raise ConfigError(f"mode {k} carries index {mode.index}")

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def is_affine(self) -> bool:
        return all(m.is_affine for m in self.modes) and all(
            s.is_affine for s in self.manifolds)

    def mode(self, index: int) -> Mode:
        return self.modes[index - 1]

    def f(self, index: int, x) -> np.ndarray:
        return self.modes[index - 1].f(x)

    def h_values(self, x) -> np.ndarray:
        return np.array([s.h(x) for s in self.manifolds])

    def region_signs(self, mode_index: int) -> tuple:
        """Required sign of each manifold value inside mode ``mode_index``."""
        if self.topology == "chain":
            return tuple(1 if j < mode_index - 1 else -1
                         for j in range(len(self.manifolds)))
        return _CROSS_SIGNS[mode_index]

    def adjacent_modes(self, manifold_idx: int, x) -> tuple:
        """Mode pair (negative side, positive side) at x on the given manifold.

        For a planar cross the pair depends on the side of the other manifold;
        raises TopologyError at the intersection where the pair is ambiguous.
        """
        if self.topology == "chain":
            return manifold_idx + 1, manifold_idx + 2
        other = 1 - manifold_idx
        h_other = self.manifolds[other].h(x)
        if abs(h_other) <= TOL_BOUNDARY:
            raise TopologyError(
                "adjacent mode pair is ambiguous at the manifold intersection")
        if manifold_idx == 0:  # H1 switches; pair ordered by H1 sign
            return (4, 1) if h_other < 0 else (3, 2)
        return (1, 2) if h_other > 0 else (4, 3)

    def manifold_between(self, i: int, j: int) -> int:
        """Manifold index separating modes i and j."""
        if self.topology == "chain":
            if abs(i - j) != 1:
                raise TopologyError(f"modes {i} and {j} are not adjacent in the chain")
            return min(i, j) - 1
        pair = frozenset((i, j))
        table = {frozenset((4, 1)): 0, frozenset((3, 2)): 0,
                 frozenset((1, 2)): 1, frozenset((4, 3)): 1}
        if pair not in table:
            raise TopologyError(f"modes {i} and {j} do not share a manifold")
        return table[pair]


def _mode_from_config(idx: int, entry: dict, n: int) -> Mode:
    if not isinstance(entry, dict) or "A" not in entry or "b" not in entry:
        raise ConfigError(f"mode {idx} must be an object with keys 'A' and 'b'")
    A = np.asarray(entry["A"], dtype=float)
    if A.shape != (n, n):
        raise ConfigError(f"mode {idx} matrix has shape {A.shape}, expected ({n}, {n})")
    b = _vec(entry["b"], n, f"mode {idx} offset")
    return Mode.from_affine(idx, A, b)


def load_system(text: str) -> PwsSystem:
    """Parse a JSON config document into a validated PwsSystem.

    Schema::

        {
          "dimension": n,
          "topology": "chain" | "planar_cross",
          "modes": [{"A": [[...]], "b": [...]}, ...],
          "manifolds": [{"c": [...], "d": <float>, "label": <optional>}, ...],
          "box": {"lower": [...], "upper": [...]},
          "metric": {"Q": [[...]], "c": <float>}        # optional
        }

    Affine data is parsed exactly as written. Only affine modes and affine
    manifolds are accepted from config; smooth handles go through the
    programmatic constructors.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    for key in ("dimension", "topology", "modes", "manifolds", "box"):
        if key not in doc:
            raise ConfigError(f"config is missing required key {key!r}")
    n = doc["dimension"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError("dimension must be a positive integer")
    topology = doc["topology"]
    modes = [_mode_from_config(i, m, n) for i, m in enumerate(doc["modes"], start=1)]
    manifolds = []
    for k, entry in enumerate(doc["manifolds"]):
        if not isinstance(entry, dict) or "c" not in entry or "d" not in entry:
            raise ConfigError(f"manifold {k} must be an object with keys 'c' and 'd'")
        if topology == "chain":
            label = entry.get("label", f"sigma_{k + 1}_{k + 2}")
        else:
            label = entry.get("label", f"sigma_{k + 1}")
        manifolds.append(Manifold.from_affine(label, _vec(entry["c"], n, "manifold normal"),
                                              entry["d"]))
    box_doc = doc["box"]
    if not isinstance(box_doc, dict) or "lower" not in box_doc or "upper" not in box_doc:
        raise ConfigError("box must be an object with keys 'lower' and 'upper'")
    box = AnalysisBox(_vec(box_doc["lower"], n, "box lower"),
                      _vec(box_doc["upper"], n, "box upper"))
    metric = None
    if "metric" in doc:
        mdoc = doc["metric"]
        if not isinstance(mdoc, dict) or "Q" not in mdoc or "c" not in mdoc:
            raise ConfigError("metric must be an object with keys 'Q' and 'c'")
        metric = Metric(np.asarray(mdoc["Q"], dtype=float), float(mdoc["c"]))
    return PwsSystem(n, topology, modes, manifolds, box, metric)


def load_system_file(path) -> PwsSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return load_system(fh.read())


def builtin_config_path(name: str):
    """Path of a packaged config; accepts 'example1' or 'example2'."""
    ref = resources.files("pwscontract").joinpath(f"configs/{name}.json")
    if not ref.is_file():
        raise ConfigError(f"unknown builtin config {name!r}")
    return ref


def locate(system: PwsSystem, x, tol_boundary: float = TOL_BOUNDARY) -> RegionLocation:
    """Classify x as interior to a mode region or on one or more manifolds."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    h = system.h_values(x)
    on = [k for k, v in enumerate(h) if abs(v) <= tol_boundary]
    if on:
        labels = tuple(system.manifolds[k].label for k in on)
        return RegionLocation("on_manifold", None, labels, h)
    if system.topology == "chain":
        if len(h) == 0:
            return RegionLocation("interior", 1, (), h)
        pos = h > 0
        k = int(np.sum(pos))
        # valid chain patterns are monotone: all positives before all negatives
        if not np.all(pos[:k]) or np.any(pos[k:]):
            raise TopologyError(f"sign pattern {np.sign(h)} matches no chain region")
        return RegionLocation("interior", k + 1, (), h)
    signs = (1 if h[0] > 0 else -1, 1 if h[1] > 0 else -1)
    for mode_idx, pattern in _CROSS_SIGNS.items():
        if signs == pattern:
            return RegionLocation("interior", mode_idx, (), h)
    raise TopologyError(f"sign pattern {signs} matches no region")


def _manifold_grid(system: PwsSystem, manifold: Manifold, points_per_axis: int):
    """Mesh of points on {H = 0} inside the analysis box."""
    box = system.box
    n = box.dimension
    if manifold.is_affine:
        c, d = manifold.affine
        pivot = int(np.argmax(np.abs(c)))
        free = [i for i in range(n) if i != pivot]
        axes = [np.linspace(box.lower[i], box.upper[i], points_per_axis) for i in free]
        pts = []
        grids = np.meshgrid(*axes, indexing="ij") if free else []
        flat = [g.ravel() for g in grids]
        count = flat[0].size if flat else 1
        for k in range(count):
            x = np.empty(n)
            for slot, i in enumerate(free):
                x[i] = flat[slot][k]
            x[pivot] = (d - sum(c[i] * x[i] for i in free)) / c[pivot]
            if box.contains(x, tol=1e-12):
                pts.append(x)
        return pts
    # smooth manifold: bracket a root of H along each grid line of the first axis
    from scipy.optimize import brentq

    free = list(range(1, n))
    axes = [np.linspace(box.lower[i], box.upper[i], points_per_axis) for i in free]
    grids = np.meshgrid(*axes, indexing="ij") if free else []
    flat = [g.ravel() for g in grids]
    count = flat[0].size if flat else 1
    pts = []
    for k in range(count):
        x_lo = np.empty(n)
        x_hi = np.empty(n)
        for slot, i in enumerate(free):
            x_lo[i] = x_hi[i] = flat[slot][k]
        x_lo[0], x_hi[0] = box.lower[0], box.upper[0]
        h_lo, h_hi = manifold.h(x_lo), manifold.h(x_hi)
        if h_lo * h_hi > 0:
            continue
        root = brentq(lambda t: manifold.h(np.concatenate(([t], x_lo[1:]))),
                      box.lower[0], box.upper[0], xtol=1e-12)
        pts.append(np.concatenate(([root], x_lo[1:])))
    return pts


@dataclass
class TransversalityReport:
    """Samples on each manifold where both adjacent Lie derivatives vanish."""

    violations: list = field(default_factory=list)
    samples_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def check_transversality(system: PwsSystem, box: Optional[AnalysisBox] = None,
                         points_per_axis: int = 101,
                         tol_lie: float = TOL_LIE) -> TransversalityReport:
    """Sampled check that on every manifold at least one adjacent Lie
    derivative is nonzero (transversal switching data)."""
    if points_per_axis < 2:
        raise ValueError("grid needs at least 2 points per axis")
    if box is not None:
        system = PwsSystem(system.dimension, system.topology, system.modes,
                           system.manifolds, box, system.metric)
    report = TransversalityReport()
    for k, manifold in enumerate(system.manifolds):
        for x in _manifold_grid(system, manifold, points_per_axis):
            try:
                i, j = system.adjacent_modes(k, x)
            except TopologyError:
                continue  # intersection point: pair ambiguous, skip sample
            g = manifold.grad(x)
            si = float(np.dot(g, system.f(i, x)))
            sj = float(np.dot(g, system.f(j, x)))
            report.samples_checked += 1
            if abs(si) <= tol_lie and abs(sj) <= tol_lie:
                report.violations.append((manifold.label, x.copy(), si, sj))
    return report


@dataclass(frozen=True)
class IntersectionCheck:
    """Outcome of the common-crossing-sector test at the manifold intersection."""

    ok: bool
    sector: Optional[int]
    x_tilde: np.ndarray
    lie_values: np.ndarray  # shape (4, 2): sigma of each mode against H1, H2
    detail: str = ""


def check_intersection_assumption(system: PwsSystem,
                                  tol_lie: float = TOL_LIE) -> IntersectionCheck:
    """Check that all four fields at the intersection point push strictly into
    one common sector (vertex test on the convex hull of the field values).

    Returns the sector's mode index when the check passes. Raises for systems
    that are not planar crosses, and when the intersection is not a unique
    point inside the analysis box or a Lie derivative vanishes there.
    """
    if system.topology != "planar_cross":
        raise TopologyError("intersection check applies to planar_cross systems")
    m1, m2 = system.manifolds
    if not (m1.is_affine and m2.is_affine):
        raise ConfigError("intersection solving requires affine manifolds")
    c1, d1 = m1.affine
    c2, d2 = m2.affine
    M = np.vstack([c1, c2])
    if abs(np.linalg.det(M)) < 1e-14:
        raise TopologyError("manifolds have no unique intersection point")
    x_tilde = np.linalg.solve(M, np.array([d1, d2]))
    if not system.box.contains(x_tilde, tol=1e-12):
        raise TopologyError("manifold intersection lies outside the analysis box")
    sig = np.empty((4, 2))
    for k in range(4):
        fk = system.f(k + 1, x_tilde)
        sig[k, 0] = float(np.dot(c1, fk))
        sig[k, 1] = float(np.dot(c2, fk))
    if np.any(np.abs(sig) <= tol_lie):
        raise TopologyError(
            "a Lie derivative vanishes at the intersection; the common-sector "
            "test is undecidable")
    s1 = np.sign(sig[:, 0])
    s2 = np.sign(sig[:, 1])
    if not (np.all(s1 == s1[0]) and np.all(s2 == s2[0])):
        return IntersectionCheck(False, None, x_tilde, sig,
                                 "field directions disagree at the intersection")
    target = (int(s1[0]), int(s2[0]))
    sector = next(m for m, pattern in _CROSS_SIGNS.items() if pattern == target)
    return IntersectionCheck(True, sector, x_tilde, sig,
                             f"all fields enter mode {sector}")


def check_box_invariance(system: PwsSystem, points_per_face: int = 21) -> list:
    """Diagnostic only: sample the box boundary and report outward-pointing
    flow samples (the box is asserted forward invariant by the user)."""
    box = system.box
    n = box.dimension
    bad = []
    axes = [np.linspace(box.lower[i], box.upper[i], points_per_face) for i in range(n)]
    for face_axis in range(n):
        for side, bound in ((-1, box.lower[face_axis]), (1, box.upper[face_axis])):
            others = [axes[i] for i in range(n) if i != face_axis]
            grids = np.meshgrid(*others, indexing="ij") if others else []
            flat = [g.ravel() for g in grids]
            count = flat[0].size if flat else 1
            for k in range(count):
                x = np.empty(n)
                slot = 0
                for i in range(n):
                    if i == face_axis:
                        x[i] = bound
                    else:
                        x[i] = flat[slot][k]
                        slot += 1
                try:
                    loc = locate(system, x)
                except TopologyError:
                    continue
                if not loc.is_interior:
                    continue
                outward = side * system.f(loc.mode, x)[face_axis]
                if outward > 0:
                    bad.append((x.copy(), face_axis, side, float(outward)))
    return bad
