"""Finite-dimensional set primitives: boxes, H-polytopes and V-representations.

All sets are immutable. LP-backed operations use HiGHS through
``scipy.optimize.linprog`` and distinguish infeasible from unbounded.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

DEFAULT_TOL = 1e-7
VERTEX_CAP = 12


class GeometryError(Exception):
    pass


class Unbounded(GeometryError):
    pass


class Empty(GeometryError):
    pass


class DimensionCap(GeometryError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``{c + diag(2h) y : ||y||_inf <= 1/2}``."""

    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = _frozen(np.atleast_1d(self.center))
        h = _frozen(np.atleast_1d(self.half_widths))
        if c.shape != h.shape or c.ndim != 1:
            raise ValueError("center and half_widths must be vectors of equal length")
        if np.any(h < 0):
            raise ValueError("half_widths must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", h)

    @classmethod
    def from_bounds(cls, lower, upper) -> "Box":
        lo, hi = np.asarray(lower, float), np.asarray(upper, float)
        return cls((lo + hi) / 2, (hi - lo) / 2)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_widths

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_widths

    def volume(self) -> float:
        return float(np.prod(2 * self.half_widths))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, float)
        return bool(np.all(np.abs(x - self.center) <= self.half_widths + tol))

    def is_subset_of(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def to_hpolytope(self) -> "HPolytope":
        eye = np.eye(self.dim)
        return HPolytope(np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]))

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "half_widths": self.half_widths.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(d["center"], d["half_widths"])


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Region ``{x : normals @ x <= offsets}``; may be empty or unbounded."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        a = np.array(self.normals, dtype=float)
        b = np.atleast_1d(np.array(self.offsets, dtype=float))
        if a.ndim == 1:
            a = a.reshape(1, -1) if b.size == 1 else a.reshape(b.size, -1)
        if a.shape[0] != b.size:
            raise ValueError("row count of normals must equal length of offsets")
        object.__setattr__(self, "normals", _frozen(a))
        object.__setattr__(self, "offsets", _frozen(b))

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def n_rows(self) -> int:
        return self.offsets.size

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.normals @ np.asarray(x, float) <= self.offsets + tol))

    def intersect(self, other: "HPolytope") -> "HPolytope":
        return HPolytope(np.vstack([self.normals, other.normals]),
                         np.concatenate([self.offsets, other.offsets]))

    def to_dict(self) -> dict:
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HPolytope":
        normals = np.asarray(d["normals"], float)
        offsets = np.asarray(d["offsets"], float)
        if normals.size == 0:
            normals = normals.reshape(0, int(d.get("dim", 0)))
        return cls(normals, offsets)


@dataclass(frozen=True, eq=False)
class VrepSet:
    """Convex hull of finitely many points (rows of ``points``)."""

    points: np.ndarray = field()

    def __post_init__(self):
        p = np.array(self.points, dtype=float)
        if p.ndim == 1:
            p = p.reshape(1, -1)
        if p.shape[0] == 0:
            raise ValueError("VrepSet must be nonempty")
        object.__setattr__(self, "points", _frozen(p))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_dict(self) -> dict:
        return {"points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VrepSet":
        return cls(d["points"])


def support(s: Box | HPolytope, direction) -> float:
    """Maximum of ``direction @ x`` over the set."""
    d = np.asarray(direction, float)
    if isinstance(s, Box):
        return float(d @ s.center + np.abs(d) @ s.half_widths)
    res = linprog(-d, A_ub=s.normals, b_ub=s.offsets, bounds=(None, None), method="highs")
    if res.status == 2:
        raise Empty("polytope is empty")
    if res.status == 3:
        raise Unbounded("support is unbounded in this direction")
    if res.status != 0:
        raise GeometryError(f"LP failed: {res.message}")
    return float(-res.fun)


def support_many(s: Box | HPolytope, directions) -> np.ndarray:
    """Row-wise support for a matrix of directions."""
    d = np.atleast_2d(np.asarray(directions, float))
    if isinstance(s, Box):
        return d @ s.center + np.abs(d) @ s.half_widths
    return np.array([support(s, row) for row in d])


def box_vertices(b: Box, cap: int = VERTEX_CAP) -> np.ndarray:
    """All ``2**d`` corners in lexicographic sign order (minus before plus)."""
    if b.dim > cap:
        raise DimensionCap(f"box dimension {b.dim} exceeds vertex cap {cap}")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=b.dim))).reshape(-1, b.dim)
    return b.center + signs * b.half_widths


def hpolytope_vertices(p: HPolytope, interior_point=None) -> np.ndarray:
    """Vertices of a bounded full-dimensional H-polytope (qhull halfspace intersection)."""
    from scipy.spatial import HalfspaceIntersection

    if p.dim == 1:
        lo = -support(p, [-1.0])
        hi = support(p, [1.0])
        return np.array([[lo], [hi]]) if hi > lo else np.array([[lo]])
    if interior_point is None:
        interior_point = chebyshev_center(p)[0]
    from scipy.spatial import QhullError

    hs = np.hstack([p.normals, -p.offsets[:, None]])
    ip = np.asarray(interior_point, float)
    try:
        verts = HalfspaceIntersection(hs, ip).intersections
    except QhullError:
        # nearly degenerate facets: let qhull tolerate wide merges
        verts = HalfspaceIntersection(hs, ip, qhull_options="Qx Q12").intersections
    return np.unique(np.round(verts, 12), axis=0)


def chebyshev_center(p: HPolytope) -> tuple[np.ndarray, float]:
    norms = np.linalg.norm(p.normals, axis=1)
    c = np.zeros(p.dim + 1)
    c[-1] = -1.0
    a = np.hstack([p.normals, norms[:, None]])
    res = linprog(c, A_ub=a, b_ub=p.offsets, bounds=[(None, None)] * p.dim + [(0, None)],
                  method="highs")
    if res.status == 2:
        raise Empty("polytope is empty")
    if res.status == 3:
        raise Unbounded("polytope is unbounded")
    return res.x[:-1], float(res.x[-1])


def vrep_contains(s: VrepSet, point, tol: float = DEFAULT_TOL,
                  certificate: bool = False):
    """Convex-hull membership by LP feasibility.

    With ``certificate=True`` returns ``(inside, weights)``; weights is None
    when the point is outside.
    """
    x = np.asarray(point, float)
    if x.size != s.dim:
        raise ValueError("point dimension does not match set dimension")
    pts = s.points
    k = len(pts)
    a_ub = np.vstack([pts.T, -pts.T])
    b_ub = np.concatenate([x + tol, -x + tol])
    res = linprog(np.zeros(k), A_ub=a_ub, b_ub=b_ub, A_eq=np.ones((1, k)), b_eq=[1.0],
                  bounds=(0, None), method="highs")
    inside = res.status == 0
    if certificate:
        return inside, (np.clip(res.x, 0, None) if inside else None)
    return inside


def _certain_vertices(pts: np.ndarray, rng: np.random.Generator, n_dirs: int = 64) -> np.ndarray:
    """Mask of points that are unique strict maximizers along some probe direction."""
    d = pts.shape[1]
    mask = np.zeros(len(pts), bool)
    if len(pts) == 1:
        mask[0] = True
        return mask
    # whitening maps strict maximizers to strict maximizers
    spread = pts.std(axis=0)
    # flat coordinates carry only rounding noise; scaling them up would invent maximizers
    spread[spread <= 1e-9 * max(1.0, spread.max())] = 1.0
    pts = (pts - pts.mean(axis=0)) / spread
    dirs = np.vstack([np.eye(d), -np.eye(d), rng.standard_normal((n_dirs, d)), pts])
    for chunk in np.array_split(dirs, max(1, len(dirs) // 256)):
        scores = pts @ chunk.T
        top = np.argmax(scores, axis=0)
        srt = np.sort(scores, axis=0)
        gap = srt[-1] - srt[-2]
        strict = gap > 1e-9 * (1.0 + np.abs(srt[-1]))
        mask[top[strict]] = True
    return mask


_LOCAL_HULL = 150


def prune_vrep(s: VrepSet, tol: float = DEFAULT_TOL, return_index: bool = False):
    """Drop points that lie in the hull of the remaining ones.

    Exact duplicates collapse first; points that are strict maximizers along a
    probe direction are kept without an LP. Other points are first tested
    against a small hull (nearest survivors plus known vertices), which
    proves redundancy cheaply, and only then against all survivors.
    """
    pts = s.points
    _, first = np.unique(np.round(pts, 12), axis=0, return_index=True)
    keep = np.zeros(len(pts), bool)
    keep[np.sort(first)] = True
    if keep.sum() <= 1:
        idx = np.flatnonzero(keep)
        out = VrepSet(pts[idx])
        return (out, idx) if return_index else out
    rng = np.random.default_rng(0)
    sure = np.zeros(len(pts), bool)
    cand = np.flatnonzero(keep)
    n_dirs = int(min(4096, max(64, 2 * len(cand))))
    sure[cand[_certain_vertices(pts[cand], rng, n_dirs)]] = True
    for i in cand:
        if sure[i]:
            continue
        others = keep.copy()
        others[i] = False
        pool = np.flatnonzero(others)
        if len(pool) > 2 * _LOCAL_HULL:
            dist = np.linalg.norm(pts[pool] - pts[i], axis=1)
            near = pool[np.argpartition(dist, _LOCAL_HULL)[:_LOCAL_HULL]]
            local = np.union1d(near, np.flatnonzero(sure & others))
            if vrep_contains(VrepSet(pts[local]), pts[i], tol):
                keep[i] = False
                continue
        if vrep_contains(VrepSet(pts[pool]), pts[i], tol):
            keep[i] = False
    idx = np.flatnonzero(keep)
    out = VrepSet(pts[idx])
    return (out, idx) if return_index else out


def remove_redundant_rows(p: HPolytope, tol: float = 1e-9) -> HPolytope:
    """Drop inequalities implied by the others (one LP per row)."""
    a, b = np.array(p.normals), np.array(p.offsets)
    # normalize and deduplicate first
    scale = np.linalg.norm(a, axis=1)
    scale[scale == 0] = 1.0
    a, b = a / scale[:, None], b / scale
    _, first = np.unique(np.round(np.hstack([a, b[:, None]]), 10), axis=0, return_index=True)
    order = np.sort(first)
    a, b = a[order], b[order]
    keep = np.ones(len(b), bool)
    for i in range(len(b)):
        keep[i] = False
        if not keep.any():
            keep[i] = True
            continue
        res = linprog(-a[i], A_ub=np.vstack([a[keep], a[i]]),
                      b_ub=np.concatenate([b[keep], [b[i] + 1.0]]),
                      bounds=(None, None), method="highs")
        if res.status != 0 or -res.fun > b[i] + tol:
            keep[i] = True
    return HPolytope(a[keep], b[keep])

