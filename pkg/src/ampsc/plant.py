"""Affine-parametric linear plant, the mass-spring-damper chain, and the true system."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, HPolytope

SAMPLING_TIME = 0.2
MSD_DAMPING = 0.1
MSD_SPRING_RANGE = (0.05, 0.25)
MSD_DISTURBANCE = 1e-3
MSD_STATE_BOUND = 2.3
MSD_INPUT_BOUND = 3.5


class DimensionMismatch(ValueError):
    pass


def _mat(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 1 and rows is not None:
        m = m.reshape(rows, -1)
    if m.ndim != 2:
        raise DimensionMismatch("expected a matrix")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise DimensionMismatch(f"expected shape ({rows}, {cols}), got {m.shape}")
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class PlantModel:
    """``x+ = A(theta) x + B(theta) u + w`` with ``(A, B)`` affine in theta.

    ``constraints`` is the polytope ``{(x, u) : F x + G u <= z}`` over
    ``R^(n+m)``; ``disturbance`` is the box W.
    """

    A0: np.ndarray
    B0: np.ndarray
    A_components: tuple
    B_components: tuple
    disturbance: Box
    constraints: HPolytope
    name: str = ""

    def __post_init__(self):
        a0 = _mat(self.A0)
        n = a0.shape[0]
        if a0.shape[1] != n:
            raise DimensionMismatch("A0 must be square")
        b0 = _mat(self.B0, n)
        m = b0.shape[1]
        a_c = tuple(_mat(a, n, n) for a in self.A_components)
        b_c = tuple(_mat(b, n, m) for b in self.B_components)
        if len(a_c) != len(b_c):
            raise DimensionMismatch("A_components and B_components differ in length")
        if self.disturbance.dim != n:
            raise DimensionMismatch("disturbance dimension must equal n")
        if self.constraints.dim != n + m:
            raise DimensionMismatch("constraints must live in R^(n+m)")
        if not np.all(self.constraints.offsets > 0):
            raise ValueError("constraint set must contain the origin strictly")
        object.__setattr__(self, "A0", a0)
        object.__setattr__(self, "B0", b0)
        object.__setattr__(self, "A_components", a_c)
        object.__setattr__(self, "B_components", b_c)

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    @property
    def m(self) -> int:
        return self.B0.shape[1]

    @property
    def p(self) -> int:
        return len(self.A_components)

    @property
    def F(self) -> np.ndarray:
        return self.constraints.normals[:, : self.n]

    @property
    def G(self) -> np.ndarray:
        return self.constraints.normals[:, self.n:]

    @property
    def z(self) -> np.ndarray:
        return self.constraints.offsets

    def A_stack(self) -> np.ndarray:
        return np.array(self.A_components).reshape(self.p, self.n, self.n)

    def B_stack(self) -> np.ndarray:
        return np.array(self.B_components).reshape(self.p, self.n, self.m)

    def state_box(self) -> Box:
        """Bounding box of the state projection of the constraint set."""
        from .geometry import support

        lo, hi = np.empty(self.n), np.empty(self.n)
        for i in range(self.n):
            e = np.zeros(self.n + self.m)
            e[i] = 1.0
            hi[i] = support(self.constraints, e)
            lo[i] = -support(self.constraints, -e)
        return Box.from_bounds(lo, hi)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "A0": self.A0.tolist(),
            "B0": self.B0.tolist(),
            "A_components": [a.tolist() for a in self.A_components],
            "B_components": [b.tolist() for b in self.B_components],
            "disturbance": self.disturbance.to_dict(),
            "constraints": self.constraints.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantModel":
        return cls(
            A0=d["A0"],
            B0=d["B0"],
            A_components=tuple(d["A_components"]),
            B_components=tuple(d["B_components"]),
            disturbance=Box.from_dict(d["disturbance"]),
            constraints=HPolytope.from_dict(d["constraints"]),
            name=d.get("name", ""),
        )


def assemble(model: PlantModel, theta) -> tuple[np.ndarray, np.ndarray]:
    theta = np.atleast_1d(np.asarray(theta, float))
    if theta.size != model.p:
        raise DimensionMismatch(f"theta has length {theta.size}, model expects {model.p}")
    if model.p == 0:
        return np.array(model.A0), np.array(model.B0)
    a = model.A0 + np.tensordot(theta, model.A_stack(), axes=1)
    b = model.B0 + np.tensordot(theta, model.B_stack(), axes=1)
    return a, b


def in_constraints(model: PlantModel, x, u) -> bool:
    """``F x + G u <= z`` with zero tolerance."""
    xu = np.concatenate([np.asarray(x, float), np.asarray(u, float)])
    return bool(np.all(model.constraints.normals @ xu <= model.constraints.offsets))


def box_constraints(x_bound, u_bound) -> HPolytope:
    """Decoupled ``|x_i| <= x_bound_i``, ``|u_j| <= u_bound_j`` as one polytope."""
    xb, ub = np.asarray(x_bound, float), np.asarray(u_bound, float)
    return Box(np.zeros(xb.size + ub.size), np.concatenate([xb, ub])).to_hpolytope()


def msd_matrices(springs, n_msd: int, ts: float = SAMPLING_TIME,
                 damping: float = MSD_DAMPING) -> tuple[np.ndarray, np.ndarray]:
    """Discrete mass-spring-damper chain, state ``(p1, v1, p2, v2, ...)``.

    ``springs[i]`` couples elements ``i`` and ``i+1``; the outer boundary
    springs and dampers are zero.
    """
    springs = np.asarray(springs, float)
    n = 2 * n_msd
    a = np.eye(n)
    b = np.zeros((n, n_msd))
    for i in range(n_msd):
        pi, vi = 2 * i, 2 * i + 1
        a[pi, vi] += ts
        b[vi, i] = 1.0
        for j, c in ((i - 1, springs[i - 1] if i > 0 else 0.0),
                     (i + 1, springs[i] if i < n_msd - 1 else 0.0)):
            if not 0 <= j < n_msd:
                continue
            pj, vj = 2 * j, 2 * j + 1
            a[vi, pi] -= ts * c
            a[vi, pj] += ts * c
            a[vi, vi] -= ts * damping
            a[vi, vj] += ts * damping
    return a, b


def msd_chain(n_msd: int, seed: int | np.random.SeedSequence = 0):
    """Mass-spring-damper benchmark with uncertain springs.

    Returns ``(model, theta_star, theta0)``.
    """
    if n_msd < 1:
        raise ValueError("n_msd must be >= 1")
    n, m, p = 2 * n_msd, n_msd, n_msd - 1
    a0, b0 = msd_matrices(np.zeros(p), n_msd)
    comps = []
    for k in range(p):
        e = np.zeros(p)
        e[k] = 1.0
        comps.append(msd_matrices(e, n_msd)[0] - a0)
    lo, hi = MSD_SPRING_RANGE
    theta0 = Box.from_bounds(np.full(p, lo), np.full(p, hi))
    rng = np.random.default_rng(seed)
    theta_star = rng.uniform(lo, hi, size=p)
    model = PlantModel(
        A0=a0,
        B0=b0,
        A_components=tuple(comps),
        B_components=tuple(np.zeros((n, m)) for _ in range(p)),
        disturbance=Box(np.zeros(n), np.full(n, MSD_DISTURBANCE)),
        constraints=box_constraints(np.full(n, MSD_STATE_BOUND), np.full(m, MSD_INPUT_BOUND)),
        name=f"msd:{n_msd}",
    )
    return model, theta_star, theta0


@dataclass
class TrueSystem:
    """Ground-truth plant at ``theta_star`` with a seeded disturbance source.

    ``disturbance_mode`` is ``"uniform"`` (uniform over W) or ``"adversarial"``
    (a random vertex of W each step).
    """

    model: PlantModel
    theta_star: np.ndarray
    seed: int | np.random.SeedSequence = 0
    disturbance_mode: str = "uniform"
    w_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.disturbance_mode not in ("uniform", "adversarial", "zero"):
            raise ValueError(f"unknown disturbance mode {self.disturbance_mode!r}")
        self.theta_star = np.atleast_1d(np.asarray(self.theta_star, float))
        self._rng = np.random.default_rng(self.seed)
        self._A, self._B = assemble(self.model, self.theta_star)

    def draw_disturbance(self) -> np.ndarray:
        w_box = self.model.disturbance
        if self.disturbance_mode == "zero":
            return np.array(w_box.center)
        if self.disturbance_mode == "uniform":
            return self._rng.uniform(w_box.lower, w_box.upper)
        signs = self._rng.choice((-1.0, 1.0), size=w_box.dim)
        return w_box.center + signs * w_box.half_widths

    def step(self, x, u, w=None) -> np.ndarray:
        if w is None:
            w = self.draw_disturbance()
        w = np.asarray(w, float)
        self.w_log.append(w)
        return self._A @ np.asarray(x, float) + self._B @ np.asarray(u, float) + w

    def clone(self, seed) -> "TrueSystem":
        return TrueSystem(self.model, self.theta_star, seed, self.disturbance_mode)
