"""Homothetic-tube safety certification problem.

Tubes are ``X_l = {z_l} ⊕ alpha_l X0`` with ``X0 = {x : H_x x <= 1}`` and the
tube law ``u = K x + v``. The robust one-step inclusion is enforced at every
vertex of the parameter box, with the cross-section part collapsed into
support constants (exact, since ``alpha_l >= 0``).
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_discrete_are
from scipy.spatial import QhullError

from .estimation import ParamBox
from .geometry import Box, HPolytope, hpolytope_vertices, remove_redundant_rows, support_many
from .plant import PlantModel, assemble

RESIDUAL_TOL = 1e-6
CONSTRAINT_MARGIN = 1e-7
CONTRACTION_TOL = 1e-9     # slack on the contraction rows, shared by construction and checks


class NotStabilizable(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    pass


class RobustnessWarning(UserWarning):
    pass


# ---------------------------------------------------------------- cross-section


@dataclass(frozen=True, eq=False)
class CrossSection:
    """Normalized polytope ``{x : H x <= 1}`` containing the origin in its interior.

    ``template`` (square, invertible) marks the box-like case ``||T x||_inf <= 1``
    whose support function is analytic; otherwise supports come from vertices.
    """

    H: np.ndarray
    template: np.ndarray | None = None
    _vertices: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_hpolytope(cls, poly: HPolytope) -> "CrossSection":
        if np.any(poly.offsets <= 0):
            raise ValueError("cross-section must contain the origin in its interior")
        return cls(poly.normals / poly.offsets[:, None])

    @classmethod
    def from_template(cls, T) -> "CrossSection":
        T = np.asarray(T, float)
        return cls(np.vstack([T, -T]), template=T)

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def as_hpolytope(self) -> HPolytope:
        return HPolytope(self.H, np.ones(self.n_rows))

    def vertices(self, cap: int = 12) -> np.ndarray:
        if self._vertices is None:
            if self.template is not None:
                from .geometry import box_vertices
                corners = box_vertices(Box(np.zeros(self.dim), np.ones(self.dim)), cap)
                verts = np.linalg.solve(self.template, corners.T).T
            else:
                verts = hpolytope_vertices(self.as_hpolytope(), np.zeros(self.dim))
            object.__setattr__(self, "_vertices", verts)
        return self._vertices

    def supports(self, directions) -> np.ndarray:
        """Support value for each row of ``directions``."""
        d = np.atleast_2d(np.asarray(directions, float))
        if self.template is not None:
            return np.abs(np.linalg.solve(self.template.T, d.T)).sum(axis=0)
        try:
            verts = self.vertices()
        except QhullError:
            # degenerate vertex enumeration: one LP per direction instead
            return support_many(self.as_hpolytope(), d)
        return (d @ verts.T).max(axis=1)

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.H @ np.asarray(x, float) <= 1.0 + tol))

    def to_dict(self) -> dict:
        d = {"H": self.H.tolist()}
        if self.template is not None:
            d["template"] = self.template.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrossSection":
        if "template" in d:
            return cls.from_template(d["template"])
        return cls(np.asarray(d["H"], float))


# ---------------------------------------------------------------- tube design


def closed_loop_matrices(model: PlantModel, thetas, K) -> tuple[np.ndarray, np.ndarray]:
    """Stacks of ``A(theta)+B(theta)K`` and ``B(theta)`` for each row of ``thetas``."""
    thetas = np.atleast_2d(thetas)
    acl, bs = [], []
    for th in thetas:
        a, b = assemble(model, th)
        acl.append(a + b @ K)
        bs.append(b)
    return np.array(acl), np.array(bs)


@dataclass
class GainReport:
    vertex_spectral_radii: np.ndarray
    robust: bool


def synthesize_gain(model: PlantModel, theta0: ParamBox, Q=None, R=None):
    """Discrete LQR gain at the center model, convention ``u = K x + v``.

    Returns ``(K, report)``; warns with :class:`RobustnessWarning` when some
    parameter vertex is not stabilized.
    """
    a, b = assemble(model, theta0.center)
    Q = np.eye(model.n) if Q is None else np.asarray(Q, float)
    R = np.eye(model.m) if R is None else np.asarray(R, float)
    try:
        P = solve_discrete_are(a, b, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotStabilizable(str(exc)) from exc
    if not np.all(np.isfinite(P)):
        raise NotStabilizable("Riccati solution is not finite")
    K = -np.linalg.solve(R + b.T @ P @ b, b.T @ P @ a)
    acl, _ = closed_loop_matrices(model, theta0.vertices(), K)
    radii = np.array([np.max(np.abs(np.linalg.eigvals(m))) for m in acl])
    if np.max(np.abs(np.linalg.eigvals(a + b @ K))) >= 1:
        raise NotStabilizable("center closed loop is not Schur")
    robust = bool(np.all(radii < 1))
    if not robust:
        warnings.warn(f"vertex spectral radius {radii.max():.4f} >= 1", RobustnessWarning,
                      stacklevel=2)
    return K, GainReport(radii, robust)


@dataclass
class CrossSectionReport:
    ok: bool
    contraction: float
    worst_margin: float
    worst_row: int
    worst_vertex: int


def verify_cross_section(model: PlantModel, theta0: ParamBox, K, X0: CrossSection | HPolytope,
                         lam: float) -> CrossSectionReport:
    """Check ``A_cl(theta_j) X0 ⊆ lam X0`` at every parameter vertex."""
    cs = X0 if isinstance(X0, CrossSection) else CrossSection.from_hpolytope(X0)
    acl, _ = closed_loop_matrices(model, theta0.vertices(), K)
    e = np.array([cs.supports(cs.H @ a) for a in acl])  # (vertices, rows)
    j, s = np.unravel_index(np.argmax(e), e.shape)
    worst = float(e[j, s])
    return CrossSectionReport(bool(worst <= lam + CONTRACTION_TOL), worst, float(lam - worst), int(s), int(j))


def contractive_cross_section(model: PlantModel, theta0: ParamBox, K, lam: float = 0.99,
                              max_iter: int = 30, start: HPolytope | None = None,
                              scale: float = 1.0) -> HPolytope:
    """Backward refinement ``X+ = {x in X : A_cl(theta_j) x in lam X for all j}``.

    Starts from ``{x : (x, Kx) in scale * Z}`` unless ``start`` is given; the
    result is normalized to unit offsets.
    """
    if start is None:
        start = HPolytope(model.F + model.G @ K, scale * model.z)
    cur = remove_redundant_rows(start)
    acl, _ = closed_loop_matrices(model, theta0.vertices(), K)
    for _ in range(max_iter):
        new_a = np.vstack([cur.normals @ a for a in acl])
        new_b = np.tile(lam * cur.offsets, len(acl))
        cand = HPolytope(new_a, new_b)
        # fixed point: every candidate row already implied by the current set
        implied = support_many(cur, cand.normals) <= cand.offsets + CONTRACTION_TOL
        if np.all(implied):
            if np.any(cur.offsets <= 1e-12):
                raise NoConvergence("cross-section lost the origin from its interior")
            return HPolytope(cur.normals / cur.offsets[:, None], np.ones(cur.n_rows))
        nxt = remove_redundant_rows(cur.intersect(HPolytope(cand.normals[~implied],
                                                             cand.offsets[~implied])))
        if np.any(nxt.offsets <= 1e-9):
            raise NoConvergence("cross-section collapsed onto the origin")
        cur = nxt
    raise NoConvergence(f"no fixed point after {max_iter} iterations")


def template_cross_section(model: PlantModel, theta0: ParamBox, K, margin: float = 1.0) -> CrossSection:
    """Box-like cross-section ``||T x||_inf <= 1`` in real modal coordinates.

    The template is scaled so ``(x, Kx) in Z`` on all of it (times ``margin``).
    """
    a, b = assemble(model, theta0.center)
    evals, evecs = np.linalg.eig(a + b @ K)
    cols, used = [], np.zeros(len(evals), bool)
    for i, ev in enumerate(evals):
        if used[i]:
            continue
        used[i] = True
        if abs(ev.imag) < 1e-10:
            cols.append(evecs[:, i].real)
        else:
            j = next(k for k in range(len(evals))
                     if not used[k] and abs(evals[k] - ev.conjugate()) < 1e-8)
            used[j] = True
            cols.extend([evecs[:, i].real, evecs[:, i].imag])
    V = np.column_stack(cols)
    T = np.linalg.inv(V)
    cs = CrossSection.from_template(T)
    c = cs.supports(model.F + model.G @ K)
    scale = margin * np.min(model.z / np.maximum(c, 1e-300))
    return CrossSection.from_template(T / scale)


# ---------------------------------------------------------------- tube problem


@dataclass(frozen=True, eq=False)
class TubeConfig:
    model: PlantModel
    horizon: int
    K: np.ndarray
    X0: CrossSection
    w_bar: np.ndarray
    c_bar: np.ndarray
    margin: float = CONSTRAINT_MARGIN
    residual_tol: float = RESIDUAL_TOL

    @classmethod
    def build(cls, model: PlantModel, K, X0: CrossSection | HPolytope, horizon: int = 10,
              **kw) -> "TubeConfig":
        cs = X0 if isinstance(X0, CrossSection) else CrossSection.from_hpolytope(X0)
        K = np.asarray(K, float)
        w_bar = support_many(model.disturbance, cs.H)
        c_bar = cs.supports(model.F + model.G @ K)
        return cls(model, int(horizon), K, cs, w_bar, c_bar, **kw)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "K": self.K.tolist(), "X0": self.X0.to_dict(),
                "margin": self.margin, "residual_tol": self.residual_tol}

    @classmethod
    def from_dict(cls, d: dict, model: PlantModel) -> "TubeConfig":
        return cls.build(model, d["K"], CrossSection.from_dict(d["X0"]), d["horizon"],
                         margin=d.get("margin", CONSTRAINT_MARGIN),
                         residual_tol=d.get("residual_tol", RESIDUAL_TOL))


@dataclass(frozen=True, eq=False)
class HomotheticTube:
    z: np.ndarray          # (N+1, n)
    alpha: np.ndarray      # (N+1,)
    v: np.ndarray          # (N, m)
    objective: float
    solved_at: int
    theta_snapshot: ParamBox
    x: np.ndarray          # state the tube was solved from
    terminal_weights: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.v.shape[0]

    def to_dict(self) -> dict:
        return {
            "z": self.z.tolist(), "alpha": self.alpha.tolist(), "v": self.v.tolist(),
            "objective": self.objective, "solved_at": self.solved_at,
            "theta": self.theta_snapshot.to_dict(), "x": self.x.tolist(),
            "terminal_weights": None if self.terminal_weights is None
            else self.terminal_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HomotheticTube":
        m = len(d["v"][0]) if d["v"] else 0
        return cls(
            z=np.asarray(d["z"], float), alpha=np.asarray(d["alpha"], float),
            v=np.asarray(d["v"], float).reshape(-1, m), objective=float(d["objective"]),
            solved_at=int(d["solved_at"]), theta_snapshot=ParamBox.from_dict(d["theta"]),
            x=np.asarray(d["x"], float),
            terminal_weights=None if d.get("terminal_weights") is None
            else np.asarray(d["terminal_weights"], float),
        )


@dataclass
class QpReport:
    status: str                         # feasible | infeasible | solver_error
    tube: HomotheticTube | None = None
    max_constraint_residual: float = float("nan")
    solve_time: float = 0.0
    iterations: int = 0
    u_first: np.ndarray | None = None
    cut: tuple[np.ndarray, float] | None = None
    active: np.ndarray | None = None    # generated tube-inclusion rows (relative), reusable as a hint

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


@dataclass
class _Problem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    n_eq: int
    layout: dict
    x_rows: slice      # rows of b that carry -H_x x_k
    const: float = 0.0
    lazy: slice | None = None          # tube-inclusion rows, ordered (l, j, s)
    lazy_shape: tuple = (0, 0, 0)
    seed_vertex: np.ndarray | None = None
    active: np.ndarray | None = None   # lazy rows kept from earlier solves
    solver: tuple | None = None        # (row set, solver) reused while only b and q change
    lazy_block: sp.csr_matrix | None = None


def _terminal_points(terminal) -> np.ndarray:
    pts = getattr(terminal, "points", terminal)
    pts = getattr(pts, "points", pts)
    return np.atleast_2d(np.asarray(pts, float))


def _coo_block(rows, cols, dense, row0, col_idx):
    """Append nonzeros of ``dense`` placed at ``row0`` with column map ``col_idx``."""
    r, c = np.nonzero(dense)
    rows.append(r + row0)
    cols.append(col_idx[c])
    return dense[r, c]


def build_problem(x_k, theta: ParamBox, terminal, cfg: TubeConfig, horizon: int | None = None,
                  objective: str = "passthrough", u_learn=None, pin_v0=None) -> _Problem:
    model, K, cs = cfg.model, cfg.K, cfg.X0
    n, m, nx = model.n, model.m, cs.n_rows
    N = cfg.horizon if horizon is None else int(horizon)
    if not 1 <= N <= cfg.horizon:
        raise ValueError("horizon override must lie in [1, N]")
    if objective not in ("passthrough", "max_alpha0", "feasibility"):
        raise ValueError(f"unknown objective {objective!r}")
    tp = _terminal_points(terminal)
    nV = tp.shape[0]
    if tp.shape[1] != n + 1:
        raise ValueError("terminal points must live in R^(n+1)")
    iv, iz = 0, N * m
    ia = iz + (N + 1) * n
    il = ia + N + 1
    nvar = il + nV
    layout = {"N": N, "iv": iv, "iz": iz, "ia": ia, "il": il, "nvar": nvar, "nV": nV}

    acl, bs = closed_loop_matrices(model, theta.vertices(), K)
    H = cs.H
    HA = np.einsum("sn,jnk->jsk", H, acl)         # (J, nx, n)
    HB = np.einsum("sn,jnk->jsk", H, bs)          # (J, nx, m)
    E = cs.supports(HA.reshape(-1, n)).reshape(HA.shape[:2])  # (J, nx)
    J = HA.shape[0]
    FK = model.F + model.G @ K
    nz = FK.shape[0]

    vals, rows, cols, bvec = [], [], [], []
    row = 0
    # equalities: z_N = Z' lam, alpha_N = a' lam, sum lam = 1, optional v_0 pin
    eq = np.zeros((n + 2, nvar))
    eq[:n, iz + N * n: iz + (N + 1) * n] = np.eye(n)
    eq[:n, il:] = -tp[:, :n].T
    eq[n, ia + N] = 1.0
    eq[n, il:] = -tp[:, n]
    eq[n + 1, il:] = 1.0
    vals.append(_coo_block(rows, cols, eq, row, np.arange(nvar)))
    bvec.append(np.r_[np.zeros(n + 1), 1.0])
    row += n + 2
    if pin_v0 is not None:
        pin = np.zeros((m, nvar))
        pin[:, iv:iv + m] = np.eye(m)
        vals.append(_coo_block(rows, cols, pin, row, np.arange(nvar)))
        bvec.append(np.asarray(pin_v0, float))
        row += m
    n_eq = row

    # initial set: H (x_k - z_0) <= alpha_0
    blk = np.hstack([-H, -np.ones((nx, 1))])
    vals.append(_coo_block(rows, cols, blk, row, np.r_[np.arange(iz, iz + n), ia]))
    x_rows = slice(row, row + nx)
    bvec.append(-H @ np.asarray(x_k, float))
    row += nx

    # state/input constraints on each tube set
    blk = np.hstack([FK, cfg.c_bar[:, None], model.G])
    for l in range(N):
        cmap = np.r_[np.arange(iz + l * n, iz + (l + 1) * n), ia + l,
                     np.arange(iv + l * m, iv + (l + 1) * m)]
        vals.append(_coo_block(rows, cols, blk, row, cmap))
        bvec.append(model.z - cfg.margin)
        row += nz

    # alpha >= 0, lam >= 0
    k = N + 1 + nV
    rows.append(np.arange(row, row + k))
    cols.append(np.r_[np.arange(ia, ia + N + 1), np.arange(il, il + nV)])
    vals.append(-np.ones(k))
    bvec.append(np.zeros(k))
    row += k

    # tube inclusion at every parameter vertex (last, so it can be generated lazily)
    lazy0 = row
    blk = np.concatenate([HA, E[:, :, None], HB,
                          np.broadcast_to(-H, (J, nx, n)), -np.ones((J, nx, 1))], axis=2)
    blk = blk.reshape(J * nx, -1)
    r, c = np.nonzero(blk)
    v = blk[r, c]
    cmap0 = np.r_[np.arange(iz, iz + n), ia, np.arange(iv, iv + m),
                  np.arange(iz + n, iz + 2 * n), ia + 1]
    # column shift per stage: z and alpha advance by (n, 1), v by m
    shift = np.r_[np.full(n, n), 1, np.full(m, m), np.full(n, n), 1]
    ls = np.arange(N)[:, None]
    rows.append((row + ls * J * nx + r).ravel())
    cols.append((cmap0[c] + ls * shift[c]).ravel())
    vals.append(np.tile(v, N))
    bvec.append(np.tile(-np.tile(cfg.w_bar, J), N))
    row += N * J * nx

    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(row, nvar))
    b = np.concatenate(bvec)
    if objective == "passthrough":
        P = sp.csc_matrix((np.full(m, 2.0), (np.arange(m), np.arange(m))), shape=(nvar, nvar))
    else:
        P = sp.csc_matrix((nvar, nvar))
    prob = _Problem(P, np.zeros(nvar), A, b, n_eq, layout, x_rows,
                    lazy=slice(lazy0, row), lazy_shape=(N, J, nx),
                    seed_vertex=np.argmax(E, axis=0))
    prob.layout["objective"] = objective
    set_point(prob, x_k, u_learn, cfg)
    return prob


def set_point(prob: _Problem, x_k, u_learn, cfg: TubeConfig) -> None:
    """Re-target a built problem to a new initial state and proposal, in place."""
    x_k = np.asarray(x_k, float)
    prob.b[prob.x_rows] = -cfg.X0.H @ x_k
    L = prob.layout
    prob.q[:] = 0.0
    prob.const = 0.0
    if L["objective"] == "passthrough":
        u = np.zeros(cfg.model.m) if u_learn is None else np.asarray(u_learn, float)
        d = u - cfg.K @ x_k
        prob.q[L["iv"]:L["iv"] + d.size] = -2.0 * d
        prob.const = float(d @ d)
    elif L["objective"] == "max_alpha0":
        prob.q[L["ia"]] = -1.0


def _settings():
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_threads = 1
    s.presolve_enable = False
    return s


def _residual(prob: _Problem, xsol: np.ndarray) -> float:
    r = prob.A @ xsol - prob.b
    eq = np.abs(r[: prob.n_eq]).max(initial=0.0)
    ineq = r[prob.n_eq:].max(initial=0.0)
    return float(max(eq, ineq))


def _solve_rows(prob: _Problem, idx: np.ndarray | None):
    b = prob.b if idx is None else prob.b[idx]
    key = None if idx is None else idx.tobytes()
    if prob.solver is not None and prob.solver[0] == key:
        solver = prob.solver[1]
        solver.update(q=prob.q, b=b)
        return solver.solve()
    A = prob.A if idx is None else prob.A[idx]
    cones = []
    if prob.n_eq:
        cones.append(clarabel.ZeroConeT(prob.n_eq))
    cones.append(clarabel.NonnegativeConeT(A.shape[0] - prob.n_eq))
    solver = clarabel.DefaultSolver(prob.P, prob.q, A.tocsc(), b, cones, _settings())
    prob.solver = (key, solver)
    return solver.solve()


ROWGEN_THRESHOLD = 0
_ROWGEN_TOL = 1e-9
_ROWGEN_ROUNDS = 40


class _Outcome:
    __slots__ = ("status", "x", "z", "obj_val", "iterations")

    def __init__(self, sol, idx, n_rows):
        self.status = sol.status
        self.x = np.asarray(sol.x)
        self.obj_val = float(sol.obj_val)
        self.iterations = int(getattr(sol, "iterations", 0))
        z = np.asarray(sol.z)
        if idx is not None and z.size == idx.size:
            full = np.zeros(n_rows)
            full[idx] = z
            z = full
        self.z = z


def _seed_rows(prob: _Problem) -> np.ndarray:
    """Per stage and cross-section row, the vertex with the largest support constant."""
    N, J, nx = prob.lazy_shape
    l_idx, s_idx = np.meshgrid(np.arange(N), np.arange(nx), indexing="ij")
    j_idx = prob.seed_vertex[s_idx]
    return np.unique(prob.lazy.start + (l_idx * J + j_idx) * nx + s_idx)


def _solve(prob: _Problem) -> _Outcome:
    """Solve, generating tube-inclusion rows on demand for large problems.

    The relaxation drops only inequality rows, so its infeasibility (and
    Farkas certificate, zero on dropped rows) is exact for the full problem;
    a relaxed optimum is accepted once it satisfies every dropped row.
    """
    n_rows = prob.A.shape[0]
    lz = prob.lazy
    if lz is None or lz.stop - lz.start <= ROWGEN_THRESHOLD:
        return _Outcome(_solve_rows(prob, None), None, n_rows)
    N, J, nx = prob.lazy_shape
    base = np.arange(lz.start)
    if prob.active is None:
        prob.active = _seed_rows(prob)
    if prob.lazy_block is None:
        prob.lazy_block = prob.A[lz]
    A_lazy, b_lazy = prob.lazy_block, prob.b[lz]
    iters = 0
    for _ in range(_ROWGEN_ROUNDS):
        idx = np.concatenate([base, prob.active])
        out = _Outcome(_solve_rows(prob, idx), idx, n_rows)
        iters += out.iterations
        out.iterations = iters
        if out.status not in _SOLVED:
            return out
        r = (A_lazy @ out.x - b_lazy).reshape(N, J, nx)
        worst_j = np.argmax(r, axis=1)                    # (N, nx)
        worst = np.take_along_axis(r, worst_j[:, None, :], axis=1)[:, 0, :]
        l_v, s_v = np.nonzero(worst > _ROWGEN_TOL)
        if l_v.size == 0:
            return out
        new = lz.start + (l_v * J + worst_j[l_v, s_v]) * nx + s_v
        new = np.setdiff1d(new, prob.active)
        if new.size == 0:
            return out
        prob.active = np.union1d(prob.active, new)
    out = _Outcome(_solve_rows(prob, None), None, n_rows)
    out.iterations += iters
    return out


_SOLVED = {clarabel.SolverStatus.Solved, clarabel.SolverStatus.AlmostSolved}
_INFEASIBLE = {clarabel.SolverStatus.PrimalInfeasible, clarabel.SolverStatus.AlmostPrimalInfeasible}


def _unpack(prob: _Problem, xsol, objective, step, theta, x_k) -> HomotheticTube:
    L = prob.layout
    N, n = L["N"], (L["ia"] - L["iz"]) // (L["N"] + 1)
    m = (L["iz"] - L["iv"]) // N
    v = xsol[L["iv"]:L["iz"]].reshape(N, m)
    z = xsol[L["iz"]:L["ia"]].reshape(N + 1, n)
    alpha = np.maximum(xsol[L["ia"]:L["il"]], 0.0)
    lam = np.maximum(xsol[L["il"]:], 0.0)
    return HomotheticTube(z, alpha, v, objective, step, theta, np.array(x_k, float), lam)


def solve_problem(prob: _Problem, cfg: TubeConfig, theta: ParamBox, x_k, step: int = 0) -> QpReport:
    """Solve an already built (and possibly re-targeted) problem."""
    t0 = time.perf_counter()
    x_k = np.asarray(x_k, float)
    objective = prob.layout["objective"]
    sol = _solve(prob)
    elapsed = time.perf_counter() - t0
    iters = sol.iterations
    rep = _report(prob, sol, cfg, theta, x_k, step, objective, elapsed, iters)
    if prob.active is not None:
        rep.active = prob.active - prob.lazy.start
    return rep


def _report(prob, sol, cfg, theta, x_k, step, objective, elapsed, iters) -> QpReport:
    if sol.status in _SOLVED:
        xsol = sol.x
        res = _residual(prob, xsol)
        if objective == "passthrough":
            obj = max(sol.obj_val + prob.const, 0.0)
        else:
            obj = sol.obj_val
        tube = _unpack(prob, xsol, obj, step, theta, x_k)
        if res > cfg.residual_tol:
            return QpReport("solver_error", None, res, elapsed, iters)
        u_first = cfg.K @ x_k + tube.v[0]
        return QpReport("feasible", tube, res, elapsed, iters, u_first)
    if sol.status in _INFEASIBLE:
        return QpReport("infeasible", None, float("nan"), elapsed, iters,
                        cut=_farkas_cut(prob, sol.z, cfg))
    return QpReport("solver_error", None, float("nan"), elapsed, iters)


def build_and_solve(x_k, u_learn, theta: ParamBox, terminal, cfg: TubeConfig,
                    horizon_override: int | None = None, step: int = 0,
                    objective: str = "passthrough", pin_v0=None,
                    active_hint: np.ndarray | None = None) -> QpReport:
    """Solve the certification problem from ``x_k`` for proposal ``u_learn``.

    ``objective="max_alpha0"`` or ``"feasibility"`` answer pure feasibility
    questions; the feasible set does not depend on the objective.
    ``active_hint`` seeds row generation with the rows an earlier solve of
    the same shape needed; it never changes the answer, only the work.
    """
    t0 = time.perf_counter()
    prob = build_problem(x_k, theta, terminal, cfg, horizon_override, objective, u_learn, pin_v0)
    if active_hint is not None and prob.lazy is not None:
        hint = np.asarray(active_hint, int) + prob.lazy.start
        if hint.size and hint.max() < prob.lazy.stop:
            prob.active = np.union1d(_seed_rows(prob), hint)
    rep = solve_problem(prob, cfg, theta, x_k, step)
    rep.solve_time = time.perf_counter() - t0
    return rep


_VAR_BOUND = 1e3


def _farkas_cut(prob: _Problem, y: np.ndarray, cfg: TubeConfig):
    """Half-space ``g @ x <= h`` containing every feasible initial state.

    From a certificate ``y`` (``A' y ~ 0``, ``b' y < 0``): ``b(x)' y >= 0``
    must hold for feasible ``x``; the ``A' y`` residual is absorbed in ``h``
    assuming decision variables bounded by ``_VAR_BOUND``.
    """
    by = float(prob.b @ y)
    if not np.isfinite(by) or by >= 0:
        return None
    y = y / -by
    H = cfg.X0.H
    g = H.T @ y[prob.x_rows]                 # b_x(x) = -H x on x_rows
    b_const = prob.b.copy()
    b_const[prob.x_rows] = 0.0
    h = float(b_const @ y)
    slack = float(np.abs(prob.A.T @ y).sum()) * _VAR_BOUND + 1e-9
    return g, h + slack


def tube_variables(tube: HomotheticTube) -> np.ndarray:
    return np.concatenate([tube.v.ravel(), tube.z.ravel(), tube.alpha,
                           tube.terminal_weights if tube.terminal_weights is not None else []])


def tube_residual(tube: HomotheticTube, theta: ParamBox, terminal, cfg: TubeConfig,
                  x_k=None) -> float:
    """Worst constraint violation of a stored tube under another parameter box."""
    x_k = tube.x if x_k is None else x_k
    prob = build_problem(x_k, theta, terminal, cfg, tube.horizon, "feasibility")
    return _residual(prob, tube_variables(tube))


def passthrough_gap(report: QpReport, u_learn) -> float:
    if not report.feasible:
        raise ValueError("gap is defined for feasible reports only")
    return float(np.linalg.norm(np.asarray(u_learn, float) - report.u_first))


def with_horizon(cfg: TubeConfig, horizon: int) -> TubeConfig:
    return replace(cfg, horizon=int(horizon))
