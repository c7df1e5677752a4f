"""Set-membership identification of the parameter box."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.sparse as sp

from .geometry import Box, HPolytope, box_vertices
from .plant import PlantModel


class DisturbanceModelViolated(UserWarning):
    """The data admit no parameter in the current box: W or the model is wrong."""


@dataclass(frozen=True, eq=False)
class ParamBox:
    box: Box
    step_index: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.box.center

    @property
    def half_widths(self) -> np.ndarray:
        return self.box.half_widths

    @property
    def dim(self) -> int:
        return self.box.dim

    def vertices(self) -> np.ndarray:
        if self.dim == 0:
            return np.zeros((1, 0))
        return box_vertices(self.box)

    def is_subset_of(self, other: "ParamBox", tol: float = 0.0) -> bool:
        return self.box.is_subset_of(other.box, tol)

    def to_dict(self) -> dict:
        return {**self.box.to_dict(), "step_index": self.step_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBox":
        return cls(Box.from_dict(d), int(d.get("step_index", 0)))


@dataclass(frozen=True)
class Observation:
    x_prev: np.ndarray
    u_prev: np.ndarray
    x_next: np.ndarray


def nonfalsified(model: PlantModel, obs: Observation) -> HPolytope:
    """Parameters that explain ``obs`` with some disturbance in W.

    With ``r = x+ - A0 x - B0 u`` and ``D`` the regressor, the condition is
    ``r - D theta in W``, i.e. ``-H_w D theta <= h_w - H_w r``.
    """
    x, u, xn = (np.asarray(v, float) for v in (obs.x_prev, obs.u_prev, obs.x_next))
    if model.p:
        d = np.column_stack([a @ x + b @ u for a, b in zip(model.A_components, model.B_components)])
    else:
        d = np.zeros((model.n, 0))
    r = xn - model.A0 @ x - model.B0 @ u
    w = model.disturbance.to_hpolytope()
    return HPolytope(-w.normals @ d, w.offsets - w.normals @ r)


def _settings():
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_threads = 1
    st.presolve_enable = False
    st.tol_gap_abs = st.tol_gap_rel = 1e-10
    st.tol_feas = 1e-10
    return st


_SOLVED = {clarabel.SolverStatus.Solved, clarabel.SolverStatus.AlmostSolved}
_INFEASIBLE = {clarabel.SolverStatus.PrimalInfeasible, clarabel.SolverStatus.AlmostPrimalInfeasible}


class _Empty(Exception):
    pass


def _coordinate_bounds(a, b, lo, hi):
    """Min and max of every coordinate over ``{a t <= b, lo <= t <= hi}``."""
    p = lo.size
    eye = np.eye(p)
    A = sp.csc_matrix(np.vstack([a, eye, -eye]))
    rhs = np.concatenate([b, hi, -lo])
    cones = [clarabel.NonnegativeConeT(A.shape[0])]
    P = sp.csc_matrix((p, p))
    out_lo, out_hi = lo.copy(), hi.copy()
    for i in range(p):
        for sign in (1.0, -1.0):
            c = np.zeros(p)
            c[i] = sign
            sol = clarabel.DefaultSolver(P, c, A, rhs, cones, _settings()).solve()
            if sol.status in _INFEASIBLE:
                raise _Empty
            if sol.status not in _SOLVED:
                raise RuntimeError(f"estimation LP failed: {sol.status}")
            val = float(sol.x[i])
            if sign > 0:
                out_lo[i] = max(lo[i], val)
            else:
                out_hi[i] = min(hi[i], val)
    return out_lo, out_hi


def update(theta: ParamBox, delta: HPolytope, slack: float = 0.0) -> ParamBox:
    """Tight bounding box of ``theta ∩ delta`` via 2p LPs (interior point).

    ``slack`` loosens every row of ``delta`` so solver round-off cannot cut
    off a parameter sitting exactly on its boundary. An empty intersection
    leaves the box unchanged and emits :class:`DisturbanceModelViolated`.
    """
    p = theta.dim
    nxt = theta.step_index + 1
    if p == 0:
        return ParamBox(theta.box, nxt)
    # rows with (numerically) zero normal only matter if they are violated
    norms = np.linalg.norm(delta.normals, axis=1)
    flat = norms <= 1e-14
    if np.any(delta.offsets[flat] + slack < 0):
        warnings.warn("non-falsified set is empty", DisturbanceModelViolated, stacklevel=2)
        return ParamBox(theta.box, nxt)
    a, b = delta.normals[~flat], delta.offsets[~flat] + slack
    if a.shape[0] == 0:
        return ParamBox(theta.box, nxt)
    # skip LPs when every row already holds on the whole box
    worst = a @ theta.center + np.abs(a) @ theta.half_widths
    if np.all(worst <= b):
        return ParamBox(theta.box, nxt)
    try:
        lo, hi = _coordinate_bounds(a, b, np.array(theta.box.lower), np.array(theta.box.upper))
    except _Empty:
        warnings.warn("parameter box and non-falsified set do not intersect",
                      DisturbanceModelViolated, stacklevel=2)
        return ParamBox(theta.box, nxt)
    lo = np.clip(lo, theta.box.lower, theta.box.upper)
    hi = np.clip(hi, theta.box.lower, theta.box.upper)
    hi = np.maximum(hi, lo)
    center = (lo + hi) / 2
    half = (hi - lo) / 2
    # rounding must never push the box outside its predecessor
    half = np.minimum(half, np.minimum(center - theta.box.lower, theta.box.upper - center))
    half = np.minimum(half, theta.half_widths)
    same = (lo == theta.box.lower) & (hi == theta.box.upper)
    center = np.where(same, theta.center, center)
    half = np.where(same, theta.half_widths, np.maximum(half, 0.0))
    for _ in range(4):
        out = (center - half < theta.box.lower) | (center + half > theta.box.upper)
        if not out.any():
            break
        half = np.where(out, np.nextafter(half, 0.0), half)
    return ParamBox(Box(center, half), nxt)


def contains(theta: ParamBox, candidate) -> bool:
    c = np.atleast_1d(np.asarray(candidate, float))
    if c.size != theta.dim:
        raise ValueError("candidate length must equal p")
    return bool(np.all(np.abs(c - theta.center) <= theta.half_widths))


class SetMembershipEstimator:
    """Sequential ``Theta_k = Theta_{k-1} ∩ Delta_k`` with optional cadence."""

    def __init__(self, model: PlantModel, theta0: ParamBox | Box, cadence: int = 1,
                 slack: float | None = None):
        self.model = model
        if slack is None:
            hw = model.disturbance.half_widths
            slack = 1e-3 * float(hw.min()) if hw.size else 0.0
            slack += 1e-10
        self.slack = slack
        self.theta = theta0 if isinstance(theta0, ParamBox) else ParamBox(theta0)
        self.cadence = max(1, int(cadence))
        self.violations = 0
        self._count = 0

    def observe(self, x_prev, u_prev, x_next) -> tuple[ParamBox, bool]:
        """Returns the new box and whether it shrank."""
        self._count += 1
        if self._count % self.cadence:
            self.theta = ParamBox(self.theta.box, self.theta.step_index + 1)
            return self.theta, False
        delta = nonfalsified(self.model, Observation(x_prev, u_prev, x_next))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DisturbanceModelViolated)
            new = update(self.theta, delta, self.slack)
        if any(issubclass(w.category, DisturbanceModelViolated) for w in caught):
            self.violations += 1
            warnings.warn("estimation frozen: disturbance model violated",
                          DisturbanceModelViolated, stacklevel=2)
        shrank = bool(np.any(new.half_widths < self.theta.half_widths))
        self.theta = new
        return new, shrank
