"""Terminal sets in V-representation and their enlargement from solved tubes.

A terminal set is the hull of ``(z, alpha)`` pairs. Each pair may carry a
one-step certificate ``(v, z+, alpha+)``: under the tube law ``u = K x + v``
every state of ``{z} ⊕ alpha X0`` is mapped into ``{z+} ⊕ alpha+ X0`` for all
parameters in the box and all disturbances. The certificate conditions are
linear in ``(z, alpha, v, z+, alpha+)``, so convex combinations of certified
points are certified by the same combination of certificates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .certifier import HomotheticTube, TubeConfig, closed_loop_matrices
from .estimation import ParamBox
from .geometry import DEFAULT_TOL, VrepSet, prune_vrep, vrep_contains


class CrossSectionNotCertified(ValueError):
    pass


class MissingCertificate(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Certificate:
    v: np.ndarray
    successor: np.ndarray      # (z+, alpha+)

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "successor": self.successor.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(np.asarray(d["v"], float), np.asarray(d["successor"], float))


@dataclass(frozen=True, eq=False)
class TerminalSet:
    points: VrepSet
    certificates: tuple
    provenance: tuple

    def __post_init__(self):
        k = len(self.points)
        if len(self.certificates) != k or len(self.provenance) != k:
            raise ValueError("one certificate slot and one provenance tag per point")
        if np.any(self.points.points[:, -1] < -DEFAULT_TOL):
            raise ValueError("alpha coordinates must be nonnegative")

    @property
    def n(self) -> int:
        return self.points.dim - 1

    def __len__(self) -> int:
        return len(self.points)

    def contains(self, z, alpha, tol: float = DEFAULT_TOL, certificate: bool = False):
        pt = np.r_[np.asarray(z, float), float(alpha)]
        return vrep_contains(self.points, pt, tol, certificate)

    def to_dict(self) -> dict:
        return {
            "points": self.points.points.tolist(),
            "certificates": [None if c is None else c.to_dict() for c in self.certificates],
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerminalSet":
        return cls(VrepSet(d["points"]),
                   tuple(None if c is None else Certificate.from_dict(c) for c in d["certificates"]),
                   tuple(d["provenance"]))


def _containment_terms(cfg: TubeConfig, theta: ParamBox):
    """``H A_cl``, ``H B`` and support constants at every parameter vertex."""
    acl, bs = closed_loop_matrices(cfg.model, theta.vertices(), cfg.K)
    H = cfg.X0.H
    HA = np.einsum("sn,jnk->jsk", H, acl)
    HB = np.einsum("sn,jnk->jsk", H, bs)
    E = cfg.X0.supports(HA.reshape(-1, cfg.model.n)).reshape(HA.shape[:2])
    return HA, HB, E


def initial_terminal(cfg: TubeConfig, theta: ParamBox, alpha_max: float = 1.0) -> TerminalSet:
    """The segment ``{(0, alpha) : 0 <= alpha <= alpha_max}`` with certificates.

    ``(0, alpha)`` maps to ``(0, max_js(E_js alpha + w_bar_s))`` under ``v = 0``;
    the successor of ``alpha_max`` must not leave the segment and
    ``alpha_max X0`` must respect the constraints under ``u = K x``.
    """
    n, m = cfg.model.n, cfg.model.m
    _, _, E = _containment_terms(cfg, theta)
    top = float(np.max(E * alpha_max + cfg.w_bar)) if E.size else float(cfg.w_bar.max())
    bottom = float(cfg.w_bar.max())
    if top > alpha_max + DEFAULT_TOL:
        raise CrossSectionNotCertified(
            f"contraction plus disturbance {top / alpha_max:.4f} exceeds 1")
    if np.any(alpha_max * cfg.c_bar > cfg.model.z - cfg.margin):
        raise CrossSectionNotCertified("scaled cross-section violates the constraints under u = Kx")
    pts = np.zeros((2, n + 1))
    pts[1, -1] = alpha_max
    certs = tuple(Certificate(np.zeros(m), np.r_[np.zeros(n), min(a, alpha_max)])
                  for a in (bottom, top))
    return TerminalSet(VrepSet(pts), certs, ("initial", "initial"))


def _combine(terminal: TerminalSet, weights: np.ndarray) -> Certificate:
    if any(terminal.certificates[i] is None for i in np.flatnonzero(weights > 0)):
        raise MissingCertificate("terminal point without a certificate carries weight")
    m = next(c.v.size for c in terminal.certificates if c is not None)
    v = np.zeros(m)
    succ = np.zeros(terminal.n + 1)
    for w, c in zip(weights, terminal.certificates):
        if w > 0:
            v += w * c.v
            succ += w * c.successor
    return Certificate(v, succ)


def _end_certificate(terminal: TerminalSet, plan: HomotheticTube) -> Certificate:
    """Certificate for a plan's final pair from its terminal-membership weights."""
    if plan.terminal_weights is None:
        raise MissingCertificate("plan carries no terminal-membership weights")
    end = np.r_[plan.z[-1], plan.alpha[-1]]
    w = np.asarray(plan.terminal_weights, float)
    if w.size == len(terminal) and np.allclose(w @ terminal.points.points, end, atol=1e-6):
        return _combine(terminal, w / w.sum())
    # the stored weights refer to an older point list; recover them by LP
    inside, w = vrep_contains(terminal.points, end, 1e-6, certificate=True)
    if not inside:
        raise MissingCertificate("plan end point is not in the terminal set")
    return _combine(terminal, w)


def _merge(terminal: TerminalSet, pts, certs, tags, tol: float) -> TerminalSet:
    if not pts:
        return terminal
    all_pts = np.vstack([terminal.points.points, np.array(pts)])
    all_pts[:, -1] = np.maximum(all_pts[:, -1], 0.0)
    all_certs = terminal.certificates + tuple(certs)
    all_tags = terminal.provenance + tuple(tags)
    # keep existing points first so pruning prefers them on ties
    pruned, idx = prune_vrep(VrepSet(all_pts), tol, return_index=True)
    return TerminalSet(pruned, tuple(all_certs[i] for i in idx), tuple(all_tags[i] for i in idx))


def enlarge_homothetic(terminal: TerminalSet, plans: Sequence[HomotheticTube],
                       theta_now: ParamBox, tol: float = DEFAULT_TOL) -> TerminalSet:
    """Hull of the terminal set and every ``(z_l, alpha_l)`` of the plans.

    Point ``l`` of a plan is certified by ``(v_l, z_{l+1}, alpha_{l+1})``; the
    last point by the combination of terminal certificates its weights select.
    Plans must come from parameter boxes containing ``theta_now``.
    """
    pts, certs, tags = [], [], []
    for plan in plans:
        if not theta_now.is_subset_of(plan.theta_snapshot, 1e-12):
            raise ValueError("plan was solved for a box that does not contain theta_now")
        end = _end_certificate(terminal, plan)
        N = plan.horizon
        for l in range(N + 1):
            pts.append(np.r_[plan.z[l], plan.alpha[l]])
            if l < N:
                certs.append(Certificate(plan.v[l].copy(), np.r_[plan.z[l + 1], plan.alpha[l + 1]]))
            else:
                certs.append(end)
            tags.append(f"plan({plan.solved_at},{l})")
    return _merge(terminal, pts, certs, tags, tol)


def augment_vertices(terminal: TerminalSet, plans: Sequence[HomotheticTube], cfg: TubeConfig,
                     tol: float = DEFAULT_TOL) -> TerminalSet:
    """Add the zero-dilation corners ``(z_l + alpha_l x_j, 0)`` of every plan tube set.

    Each corner reuses the certificate of its tube set, so the plans' own
    points should already be in ``terminal`` (see :func:`enlarge_homothetic`).
    """
    verts = cfg.X0.vertices()
    pts, certs, tags = [], [], []
    for plan in plans:
        end = _end_certificate(terminal, plan)
        N = plan.horizon
        for l in range(N + 1):
            if plan.alpha[l] <= 0:
                continue
            cert = end if l == N else Certificate(plan.v[l].copy(),
                                                  np.r_[plan.z[l + 1], plan.alpha[l + 1]])
            for x in plan.z[l] + plan.alpha[l] * verts:
                pts.append(np.r_[x, 0.0])
                certs.append(cert)
                tags.append("vertex_augmented")
    return _merge(terminal, pts, certs, tags, tol)


@dataclass
class Assumption4Report:
    ok: bool
    worst_margin: float             # min over containment and constraint rows
    worst_point: int
    containment_margin: float
    constraint_margin: float
    successors_inside: bool
    missing: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in self.__dict__.items()}


def check_assumption4(terminal: TerminalSet, cfg: TubeConfig, theta: ParamBox,
                      tol: float = 1e-6) -> Assumption4Report:
    """Verify every stored certificate at every parameter vertex.

    Checks the one-step containment row by row (cross-section vertices
    enter through the support constants), the state and input constraints
    on each tube set, and that each successor lies in the terminal set.
    """
    HA, HB, E = _containment_terms(cfg, theta)
    H = cfg.X0.H
    FK = cfg.model.F + cfg.model.G @ cfg.K
    n = cfg.model.n
    worst_c, worst_z, worst_i = np.inf, np.inf, -1
    inside, missing = True, 0
    for i, (p, cert) in enumerate(zip(terminal.points.points, terminal.certificates)):
        if cert is None:
            missing += 1
            continue
        z, a = p[:n], p[n]
        zp, ap = cert.successor[:n], cert.successor[n]
        lhs = HA @ z + E * a + HB @ cert.v + cfg.w_bar        # (J, nx)
        cm = float(np.min(H @ zp + ap - lhs))
        zm = float(np.min(cfg.model.z - (FK @ z + cfg.model.G @ cert.v + cfg.c_bar * a)))
        if min(cm, zm) < min(worst_c, worst_z):
            worst_i = i
        worst_c, worst_z = min(worst_c, cm), min(worst_z, zm)
        if not vrep_contains(terminal.points, cert.successor, tol):
            inside = False
    worst = min(worst_c, worst_z)
    ok = bool(missing == 0 and inside and worst >= -tol)
    return Assumption4Report(ok, worst, worst_i, worst_c, worst_z, inside, missing)


# ---------------------------------------------------------------- safe-set union


def tube_region_contains(pairs: np.ndarray, H: np.ndarray, x, tol: float = DEFAULT_TOL,
                         w_bar=None) -> bool:
    """``x`` (or ``{x} ⊕ W`` via ``w_bar``) inside the hull of ``{z_i} ⊕ alpha_i X0``.

    Decided by ``exists lam >= 0, sum lam = 1 : H (x - Z lam) + w_bar <= (a' lam) 1``.
    """
    pairs = np.atleast_2d(pairs)
    Z, a = pairs[:, :-1], pairs[:, -1]
    k = len(pairs)
    x = np.asarray(x, float)
    shift = np.zeros(H.shape[0]) if w_bar is None else np.asarray(w_bar, float)
    # H x - H Z lam - a' lam <= -shift
    a_ub = -(H @ Z.T) - a[None, :]
    b_ub = -(H @ x) - shift + tol
    res = linprog(np.zeros(k), A_ub=a_ub, b_ub=b_ub, A_eq=np.ones((1, k)), b_eq=[1.0],
                  bounds=(0, None), method="highs")
    return res.status == 0


@dataclass
class SafeSetUnion:
    """Membership oracle for feasible set ∪ terminal region ∪ hull of stored initial tube sets."""

    feas_oracle: Callable[[np.ndarray], bool] | None
    terminal: TerminalSet
    H: np.ndarray
    extra_hulls: np.ndarray | None = None     # rows (z_0, alpha_0) of stored plans

    def add_initial(self, plan: HomotheticTube) -> None:
        row = np.r_[plan.z[0], plan.alpha[0]][None, :]
        self.extra_hulls = row if self.extra_hulls is None else np.vstack([self.extra_hulls, row])

    def in_convex_parts(self, x, w_bar=None) -> bool:
        if tube_region_contains(self.terminal.points.points, self.H, x, w_bar=w_bar):
            return True
        return self.extra_hulls is not None and tube_region_contains(
            self.extra_hulls, self.H, x, w_bar=w_bar)


def union_membership(s: SafeSetUnion, x) -> bool:
    x = np.asarray(x, float)
    if s.in_convex_parts(x):
        return True
    return bool(s.feas_oracle is not None and s.feas_oracle(x))
