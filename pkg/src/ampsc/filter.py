"""Online safety filter: infeasibility switching, plan replay and the terminal policy."""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .certifier import (HomotheticTube, QpReport, TubeConfig, build_and_solve, build_problem,
                        closed_loop_matrices, _residual, tube_variables)
from .estimation import DisturbanceModelViolated, ParamBox, SetMembershipEstimator, contains
from .plant import PlantModel, TrueSystem, in_constraints
from .terminal import SafeSetUnion, TerminalSet, tube_region_contains

PASSTHROUGH_TOL = 1e-8
MODES = ("switching", "shrinking", "recursive")
BRANCHES = ("passthrough", "corrected", "backup_replay", "terminal_policy")


class ConstraintViolated(RuntimeError):
    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


class RecursiveFeasibilityBroken(RuntimeError):
    def __init__(self, msg: str, residual: float = float("nan")):
        super().__init__(msg)
        self.residual = residual


class SafetyEnvelopeExceeded(UserWarning):
    pass


@dataclass
class FilterState:
    k_inf: int
    mode: str = "switching"
    backup: HomotheticTube | None = None
    backup_step: int = -1
    step: int = 0
    active_hint: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, horizon: int, mode: str = "switching") -> "FilterState":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        return cls(k_inf=horizon - 1, mode=mode)


@dataclass
class CertifiedStep:
    u_applied: np.ndarray
    branch: str
    gap: float
    qp: QpReport
    k_inf: int
    replay_index: int = -1


def _input_box(model: PlantModel):
    """Per-input bounds implied by the pure input rows of Z (inf when absent)."""
    lo, hi = np.full(model.m, -np.inf), np.full(model.m, np.inf)
    F, G, z = model.F, model.G, model.z
    for r in range(len(z)):
        if np.any(F[r]) or np.count_nonzero(G[r]) != 1:
            continue
        j = int(np.flatnonzero(G[r])[0])
        bound = z[r] / G[r, j]
        if G[r, j] > 0:
            hi[j] = min(hi[j], bound)
        else:
            lo[j] = max(lo[j], bound)
    return lo, hi


def terminal_policy(u_learn, x, theta: ParamBox, terminal: TerminalSet, cfg: TubeConfig,
                    safe: SafeSetUnion | None = None) -> tuple[np.ndarray, bool]:
    """Safe input once the plan is exhausted; returns ``(u, accepted_learning_input)``.

    ``u_learn`` is kept when ``(x, u_learn)`` is admissible and, at every
    parameter vertex, the successor set (point plus W) lies in the safe
    region; otherwise the backup law ``K x + v`` with ``v`` from the terminal
    certificates is applied, saturated into the input bounds.
    """
    model = cfg.model
    x = np.asarray(x, float)
    u_learn = np.asarray(u_learn, float)
    safe = safe or SafeSetUnion(None, terminal, cfg.X0.H)
    if in_constraints(model, x, u_learn):
        acl, bs = closed_loop_matrices(model, theta.vertices(), np.zeros_like(cfg.K))
        if all(safe.in_convex_parts(a @ x + b @ u_learn, cfg.w_bar)
               for a, b in zip(acl, bs)):
            return u_learn, True
    v = np.zeros(model.m)
    pts = terminal.points.points
    if all(c is not None for c in terminal.certificates):
        w = _region_weights(pts, cfg.X0.H, x)
        if w is None:
            warnings.warn("state outside the terminal region; backup law without guarantee",
                          SafetyEnvelopeExceeded, stacklevel=2)
        else:
            v = sum(wi * c.v for wi, c in zip(w, terminal.certificates) if wi > 0)
    lo, hi = _input_box(model)
    return np.clip(cfg.K @ x + v, lo, hi), False


def _region_weights(pairs: np.ndarray, H: np.ndarray, x) -> np.ndarray | None:
    from scipy.optimize import linprog

    Z, a = pairs[:, :-1], pairs[:, -1]
    k = len(pairs)
    res = linprog(np.zeros(k), A_ub=-(H @ Z.T) - a[None, :], b_ub=-(H @ x) + 1e-9,
                  A_eq=np.ones((1, k)), b_eq=[1.0], bounds=(0, None), method="highs")
    return np.clip(res.x, 0, None) if res.status == 0 else None


def _passthrough_ok(rep: QpReport, x_k, u_learn, theta, terminal, cfg) -> bool:
    """Whether ``u_learn`` itself is certified: some admissible tube starts with it."""
    model = cfg.model
    if not in_constraints(model, x_k, u_learn):
        return False
    d = np.asarray(u_learn, float) - cfg.K @ x_k
    tube = rep.tube
    v = tube.v.copy()
    v[0] = d
    cand = replace(tube, v=v)
    prob = build_problem(x_k, theta, terminal, cfg, tube.horizon, "feasibility")
    if _residual(prob, tube_variables(cand)) <= cfg.residual_tol:
        return True
    pinned = build_and_solve(x_k, u_learn, theta, terminal, cfg, tube.horizon,
                             objective="feasibility", pin_v0=d)
    return pinned.feasible


def certify(state: FilterState, x_k, u_learn, theta: ParamBox, terminal: TerminalSet,
            cfg: TubeConfig, safe: SafeSetUnion | None = None) -> tuple[CertifiedStep, FilterState]:
    """One step of the filter; returns the applied input and the next state."""
    x_k = np.asarray(x_k, float)
    u_learn = np.asarray(u_learn, float)
    N = cfg.horizon
    k = state.step
    rep = build_and_solve(x_k, u_learn, theta, terminal, cfg, step=k, active_hint=state.active_hint)
    hint = rep.active if rep.active is not None else state.active_hint
    # numerically feasible but the applied pair would leave Z: treat as infeasible
    if rep.feasible and not in_constraints(cfg.model, x_k, rep.u_first):
        rep = QpReport("solver_error", None, rep.max_constraint_residual, rep.solve_time,
                       rep.iterations)
    if not rep.feasible and state.mode == "shrinking" and state.k_inf + 1 <= N - 1:
        short = build_and_solve(x_k, u_learn, theta, terminal, cfg,
                                horizon_override=N - state.k_inf - 1, step=k)
        if short.feasible and in_constraints(cfg.model, x_k, short.u_first):
            u, branch = _feasible_input(short, x_k, u_learn, theta, terminal, cfg)
            nxt = FilterState(state.k_inf + 1, state.mode, short.tube, k, k + 1, hint)
            return CertifiedStep(u, branch, float(np.linalg.norm(u_learn - short.u_first)),
                                 short, nxt.k_inf), nxt
    if rep.feasible:
        u, branch = _feasible_input(rep, x_k, u_learn, theta, terminal, cfg)
        nxt = FilterState(0, state.mode, rep.tube, k, k + 1, hint)
        return CertifiedStep(u, branch, float(np.linalg.norm(u_learn - rep.u_first)), rep, 0), nxt
    if state.mode == "recursive":
        raise RecursiveFeasibilityBroken(f"certification problem {rep.status} at step {k}",
                                         rep.max_constraint_residual)
    k_inf = min(state.k_inf + 1, N)
    idx = k - state.backup_step
    if k_inf <= N - 1 and state.backup is not None and 1 <= idx < state.backup.horizon:
        u = cfg.K @ x_k + state.backup.v[idx]
        nxt = FilterState(k_inf, state.mode, state.backup, state.backup_step, k + 1, hint)
        return CertifiedStep(u, "backup_replay", float(np.linalg.norm(u_learn - u)), rep, k_inf,
                             idx), nxt
    u, _ = terminal_policy(u_learn, x_k, theta, terminal, cfg, safe)
    nxt = FilterState(k_inf, state.mode, state.backup, state.backup_step, k + 1, hint)
    return CertifiedStep(u, "terminal_policy", float(np.linalg.norm(u_learn - u)), rep,
                         nxt.k_inf), nxt


def _feasible_input(rep: QpReport, x_k, u_learn, theta, terminal, cfg):
    if rep.tube.objective <= PASSTHROUGH_TOL and _passthrough_ok(rep, x_k, u_learn, theta,
                                                                  terminal, cfg):
        return u_learn.copy(), "passthrough"
    return rep.u_first, "corrected"


# ---------------------------------------------------------------- input sources


class UniformRandomSource:
    """Inputs drawn uniformly from ``scale`` times the input box."""

    def __init__(self, model: PlantModel, seed=0, scale: float = 1.0):
        self.lo, self.hi = (scale * b for b in _input_box(model))
        self.rng = np.random.default_rng(seed)

    def __call__(self, x, k):
        return self.rng.uniform(self.lo, self.hi)


class PdSetpointSource:
    """PD law per element towards random position setpoints, redrawn every ``hold`` steps."""

    def __init__(self, model: PlantModel, seed=0, kp: float = 1.5, kd: float = 1.0,
                 hold: int = 25, reach: float = 2.5):
        self.model, self.kp, self.kd, self.hold, self.reach = model, kp, kd, hold, reach
        self.rng = np.random.default_rng(seed)
        self.target = None

    def __call__(self, x, k):
        m = self.model.m
        if self.target is None or k % self.hold == 0:
            self.target = self.rng.uniform(-self.reach, self.reach, size=m)
        pos, vel = x[0::2][:m], x[1::2][:m]
        return self.kp * (self.target - pos) - self.kd * vel


class AdversarialBoundSource:
    """Full input towards the nearest position bound of every element."""

    def __init__(self, model: PlantModel, seed=0):
        self.model = model
        self.lo, self.hi = _input_box(model)
        self.rng = np.random.default_rng(seed)

    def __call__(self, x, k):
        m = self.model.m
        pos, vel = x[0::2][:m], x[1::2][:m]
        drift = pos + 0.5 * vel
        sign = np.where(drift == 0, self.rng.choice((-1.0, 1.0), size=m), np.sign(drift))
        return np.where(sign > 0, self.hi, self.lo)


SOURCES = {
    "uniform-random": UniformRandomSource,
    "pd-setpoint": PdSetpointSource,
    "adversarial-bound": AdversarialBoundSource,
}


def make_source(name: str, model: PlantModel, seed=0):
    try:
        return SOURCES[name](model, seed)
    except KeyError:
        raise ValueError(f"unknown source {name!r}; choose from {sorted(SOURCES)}") from None


# ---------------------------------------------------------------- closed loop


@dataclass
class RunOptions:
    mode: str = "switching"
    adapt: bool = True                # False freezes the parameter box at its initial value
    cadence: int = 1
    x0: np.ndarray | None = None
    terminal: TerminalSet | None = None
    keep_plans: bool = True


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    states: list = field(default_factory=list)
    theta_star: np.ndarray | None = None
    violations: int = 0
    estimation_violations: int = 0
    wall_time: float = 0.0

    @property
    def final_theta(self) -> ParamBox:
        return self.thetas[-1]

    def branch_trace(self) -> list:
        return [r["branch"] for r in self.rows]

    def summary(self) -> dict:
        n = len(self.rows)
        interventions = sum(r["branch"] != "passthrough" for r in self.rows)
        times = [r["solve_time"] for r in self.rows]
        counts = {b: sum(r["branch"] == b for r in self.rows) for b in BRANCHES}
        return {
            "steps": n,
            "violations": self.violations,
            "intervention_rate": interventions / n if n else 0.0,
            "branch_counts": counts,
            "final_theta": self.final_theta.to_dict() if self.thetas else None,
            "final_theta_volume": self.final_theta.box.volume() if self.thetas else None,
            "theta_star": None if self.theta_star is None else self.theta_star.tolist(),
            "mean_solve_time": float(np.mean(times)) if times else 0.0,
            "estimation_violations": self.estimation_violations,
            "wall_time": self.wall_time,
        }

    def write_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        flat = [_flatten(r) for r in self.rows]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(flat[0]))
            w.writeheader()
            w.writerows(flat)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_csv(out / "run.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2))
        (out / "plans.json").write_text(json.dumps([p.to_dict() for p in self.plans]))
        return {"run": "run.csv", "summary": "summary.json", "plans": "plans.json"}


def _fmt(v) -> str:
    return repr(float(v))


def _flatten(row: dict) -> dict:
    out = {}
    for key, val in row.items():
        if isinstance(val, np.ndarray):
            for i, x in enumerate(val):
                out[f"{key}_{i}"] = _fmt(x)
        elif isinstance(val, float):
            out[key] = _fmt(val)
        else:
            out[key] = val
    return out


def run_closed_loop(sys: TrueSystem, source: Callable, steps: int, cfg: TubeConfig,
                    theta0: ParamBox, terminal: TerminalSet, options: RunOptions | None = None,
                    record_time: bool = False) -> RunLog:
    """Simulate ``steps`` filtered steps; every applied pair is checked against Z.

    Solve times and the wall time are zeroed unless ``record_time`` so logs
    stay byte-identical across repeated runs.
    """
    opts = options or RunOptions()
    model = sys.model
    x = np.zeros(model.n) if opts.x0 is None else np.asarray(opts.x0, float)
    est = SetMembershipEstimator(model, theta0, cadence=opts.cadence)
    theta = est.theta
    state = FilterState.initial(cfg.horizon, opts.mode)
    log = RunLog(theta_star=np.asarray(sys.theta_star, float))
    t_start = time.perf_counter()
    x_prev = u_prev = None
    for k in range(steps):
        if k > 0 and opts.adapt:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DisturbanceModelViolated)
                theta, _ = est.observe(x_prev, u_prev, x)
            log.estimation_violations = est.violations
        u_learn = np.asarray(source(x, k), float)
        step, state = certify(state, x, u_learn, theta, terminal, cfg)
        u = step.u_applied
        if not in_constraints(model, x, u):
            log.violations += 1
            raise ConstraintViolated(
                f"constraint violated at step {k}",
                {"step": k, "x": x.tolist(), "u": u.tolist(), "branch": step.branch,
                 "theta": theta.to_dict()})
        log.thetas.append(theta)
        log.states.append(x.copy())
        if step.qp.feasible and opts.keep_plans and step.branch in ("passthrough", "corrected"):
            log.plans.append(step.qp.tube)
        log.rows.append({
            "step": k, "x": x.copy(), "u_learn": u_learn, "u_applied": np.asarray(u, float),
            "branch": step.branch, "gap": step.gap, "k_inf": step.k_inf,
            "replay_index": step.replay_index, "qp_status": step.qp.status,
            "objective": step.qp.tube.objective if step.qp.feasible else float("nan"),
            "theta_center": theta.center.copy(), "theta_half_widths": theta.half_widths.copy(),
            "solve_time": step.qp.solve_time if record_time else 0.0,
        })
        x_prev, u_prev = x, u
        x = sys.step(x, u)
    log.wall_time = time.perf_counter() - t_start if record_time else 0.0
    return log
