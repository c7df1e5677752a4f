"""Experiment harness: setup of the chain benchmark, Monte Carlo volumes and the volume table."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .certifier import (TubeConfig, build_problem, contractive_cross_section, set_point,
                        solve_problem, synthesize_gain, template_cross_section)
from .estimation import ParamBox
from .filter import RunLog, RunOptions, make_source, run_closed_loop
from .geometry import Box
from .plant import PlantModel, TrueSystem, msd_chain
from .terminal import TerminalSet, enlarge_homothetic, initial_terminal

CONFIG_VERSION = 1
EXTERNAL_BASELINE_MSD3 = 3.62e3     # value reported for the fixed-uncertainty comparator
TEMPLATE_ABOVE = 6                  # state dimension above which the box template is used


@dataclass(frozen=True)
class VolumeEstimate:
    volume: float
    samples: int
    hits: int
    ci95_halfwidth: float
    oracle_tag: str

    def to_dict(self) -> dict:
        return asdict(self)


def sample_box(bounds: Box, samples: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(bounds.lower, bounds.upper, size=(samples, bounds.dim))


def estimate_from_hits(hits: int, samples: int, bounds: Box, tag: str) -> VolumeEstimate:
    total = bounds.volume()
    frac = hits / samples
    ci = 1.96 * math.sqrt(frac * (1 - frac) / samples) * total
    return VolumeEstimate(frac * total, samples, int(hits), ci, tag)


def mc_volume(oracle: Callable, bounds: Box, samples: int, seed=0, tag: str = "",
              points: np.ndarray | None = None) -> VolumeEstimate:
    """Uniform Monte Carlo volume of ``{x in bounds : oracle(x)}``.

    Passing the same ``points`` (or seed) to several oracles pairs the
    estimates sample by sample.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = sample_box(bounds, samples, seed) if points is None else points
    if hasattr(oracle, "many"):
        hits = int(np.count_nonzero(oracle.many(pts)))
    else:
        hits = sum(bool(oracle(x)) for x in pts)
    return estimate_from_hits(hits, len(pts), bounds, tag or getattr(oracle, "tag", ""))


class FeasibilityOracle:
    """Exact membership in the certifier's feasible set with answer caching.

    Every solve leaves a proof that later samples can reuse:

    * infeasible: an outer cut from the solver's infeasibility certificate;
    * feasible: a polytope of start states around the solved state, for
      which the solved tube, shifted affinely with the start state, stays
      feasible. The shift moves the first tube center with the state and
      steers the difference back to zero by the horizon under the nominal
      closed loop, so the terminal weights are untouched.

    Cached proofs are exact up to the residual tolerance the certifier
    itself accepts, so answers do not depend on sample order.
    """

    def __init__(self, cfg: TubeConfig, theta: ParamBox, terminal, tag: str = "",
                 horizon: int | None = None, bounds: Box | None = None):
        self.cfg, self.theta, self.terminal, self.tag = cfg, theta, terminal, tag
        n = cfg.model.n
        # zero objective: the interior-point solution sits inside the feasible face
        self.prob = build_problem(np.zeros(n), theta, terminal, cfg, horizon, "feasibility")
        self.bounds = bounds or cfg.model.state_box()
        self._span = 2 * self.bounds.half_widths
        self._shift = self._shift_rows()
        h = self.bounds.half_widths
        self._core = max(16, 4 * n)
        diag = np.random.default_rng(0).choice((-1.0, 1.0), size=(self._core - 2 * n, n))
        self._rays = np.vstack([np.diag(h), -np.diag(h), diag * h])
        self._cuts_g = np.zeros((0, n))
        self._cuts_h = np.zeros(0)
        self._regions: list = []          # (rows, offsets) with rows @ x <= offsets
        self._hits: list = []
        self.solves = 0
        self.screened = 0
        self.errors = 0

    def _shift_rows(self) -> np.ndarray:
        """Constraint rows as a linear function of the start-state shift."""
        from .plant import assemble

        prob, cfg = self.prob, self.cfg
        L = prob.layout
        n, m, N = cfg.model.n, cfg.model.m, L["N"]
        a, b = assemble(cfg.model, self.theta.center)
        acl = a + b @ cfg.K
        ctrb = np.hstack([np.linalg.matrix_power(acl, N - 1 - l) @ b for l in range(N)])
        steer = -np.linalg.pinv(ctrb) @ np.linalg.matrix_power(acl, N)
        M = np.zeros((L["nvar"], n))
        dz = np.eye(n)
        for l in range(N):
            M[L["iz"] + l * n: L["iz"] + (l + 1) * n] = dz
            dv = steer[l * m:(l + 1) * m]
            M[L["iv"] + l * m: L["iv"] + (l + 1) * m] = dv
            dz = acl @ dz + b @ dv
        if np.abs(dz).max() > 1e-9:
            # horizon too short to steer back: shifted tubes would break the terminal rows
            M[:] = 0.0
            M[L["iz"]: L["iz"] + n] = np.eye(n)
        G = np.asarray(prob.A @ M)
        G[prob.x_rows] += cfg.X0.H
        return G

    def _add_region(self, x, y) -> None:
        prob = self.prob
        if prob.n_eq and np.abs(self._shift[:prob.n_eq]).max() > 1e-9:
            return
        slack = prob.b - prob.A @ y
        G = self._shift[prob.n_eq:]
        off = slack[prob.n_eq:] + self.cfg.residual_tol + G @ x
        # rows no state inside the sampling box can violate are dropped
        b = self.bounds
        live = G @ b.center + np.abs(G) @ b.half_widths > off
        rows, off = G[live], off[live]
        gap = off - rows @ x
        if len(off) > self._ROW_CAP:
            # keep the closest rows and confine the region to a box around x in which
            # no dropped row can be reached: |G_i (y - x)| <= r ||G_i diag(h)||_1 <= gap_i
            h = b.half_widths
            reach = gap / np.maximum(np.abs(rows) @ h, 1e-300)
            order = np.argsort(reach)
            r = reach[order[self._ROW_CAP]]
            keep = order[:self._ROW_CAP]
            eye = np.eye(len(x))
            rows = np.vstack([rows[keep], eye, -eye])
            off = np.r_[off[keep], x + r * h, -x + r * h]
            gap = off - rows @ x
        # per probe ray from x, the first facet it hits
        speed = rows @ self._rays.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(speed > 0, gap[:, None] / speed, np.inf)
        near = np.unique(np.argmin(t, axis=0)[np.isfinite(t.min(axis=0))])[:self._core]
        core, core_off = np.zeros((self._core, len(x))), np.ones(self._core)
        core[:near.size], core_off[:near.size] = rows[near], off[near]
        self._regions.append((rows, off, core, core_off))
        self._hits.append(0)

    def _add_cut(self, g, h) -> None:
        self._cuts_g = np.vstack([self._cuts_g, g])
        self._cuts_h = np.r_[self._cuts_h, h]

    def solve(self, x) -> bool:
        from .certifier import tube_variables

        set_point(self.prob, x, None, self.cfg)
        rep = solve_problem(self.prob, self.cfg, self.theta, x)
        self.solves += 1
        if rep.feasible:
            self._add_region(x, tube_variables(rep.tube))
            return True
        if rep.status == "solver_error":
            self.errors += 1
        elif rep.cut is not None and rep.cut[0] @ x > rep.cut[1]:
            self._add_cut(*rep.cut)
        return False

    def _decide(self, X) -> np.ndarray:
        """+1 proven feasible, -1 proven infeasible, 0 unknown, from cached proofs."""
        res = np.zeros(len(X), np.int8)
        if self._cuts_h.size:
            res[np.any(X @ self._cuts_g.T > self._cuts_h, axis=1)] = -1
        open_ = np.flatnonzero(res == 0)
        if not open_.size or not self._regions:
            return res
        # screening with each region's nearest facets, full check on survivors
        R = len(self._regions)
        core = np.concatenate([r[2] for r in self._regions])    # (R*K, n)
        core_off = np.concatenate([r[3] for r in self._regions])
        Y = X[open_]
        inside = (core @ Y.T <= core_off[:, None]).reshape(R, self._core, len(Y))
        maybe = inside.all(axis=1)
        self.screened += int(maybe.sum())
        hits = np.asarray(self._hits)
        for col in np.flatnonzero(maybe.any(axis=0)):
            cand = np.flatnonzero(maybe[:, col])
            for r in cand[np.argsort(-hits[cand], kind="stable")]:
                rows, off = self._regions[r][:2]
                if np.all(rows @ Y[col] <= off):
                    res[open_[col]] = 1
                    self._hits[r] += 1
                    break
        return res

    _BATCH = 256         # samples decided together
    _ROW_CAP = 512       # rows kept per feasible region

    def __call__(self, x) -> bool:
        return bool(self.many(np.asarray(x, float)[None, :])[0])

    def many(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        out = np.zeros(len(pts), bool)
        for lo in range(0, len(pts), self._BATCH):
            X = pts[lo:lo + self._BATCH]
            res = self._decide(X)
            open_ = np.flatnonzero(res == 0)
            while open_.size:
                i, open_ = open_[0], open_[1:]
                n_cuts, n_regs = len(self._cuts_h), len(self._regions)
                res[i] = 1 if self.solve(X[i]) else -1
                if not open_.size:
                    break
                # only the proof just added can settle the remaining samples
                Y = X[open_]
                if len(self._cuts_h) > n_cuts:
                    settled = Y @ self._cuts_g[-1] > self._cuts_h[-1]
                    res[open_[settled]] = -1
                elif len(self._regions) > n_regs:
                    rows, off = self._regions[-1][:2]
                    settled = np.all(Y @ rows.T <= off, axis=1)
                    res[open_[settled]] = 1
                    self._hits[-1] += int(settled.sum())
                else:
                    continue
                open_ = open_[~settled]
            out[lo:lo + len(X)] = res > 0
        return out


# ---------------------------------------------------------------- setup


@dataclass
class ExperimentConfig:
    benchmark: str = "msd:3"
    steps: int = 150
    horizon: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    source: str = "uniform-random"
    disturbance: str = "uniform"
    cadence: int = 1
    enlargement: str = "offline"
    mode: str = "switching"
    samples: int = 100_000
    contraction: float = 0.99
    cross_section_scale: float | None = None   # None picks the benchmark default
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {d.get('version')}")
        return cls(**d)


def default_scale(n: int) -> float:
    """Cross-section size relative to the constraints, per state dimension."""
    return 0.07 if n <= TEMPLATE_ABOVE else 0.9


@dataclass
class Setup:
    model: PlantModel
    theta_star: np.ndarray
    theta0: ParamBox
    K: np.ndarray
    cfg: TubeConfig
    terminal: TerminalSet
    seeds: dict


def seed_streams(seed: int) -> dict:
    """Independent child seeds for the plant draw, disturbance, source and sampling."""
    kids = np.random.SeedSequence(seed).spawn(4)
    return dict(zip(("plant", "disturbance", "source", "volume"), kids))


def load_model(spec: str, seed: int = 0):
    """``msd:<n>`` or a JSON file with ``model``, ``theta_star`` and ``theta0``."""
    streams = seed_streams(seed)
    if spec.startswith("msd:"):
        try:
            n_msd = int(spec[4:])
        except ValueError:
            raise ValueError(f"bad benchmark {spec!r}") from None
        model, theta_star, theta0 = msd_chain(n_msd, streams["plant"])
        return model, theta_star, theta0
    d = json.loads(Path(spec).read_text())
    model = PlantModel.from_dict(d["model"])
    return model, np.asarray(d["theta_star"], float), Box.from_dict(d["theta0"])


def build_setup(benchmark: str = "msd:3", seed: int = 0, horizon: int = 10,
                contraction: float = 0.99, scale: float | None = None) -> Setup:
    model, theta_star, theta0_box = load_model(benchmark, seed)
    theta0 = ParamBox(theta0_box)
    K, _ = synthesize_gain(model, theta0)
    scale = default_scale(model.n) if scale is None else scale
    if model.n <= TEMPLATE_ABOVE:
        X0 = contractive_cross_section(model, theta0, K, lam=contraction, scale=scale)
    else:
        X0 = template_cross_section(model, theta0, K, margin=scale)
    cfg = TubeConfig.build(model, K, X0, horizon)
    terminal = initial_terminal(cfg, theta0)
    return Setup(model, theta_star, theta0, K, cfg, terminal, seed_streams(seed))


def run_experiment(setup: Setup, steps: int, source: str = "uniform-random",
                   disturbance: str = "uniform", mode: str = "switching", cadence: int = 1,
                   adapt: bool = True, record_time: bool = False) -> RunLog:
    sys = TrueSystem(setup.model, setup.theta_star, setup.seeds["disturbance"], disturbance)
    src = make_source(source, setup.model, setup.seeds["source"])
    opts = RunOptions(mode=mode, adapt=adapt, cadence=cadence)
    return run_closed_loop(sys, src, steps, setup.cfg, setup.theta0, setup.terminal, opts,
                           record_time=record_time)


# ---------------------------------------------------------------- volume table


@dataclass
class Table1Row:
    seed: int
    constraint_volume: float
    vol_theta0: VolumeEstimate
    vol_final: VolumeEstimate
    vol_enlarged: VolumeEstimate
    terminal_points: int
    paired_enlarged_dominates: bool
    paired_final_dominates: bool
    seconds: float

    @property
    def gain_final(self) -> float:
        return self.vol_final.volume / self.vol_theta0.volume - 1 if self.vol_theta0.hits else math.inf

    @property
    def gain_enlarged(self) -> float:
        return self.vol_enlarged.volume / self.vol_theta0.volume - 1 if self.vol_theta0.hits else math.inf

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "constraint_volume": self.constraint_volume,
            "vol_theta0": self.vol_theta0.to_dict(), "vol_final": self.vol_final.to_dict(),
            "vol_enlarged": self.vol_enlarged.to_dict(), "terminal_points": self.terminal_points,
            "gain_final_pct": 100 * self.gain_final, "gain_enlarged_pct": 100 * self.gain_enlarged,
            "paired_enlarged_dominates": self.paired_enlarged_dominates,
            "paired_final_dominates": self.paired_final_dominates, "seconds": self.seconds,
        }


def volume_row(setup: Setup, log: RunLog, samples: int, seed: int,
               enlarged: TerminalSet | None = None) -> Table1Row:
    """Paired volumes under the initial box, the final box, and the enlarged terminal set."""
    t0 = time.perf_counter()
    bounds = setup.model.state_box()
    pts = sample_box(bounds, samples, setup.seeds["volume"])
    final = log.final_theta
    if enlarged is None:
        enlarged = enlarge_homothetic(setup.terminal, log.plans, final)
    o0 = FeasibilityOracle(setup.cfg, setup.theta0, setup.terminal, "theta0")
    of = FeasibilityOracle(setup.cfg, final, setup.terminal, "theta_final")
    oe = FeasibilityOracle(setup.cfg, final, enlarged, "theta_final_enlarged")
    h0, hf, he = o0.many(pts), of.many(pts), oe.many(pts)
    return Table1Row(
        seed, bounds.volume(),
        estimate_from_hits(int(h0.sum()), samples, bounds, o0.tag),
        estimate_from_hits(int(hf.sum()), samples, bounds, of.tag),
        estimate_from_hits(int(he.sum()), samples, bounds, oe.tag),
        len(enlarged), bool(np.all(he >= hf)), bool(np.all(hf >= h0)),
        time.perf_counter() - t0)


def run_table1(cfg: ExperimentConfig, progress: Callable | None = None) -> dict:
    rows = []
    for seed in cfg.seeds:
        setup = build_setup(cfg.benchmark, seed, cfg.horizon, cfg.contraction,
                            cfg.cross_section_scale)
        log = run_experiment(setup, cfg.steps, cfg.source, cfg.disturbance, cfg.mode,
                             cfg.cadence)
        row = volume_row(setup, log, cfg.samples, seed)
        rows.append(row)
        if progress:
            progress(row)
    return table1_report(cfg, rows)


def table1_report(cfg: ExperimentConfig, rows: list) -> dict:
    rep = {"config": cfg.to_dict(), "rows": [r.to_dict() for r in rows]}
    if cfg.benchmark == "msd:3":
        rep["external_context"] = {"fixed_uncertainty_comparator_volume": EXTERNAL_BASELINE_MSD3}
    return rep


def write_table1(report: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table1.json").write_text(json.dumps(report, indent=2))
    cols = ["seed", "constraint_volume", "vol_theta0", "ci_theta0", "vol_final", "ci_final",
            "vol_enlarged", "ci_enlarged", "gain_final_pct", "gain_enlarged_pct"]
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in report["rows"]:
            w.writerow([r["seed"], r["constraint_volume"],
                        r["vol_theta0"]["volume"], r["vol_theta0"]["ci95_halfwidth"],
                        r["vol_final"]["volume"], r["vol_final"]["ci95_halfwidth"],
                        r["vol_enlarged"]["volume"], r["vol_enlarged"]["ci95_halfwidth"],
                        r["gain_final_pct"], r["gain_enlarged_pct"]])
    return {"table_json": "table1.json", "table_csv": "table1.csv"}


def write_traces(log: RunLog, path) -> None:
    """Long-format CSV (step, quantity, index, value) for plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "quantity", "index", "value"])
        for r in log.rows:
            for key in ("x", "u_applied", "theta_half_widths"):
                for i, v in enumerate(r[key]):
                    w.writerow([r["step"], key, i, repr(float(v))])
