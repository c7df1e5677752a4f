"""Command-line interface: run, volume, enlarge, report, check."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (CONFIG_VERSION, ExperimentConfig, FeasibilityOracle, build_setup,
                    mc_volume, run_experiment, run_table1, write_table1, write_traces)
from .certifier import TubeConfig
from .estimation import ParamBox
from .filter import ConstraintViolated, RecursiveFeasibilityBroken
from .geometry import Box
from .plant import PlantModel
from .terminal import (TerminalSet, augment_vertices, check_assumption4, enlarge_homothetic)
from .certifier import HomotheticTube

log = logging.getLogger("ampsc")


class ConfigError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


def _load(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_manifest(out: Path, artifacts: dict, seeds: dict, command: str) -> None:
    _dump(out / "manifest.json", {"version": CONFIG_VERSION, "package_version": __version__,
                                  "command": command, "artifacts": artifacts, "seeds": seeds})


def _terminal_bundle(terminal: TerminalSet, cfg: TubeConfig, theta: ParamBox) -> dict:
    return {"version": CONFIG_VERSION, "terminal": terminal.to_dict(),
            "tube_config": cfg.to_dict(), "model": cfg.model.to_dict(), "theta": theta.to_dict()}


def _read_bundle(path):
    d = _load(path)
    try:
        model = PlantModel.from_dict(d["model"])
        cfg = TubeConfig.from_dict(d["tube_config"], model)
        return TerminalSet.from_dict(d["terminal"]), cfg, ParamBox.from_dict(d["theta"])
    except KeyError as exc:
        raise ConfigError(f"{path} lacks field {exc}") from exc


def _experiment_config(args) -> ExperimentConfig:
    base = ExperimentConfig()
    if getattr(args, "config", None):
        base = ExperimentConfig.from_dict(_load(args.config))
    over = {}
    for key in ("benchmark", "steps", "horizon", "source", "disturbance", "cadence", "mode",
                "samples", "contraction"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "scale", None) is not None:
        over["cross_section_scale"] = args.scale
    if getattr(args, "model", None):
        over["benchmark"] = args.model
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds.split(",")]
    elif getattr(args, "seed", None) is not None:
        over["seeds"] = [args.seed]
    cfg = ExperimentConfig(**{**base.to_dict(), **over})
    if cfg.steps < 1 or cfg.horizon < 1 or cfg.samples < 1:
        raise ConfigError("steps, horizon and samples must be positive")
    return cfg


def cmd_run(args) -> dict:
    cfg = _experiment_config(args)
    seed = cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg.benchmark, seed, cfg.horizon, cfg.contraction, cfg.cross_section_scale)
    run = run_experiment(setup, cfg.steps, cfg.source, cfg.disturbance, cfg.mode, cfg.cadence,
                         adapt=not args.frozen, record_time=args.timing)
    files = run.write(out)
    write_traces(run, out / "traces.csv")
    _dump(out / "config.json", cfg.to_dict())
    _dump(out / "model.json", {"model": setup.model.to_dict(),
                               "theta_star": setup.theta_star.tolist(),
                               "theta0": setup.theta0.box.to_dict()})
    _dump(out / "tube_config.json", setup.cfg.to_dict())
    _dump(out / "theta.json", run.final_theta.to_dict())
    _dump(out / "terminal.json", _terminal_bundle(setup.terminal, setup.cfg, setup.theta0))
    files.update({"traces": "traces.csv", "config": "config.json", "model": "model.json",
                  "tube_config": "tube_config.json", "theta": "theta.json",
                  "terminal": "terminal.json"})
    _write_manifest(out, files, {"seed": seed}, "run")
    return run.summary()


def _run_dir_context(run_dir: Path):
    md = _load(run_dir / "model.json")
    model = PlantModel.from_dict(md["model"])
    cfg = TubeConfig.from_dict(_load(run_dir / "tube_config.json"), model)
    theta = ParamBox.from_dict(_load(run_dir / "theta.json"))
    theta0 = ParamBox(Box.from_dict(md["theta0"]))
    return model, cfg, theta, theta0


def cmd_volume(args) -> dict:
    if args.theta.startswith("from:"):
        run_dir = Path(args.theta[5:])
        model, cfg, theta, _ = _run_dir_context(run_dir)
        terminal_path = args.terminal or run_dir / "terminal.json"
        terminal, _, _ = _read_bundle(terminal_path)
        seed = _load(run_dir / "manifest.json")["seeds"]["seed"] if args.seed is None else args.seed
    elif args.theta == "initial":
        seed = 0 if args.seed is None else args.seed
        ec = _experiment_config(args)
        setup = build_setup(ec.benchmark, seed, ec.horizon, ec.contraction, ec.cross_section_scale)
        model, cfg, theta, terminal = setup.model, setup.cfg, setup.theta0, setup.terminal
        if args.terminal:
            terminal, _, _ = _read_bundle(args.terminal)
    else:
        raise ConfigError("--theta must be 'initial' or 'from:<run dir>'")
    oracle = FeasibilityOracle(cfg, theta, terminal, tag=f"feasible({args.theta})")
    bounds = model.state_box()
    est = mc_volume(oracle, bounds, args.samples, np.random.SeedSequence(seed).spawn(4)[3])
    res = {**est.to_dict(), "solves": oracle.solves, "constraint_volume": bounds.volume()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "volume.json", res)
        _write_manifest(out, {"volume": "volume.json"}, {"seed": seed}, "volume")
    return res


def cmd_enlarge(args) -> dict:
    run_dir = Path(args.run)
    _, cfg, theta, _ = _run_dir_context(run_dir)
    terminal, _, _ = _read_bundle(args.terminal or run_dir / "terminal.json")
    plans = [HomotheticTube.from_dict(p) for p in _load(run_dir / "plans.json")]
    bigger = enlarge_homothetic(terminal, plans, theta)
    if args.augment:
        bigger = augment_vertices(bigger, plans, cfg)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    name = "terminal_enlarged.json"
    _dump(out / name, _terminal_bundle(bigger, cfg, theta))
    if args.out:
        _write_manifest(out, {"terminal": name}, {}, "enlarge")
    return {"points_before": len(terminal), "points_after": len(bigger), "file": str(out / name)}


def cmd_report(args) -> dict:
    cfg = _experiment_config(args)
    report = run_table1(cfg)
    out = Path(args.out)
    files = write_table1(report, out)
    _write_manifest(out, files, {"seeds": cfg.seeds}, "report")
    return report


def cmd_check(args) -> dict:
    terminal, cfg, theta = _read_bundle(args.terminal)
    if args.theta:
        theta = ParamBox.from_dict(_load(args.theta))
    rep = check_assumption4(terminal, cfg, theta, args.tol)
    return rep.to_dict()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ampsc", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--benchmark", help="built-in benchmark, e.g. msd:3")
        src.add_argument("--model", help="model JSON with model, theta_star, theta0")
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--contraction", type=float)
        sp.add_argument("--scale", type=float, help="cross-section scale")
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    r = sub.add_parser("run", help="closed-loop run")
    common(r)
    r.add_argument("--steps", type=int)
    r.add_argument("--source")
    r.add_argument("--disturbance", choices=("uniform", "adversarial", "zero"))
    r.add_argument("--mode", choices=("switching", "shrinking", "recursive"))
    r.add_argument("--cadence", type=int)
    r.add_argument("--frozen", action="store_true", help="keep the initial parameter box")
    r.add_argument("--timing", action="store_true", help="log solve times (not reproducible)")
    r.add_argument("--out", required=True)

    v = sub.add_parser("volume", help="Monte Carlo volume of the feasible set")
    common(v)
    v.add_argument("--theta", default="initial", help="'initial' or 'from:<run dir>'")
    v.add_argument("--terminal", help="terminal bundle JSON")
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--out")

    e = sub.add_parser("enlarge", help="enlarge the terminal set with a run's plans")
    e.add_argument("--run", required=True)
    e.add_argument("--terminal")
    e.add_argument("--augment", action="store_true", help="also add tube-set corners")
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")

    rp = sub.add_parser("report", help="volume table over several seeds")
    common(rp)
    rp.add_argument("--seeds", help="comma-separated seeds")
    rp.add_argument("--steps", type=int)
    rp.add_argument("--samples", type=int)
    rp.add_argument("--source")
    rp.add_argument("--disturbance", choices=("uniform", "adversarial", "zero"))
    rp.add_argument("--out", required=True)

    c = sub.add_parser("check", help="certify a terminal set")
    c.add_argument("--terminal", required=True)
    c.add_argument("--theta", help="parameter box JSON (defaults to the bundle's)")
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--json", action="store_true")
    return p


COMMANDS = {"run": cmd_run, "volume": cmd_volume, "enlarge": cmd_enlarge,
            "report": cmd_report, "check": cmd_check}


def _error(args, code: int, kind: str, msg: str, extra=None) -> int:
    if getattr(args, "json", False):
        print(json.dumps({"error": kind, "message": msg, **(extra or {})}), file=sys.stderr)
    else:
        print(f"{kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AMPSC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        result = COMMANDS[args.command](args)
    except (ConstraintViolated, RecursiveFeasibilityBroken) as exc:
        return _error(args, 2, type(exc).__name__, str(exc), getattr(exc, "dump", None))
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        return _error(args, 1, "ConfigError", str(exc))
    print(json.dumps(result, indent=None if args.json else 2))
    if args.command == "check" and not result["ok"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
