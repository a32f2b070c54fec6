"""Command-line entry point: ``bellman-calib {simulate,estimate,experiment}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .estimators import PreconditionError
from .experiment import (
    ESTIMATE_METHODS,
    METHODS,
    MethodSettings,
    monte_carlo_experiment,
    run_methods,
)
from .mdp import OverlapError, TransitionDataset
from .riesz import RepresenterError
from .simulation import INIT, RAW_INIT, SimConfig, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, OverlapError, PreconditionError, RepresenterError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(path: Path, command: str, resolved: dict, seed: int, started: str, outputs: list[str]) -> Path:
    manifest = {
        "command": command,
        "config_hash": _config_hash({"command": command, **resolved}),
        "config": resolved,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
    }
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


def _override(cfg: dict, args: argparse.Namespace, names: Sequence[str]) -> dict:
    out = dict(cfg)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _settings(cfg: dict) -> MethodSettings:
    keys = set(MethodSettings.__dataclass_fields__)
    return MethodSettings.from_json({k: v for k, v in cfg.items() if k in keys})


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = _now()
    cfg = _override(_load_config(args.config), args, ("n", "gamma", "beta", "seed"))
    cfg.setdefault("gamma", 0.0)
    cfg.setdefault("beta", 0.0)
    if "n" not in cfg:
        raise UsageError("simulate needs n (flag --n or config field)")
    sim = SimConfig(**cfg)
    out = Path(args.out)
    data = generate_dataset(sim)
    data.to_csv(out)
    resolved = {**sim.to_json(), "initial_probabilities": {k: list(v) for k, v in INIT.items()},
                "initial_probabilities_as_listed": {k: list(v) for k, v in RAW_INIT.items()}}
    outputs = [str(out), str(out.with_name(out.stem + ".alphabet.json"))]
    write_manifest(out.with_name(out.stem + ".manifest.json"), "simulate", resolved, sim.seed, started, outputs)
    return EXIT_OK


def cmd_estimate(args) -> int:
    started = _now()
    cfg = _override(_load_config(args.config), args, ("gamma", "seed", "folds", "bootstrap"))
    method = args.method or cfg.pop("method", None)
    cfg.pop("method", None)
    if method not in ESTIMATE_METHODS:
        raise UsageError(f"--method must be one of {list(ESTIMATE_METHODS)}, got {method!r}")
    if "gamma" not in cfg:
        raise UsageError("estimate needs gamma (flag --gamma or config field)")
    gamma = float(cfg.pop("gamma"))
    seed = int(cfg.pop("seed", 0))
    settings = _settings(cfg)
    data = TransitionDataset.from_csv(args.data)
    if data.states is None or "z" not in data.states.fields:
        raise UsageError("dataset alphabet sidecar must describe states with a treatment field 'z'")
    result = run_methods(data, gamma, [method], settings, seed)[method]
    if isinstance(result, Exception):
        raise result
    out = Path(args.out)
    manifest = out.with_name(out.stem + ".manifest.json")
    report = {**result.to_json(), "gamma": gamma, "data": str(args.data), "manifest": manifest.name}
    out.write_text(json.dumps(report, indent=1) + "\n")
    write_manifest(manifest, "estimate", {"method": method, "gamma": gamma, "data": str(args.data),
                                          **settings.to_json()}, seed, started, [str(out)])
    return EXIT_OK


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def cmd_experiment(args) -> int:
    started = _now()
    cfg = _load_config(args.config)
    grid_keys = {"gamma": "gammas", "beta": "betas", "n": "ns"}
    for flag, key in grid_keys.items():
        value = getattr(args, flag)
        if value is not None:
            cfg[key] = [value]
    for name in ("reps", "seed", "folds", "bootstrap"):
        if getattr(args, name) is not None:
            cfg[name] = getattr(args, name)
    if args.method:
        cfg["methods"] = [m for chunk in args.method for m in chunk.split(",") if m]
    methods = cfg.pop("methods", list(METHODS))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; expected a subset of {list(METHODS)}")
    missing = [k for k in grid_keys.values() if k not in cfg]
    if missing:
        raise UsageError(f"experiment config lacks {missing}")
    reps = int(cfg.pop("reps", 1))
    seed = int(cfg.pop("seed", 0))
    treat_prob = float(cfg.pop("treat_prob", 0.25))
    gammas, betas, ns = (_as_list(cfg.pop(k)) for k in grid_keys.values())
    if not (gammas and betas and ns):
        raise UsageError("experiment grid is empty")
    grid = [SimConfig(int(n), float(g), float(b), treat_prob, seed) for g in gammas for b in betas for n in ns]
    settings = _settings(cfg)
    leftover = set(cfg) - set(MethodSettings.__dataclass_fields__)
    if leftover:
        raise UsageError(f"unknown experiment config fields {sorted(leftover)}")
    out = Path(args.out)
    rows, summary = monte_carlo_experiment(grid, methods, reps, out, settings)
    failed = sum(1 for r in rows if r["estimate"] == "NA")
    resolved = {"gammas": gammas, "betas": betas, "ns": ns, "reps": reps, "treat_prob": treat_prob,
                "methods": methods, **settings.to_json()}
    outputs = [str(out / name) for name in ("results.csv", "summary.csv", "plot_data.json", "truths.json")]
    write_manifest(out / "manifest.json", "experiment", resolved, seed, started, outputs)
    if failed:
        sys.stderr.write(json.dumps({"warning": "method failures recorded as NA rows", "count": failed}) + "\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bellman-calib", description="Bellman-calibrated off-policy estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a simulated A/B-test dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate the long-term ATE on a dataset")
    p.add_argument("data")
    p.add_argument("--method", choices=ESTIMATE_METHODS)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--bootstrap", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", help="run a Monte Carlo grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--method", action="append", help="method name(s); repeat or comma-separate")
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--bootstrap", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except OSError as exc:
        return _fail(EXIT_USAGE, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
