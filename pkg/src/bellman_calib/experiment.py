"""Monte Carlo driver: bias, SE and coverage of each estimator over a grid of DGP cells."""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import fitted_q_calibration
from .estimators import (
    DEFAULT_LEVEL,
    EstimateReport,
    InfluenceValues,
    bootstrap_calibration_ci,
    drl_model_robust,
    drl_nonparametric,
    drl_semiparametric,
    eif_variance,
    plugin_calibrated,
    wald_interval,
)
from .fqi import FQIConfig, cell_features, cross_fit_fqi, state_action_features
from .mdp import DEFAULT_TRUNCATION, TabularQ, TransitionDataset
from .regression import DEFAULT_MIN_POOL_WEIGHT, RegressorSpec, fit_least_squares
from .riesz import estimate_representer_linear, one_hot_cells, second_stage_regression, tree_leaf_features
from .simulation import (
    SimConfig,
    SimTruth,
    ate_functional,
    generate_dataset,
    oracle_truth,
    rep_seed,
    stay_policy,
)

METHODS = ("plugin-calibrated", "drl-semi", "drl-robust", "drl-nonparam", "oracle-plugin")
ESTIMATE_METHODS = METHODS[:4]

CSV_FIELDS = ("method", "gamma", "beta", "n", "rep", "estimate", "se", "ci_lo", "ci_hi", "covered", "truth", "seed")

THREADS_ENV = "BELLMAN_CALIB_THREADS"


@dataclass(frozen=True)
class MethodSettings:
    """Nuisance and inference settings shared by every method in a run."""

    folds: int = 5
    bootstrap: int = 500
    regressor: RegressorSpec = field(default_factory=lambda: RegressorSpec("boosted-trees"))
    fqi_tol: float = 1e-6
    fqi_max_iters: int | None = None
    min_pool_weight: float = DEFAULT_MIN_POOL_WEIGHT
    truncation: float = DEFAULT_TRUNCATION
    ridge: float | None = None
    level: float = DEFAULT_LEVEL
    tie_reward: bool = False

    def __post_init__(self) -> None:
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.bootstrap < 0:
            raise ValueError("bootstrap must be >= 0 (0 selects Wald intervals)")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    def to_json(self) -> dict:
        out = asdict(self)
        out["regressor"] = self.regressor.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "MethodSettings":
        obj = dict(obj)
        if "regressor" in obj:
            obj["regressor"] = RegressorSpec.from_json(obj["regressor"])
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown settings {sorted(unknown)}")
        return cls(**obj)


def _check_methods(methods: Sequence[str]) -> tuple[str, ...]:
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown method(s) {bad}; expected a subset of {METHODS}")
    if not methods:
        raise ValueError("no methods selected")
    return tuple(methods)


def run_methods(
    data: TransitionDataset,
    gamma: float,
    methods: Sequence[str],
    settings: MethodSettings,
    seed: int,
    truth: SimTruth | None = None,
) -> dict[str, EstimateReport | Exception]:
    """Fit shared nuisances once and run each requested method on one dataset.

    A method that raises is reported as the exception instead of a report.
    """
    methods = _check_methods(methods)
    pi = stay_policy(data.states)
    functional = ate_functional(data.states)
    rng = np.random.default_rng([seed, 0x5EED])
    out: dict[str, EstimateReport | Exception] = {}
    needs_base = any(m != "oracle-plugin" for m in methods)
    base = None
    if needs_base:
        cfg = FQIConfig(gamma, settings.regressor, state_action_features(data.states),
                        settings.fqi_tol, settings.fqi_max_iters)
        base = cross_fit_fqi(data, pi, cfg, settings.folds, seed=int(rng.integers(2**63)))
    boot_seed = int(rng.integers(2**63))

    for method in methods:
        try:
            if method == "plugin-calibrated":
                qstar, report = fitted_q_calibration(data, pi, base, gamma,
                                                     min_pool_weight=settings.min_pool_weight)
                rep = plugin_calibrated(data, pi, functional, qstar, gamma, settings.level)
                rep.diagnostics["calibration"] = report.to_json()
                if settings.bootstrap > 0:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        rep.ci = bootstrap_calibration_ci(
                            data, pi, functional, base, gamma, settings.bootstrap, settings.level,
                            seed=boot_seed, min_pool_weight=settings.min_pool_weight)
                    rep.diagnostics["ci"] = f"bootstrap-percentile B={settings.bootstrap}"
                else:
                    rep.diagnostics["ci"] = "wald"
                out[method] = rep
            elif method == "drl-nonparam":
                out[method] = drl_nonparametric(data, pi, functional, base, None, gamma, settings.level,
                                                settings.truncation)
            elif method in ("drl-semi", "drl-robust"):
                out[method] = _adaptive_drl(method, data, pi, functional, base, gamma, settings)
            elif method == "oracle-plugin":
                if truth is None:
                    raise ValueError("oracle-plugin needs the true Q-function")
                m = functional.values(data, TabularQ(truth.q))
                est = data.mean(m)
                infl = InfluenceValues(m - est, data.weights)
                se = math.sqrt(eif_variance(infl))
                out[method] = EstimateReport(est, se, wald_interval(est, se, settings.level), method,
                                             settings.level, {}, infl)
        except Exception as exc:  # recorded as an NA row by the caller
            out[method] = exc
    return out


def _adaptive_drl(method, data, pi, functional, base, gamma, settings):
    """DRL over the class spanned by one-hot leaf indicators of a fitted FQI tree model."""
    model = base.models[0]
    if model.regressor.spec.backend == "boosted-trees":
        features = tree_leaf_features(data, model)
    else:
        features = one_hot_cells(pi.n_states, pi.n_actions)
    weights = estimate_representer_linear(data, pi, functional, features, gamma, settings.ridge)
    if method == "drl-semi":
        return drl_semiparametric(data, pi, functional, base, weights, gamma, settings.level)
    cells = cell_features(pi.n_actions)
    tab = RegressorSpec("tabular-mean")
    t_q_hat = second_stage_regression(data, pi, base, cells, tab, gamma)
    if settings.tie_reward:
        r_hat = t_q_hat
    else:
        reward_fit = fit_least_squares(tab, cells(data.a0, data.s0), data.y0, data.w)

        def r_hat(a, s):
            return reward_fit.predict(cells(a, s))

    return drl_model_robust(data, pi, functional, base, weights, r_hat, t_q_hat, gamma, settings.level)


# -- Monte Carlo -------------------------------------------------------------


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def truth_key(gamma: float, beta: float, treat_prob: float) -> str:
    return f"gamma={gamma!r},beta={beta!r},treat_prob={treat_prob!r}"


def cached_truths(cells: Sequence[SimConfig], path: Path | None = None) -> dict[str, SimTruth]:
    """Oracle truths per (gamma, beta, treat_prob), persisted to ``truths.json`` when ``path`` is given."""
    stored = {}
    if path is not None and path.exists():
        stored = json.loads(path.read_text())
    truths = {}
    for cfg in cells:
        key = truth_key(cfg.gamma, cfg.beta, cfg.treat_prob)
        if key not in truths:
            truths[key] = oracle_truth(cfg)
            stored[key] = {"gamma": cfg.gamma, "beta": cfg.beta, "treat_prob": cfg.treat_prob,
                           **truths[key].to_json()}
    if path is not None:
        path.write_text(json.dumps(stored, indent=1, sort_keys=True) + "\n")
    return truths


def _one_rep(task):
    cfg, rep, methods, settings, truth = task
    seed = rep_seed(cfg.seed, rep)
    data = generate_dataset(replace(cfg, seed=seed))
    results = run_methods(data, cfg.gamma, methods, settings, seed, truth)
    rows = []
    for method in methods:
        res = results[method]
        row = {"method": method, "gamma": cfg.gamma, "beta": cfg.beta, "n": cfg.n, "rep": rep,
               "truth": truth.true_ate, "seed": seed}
        if isinstance(res, Exception):
            row.update(estimate="NA", se="NA", ci_lo="NA", ci_hi="NA", covered="NA",
                       error=f"{type(res).__name__}: {res}")
        else:
            lo, hi = res.ci
            row.update(estimate=res.estimate, se=res.se, ci_lo=lo, ci_hi=hi,
                       covered=int(lo <= truth.true_ate <= hi))
        rows.append(row)
    return rows


def monte_carlo_experiment(
    grid: Sequence[SimConfig],
    methods: Sequence[str],
    reps: int,
    out: str | Path | None = None,
    settings: MethodSettings | None = None,
    threads: int | None = None,
) -> tuple[list[dict], list[dict]]:
    """Run every (cell, rep) pair and summarise by (gamma, beta, n, method).

    Repetition ``r`` of a cell draws its data from ``rep_seed(cell.seed, r)``,
    so results do not depend on scheduling. With ``out`` set, raw rows are
    appended to ``results.csv`` and ``summary.csv``, ``plot_data.json`` and
    ``truths.json`` are written. Returns ``(raw_rows, summary_rows)``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not grid:
        raise ValueError("empty grid")
    methods = _check_methods(methods)
    settings = settings or MethodSettings()
    out_dir = Path(out) if out is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    truths = cached_truths(grid, None if out_dir is None else out_dir / "truths.json")
    tasks = [(cfg, rep, methods, settings, truths[truth_key(cfg.gamma, cfg.beta, cfg.treat_prob)])
             for cfg in grid for rep in range(reps)]
    workers = min(threads or thread_cap(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_one_rep, tasks))
    else:
        chunks = [_one_rep(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    summary = summarize(rows)
    if out_dir is not None:
        append_rows(out_dir / "results.csv", rows)
        write_summary(out_dir / "summary.csv", summary)
        (out_dir / "plot_data.json").write_text(json.dumps(plot_data(summary), indent=1) + "\n")
    return rows, summary


def append_rows(path: Path, rows: Sequence[dict]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def summarize(rows: Sequence[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((row["gamma"], row["beta"], row["n"], row["method"]), []).append(row)
    summary = []
    for (gamma, beta, n, method), group in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2],
                                                                                 METHODS.index(kv[0][3]))):
        ok = [r for r in group if r["estimate"] != "NA"]
        est = np.array([r["estimate"] for r in ok], dtype=float)
        truth = group[0]["truth"]
        summary.append({
            "gamma": gamma, "beta": beta, "n": n, "method": method,
            "reps": len(group), "failed": len(group) - len(ok),
            "truth": truth,
            "mean_bias": float(est.mean() - truth) if ok else float("nan"),
            "emp_sd": float(est.std(ddof=1)) if len(ok) > 1 else float("nan"),
            "mean_se": float(np.mean([r["se"] for r in ok])) if ok else float("nan"),
            "coverage": float(np.mean([r["covered"] for r in ok])) if ok else float("nan"),
        })
    return summary


SUMMARY_FIELDS = ("gamma", "beta", "n", "method", "reps", "failed", "truth", "mean_bias", "emp_sd", "mean_se",
                  "coverage")


def write_summary(path: Path, summary: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)


def plot_data(summary: Sequence[dict]) -> dict:
    """Bias/SE/coverage series indexed by gamma, one per (beta, n, method)."""
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    series: dict[tuple, dict] = {}
    for row in sorted(summary, key=lambda r: r["gamma"]):
        key = (row["beta"], row["n"], row["method"])
        s = series.setdefault(key, {"beta": row["beta"], "n": row["n"], "method": row["method"],
                                    "gamma": [], "bias": [], "se": [], "emp_sd": [], "coverage": []})
        s["gamma"].append(row["gamma"])
        s["bias"].append(clean(row["mean_bias"]))
        s["se"].append(clean(row["mean_se"]))
        s["emp_sd"].append(clean(row["emp_sd"]))
        s["coverage"].append(clean(row["coverage"]))
    return {"series": list(series.values())}
