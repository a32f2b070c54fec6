"""Estimators of linear functionals of the Q-function and their inference.

All estimators return an :class:`EstimateReport` carrying the per-record
influence values, so contrasts and Monte Carlo summaries can be formed after
the fact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .calibration import (
    DEFAULT_CERTIFY_TOL,
    DEFAULT_MAX_ITERS,
    CalibratedQ,
    _calibrate,
    _Scores,
    check_bellman_orthogonality,
)
from .functionals import FunctionalSpec
from .mdp import (
    DEFAULT_TRUNCATION,
    Policy,
    TabularMDP,
    TransitionDataset,
    tabular_occupancy_ratio,
    value_under_policy,
)
from .regression import DEFAULT_MIN_POOL_WEIGHT
from .riesz import RieszWeights, estimate_representer_dimreduced, one_hot_cells, tabular_weights

DEFAULT_LEVEL = 0.95
EMPTY_CELL_SMOOTHING = 1e-9


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InfluenceValues:
    values: np.ndarray
    weights: np.ndarray | None = None


@dataclass(eq=False)
class EstimateReport:
    estimate: float
    se: float
    ci: tuple[float, float]
    method: str
    level: float = DEFAULT_LEVEL
    diagnostics: dict = field(default_factory=dict)
    influence: InfluenceValues | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "estimate": self.estimate,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def eif_variance(values, weights=None) -> float:
    """Squared standard error: sample variance (``n - 1`` divisor) over ``n``."""
    if isinstance(values, InfluenceValues):
        values, weights = values.values, values.weights
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least two influence values")
    if weights is None:
        return float(np.var(v, ddof=1) / n)
    w = np.asarray(weights, dtype=float)
    w = w * (n / w.sum())
    centred = v - np.dot(w, v) / n
    return float(np.dot(w, centred**2) / (n - 1) / n)


def wald_interval(estimate: float, se: float, level: float = DEFAULT_LEVEL) -> tuple[float, float]:
    z = float(stats.norm.ppf(0.5 + level / 2))
    return (estimate - z * se, estimate + z * se)


def _report(method, data, summand, level, diagnostics) -> EstimateReport:
    est = data.mean(summand)
    phi = summand - est
    infl = InfluenceValues(phi, data.weights)
    se = float(np.sqrt(eif_variance(infl)))
    return EstimateReport(est, se, wald_interval(est, se, level), method, level, diagnostics, infl)


def _td_errors(data, pi, q, gamma) -> tuple[np.ndarray, np.ndarray]:
    q0 = np.asarray(q(data.a0, data.s0), dtype=float)
    if gamma > 0:
        target = data.y0 + gamma * value_under_policy(q, pi, data.s1)
    else:
        target = data.y0
    return q0, target - q0


def _weights_on_records(weights: RieszWeights, data) -> np.ndarray:
    wt = np.asarray(weights.weight(data.a0, data.s0), dtype=float)
    bad = np.flatnonzero(~np.isfinite(wt))
    if bad.size:
        raise ValueError(f"non-finite representer weight at record {bad[0]}")
    return wt


def plugin_calibrated(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    qstar,
    gamma: float,
    level: float = DEFAULT_LEVEL,
    certify_tol: float = DEFAULT_CERTIFY_TOL,
) -> EstimateReport:
    """Plug-in mean of ``m(q*)`` for a Bellman-calibrated ``q*``.

    The standard error comes from the influence function built with the
    dimension-reduced representer on the levels of ``q*``.
    """
    resid = check_bellman_orthogonality(data, pi, qstar, gamma)
    if resid > certify_tol:
        raise PreconditionError(f"q* is not Bellman-calibrated: orthogonality residual {resid:.3g}")
    m = functional.values(data, qstar)
    rw = estimate_representer_dimreduced(data, pi, functional, qstar, gamma)
    _, td = _td_errors(data, pi, qstar, gamma)
    wt = _weights_on_records(rw, data)
    est = data.mean(m)
    phi = wt * td + m - est
    infl = InfluenceValues(phi, data.weights)
    se = float(np.sqrt(eif_variance(infl)))
    diag = {
        "orthogonality_residual": resid,
        "n_levels": int(rw.coef.shape[0]),
        "representer_max_weight": float(np.max(np.abs(rw.diagnostics["weights_per_level"]))),
        "correction": data.mean(wt * td),
    }
    return EstimateReport(est, se, wald_interval(est, se, level), "plugin-calibrated", level, diag, infl)


def _nuisance_norms(data: TransitionDataset, wt: np.ndarray, td: np.ndarray) -> dict:
    # scale of the second-order remainder: product of the two nuisance L2 norms
    w_rms = float(np.sqrt(data.mean(wt**2)))
    td_rms = float(np.sqrt(data.mean(td**2)))
    return {"representer_max_weight": float(np.max(np.abs(wt))), "weight_rms": w_rms, "td_rms": td_rms,
            "nuisance_norm_product": w_rms * td_rms}


def drl_semiparametric(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    q_hat,
    weights: RieszWeights,
    gamma: float,
    level: float = DEFAULT_LEVEL,
    method: str = "drl-semi",
) -> EstimateReport:
    """``mean m(q) + mean T(alpha) * (Y0 + gamma V(q)(S1) - q(A0, S0))``."""
    m = functional.values(data, q_hat)
    _, td = _td_errors(data, pi, q_hat, gamma)
    wt = _weights_on_records(weights, data)
    correction = wt * td
    diag = {"plugin": data.mean(m), "correction": data.mean(correction), **_nuisance_norms(data, wt, td)}
    return _report(method, data, m + correction, level, diag)


def drl_model_robust(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    q_hat,
    weights: RieszWeights,
    r_hat,
    t_q_hat,
    gamma: float,
    level: float = DEFAULT_LEVEL,
) -> EstimateReport:
    """Semiparametric DRL plus the projection correction for a misspecified model.

    Adds ``mean (r - T(q))(A0,S0) * {alpha(A0,S0) - gamma V(alpha)(S1) - T(alpha)(A0,S0)}``,
    which vanishes when ``r_hat`` is ``t_q_hat``.
    """
    m = functional.values(data, q_hat)
    _, td = _td_errors(data, pi, q_hat, gamma)
    wt = _weights_on_records(weights, data)
    summand = m + wt * td
    diag = {"plugin": data.mean(m), "correction": data.mean(wt * td), **_nuisance_norms(data, wt, td)}
    if r_hat is t_q_hat:
        diag["robust_correction"] = 0.0
        return _report("drl-robust", data, summand, level, diag)
    if weights.alpha is None:
        raise ValueError("model-robust DRL needs the representer alpha, not only its weights")
    alpha0 = np.asarray(weights.alpha(data.a0, data.s0), dtype=float)
    alpha_next = value_under_policy(weights.alpha, pi, data.s1) if gamma > 0 else 0.0
    gap = np.asarray(r_hat(data.a0, data.s0), dtype=float) - np.asarray(t_q_hat(data.a0, data.s0), dtype=float)
    extra = gap * (alpha0 - gamma * alpha_next - wt)
    diag["robust_correction"] = data.mean(extra)
    return _report("drl-robust", data, summand + extra, level, diag)


def empirical_occupancy_ratio(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    gamma: float,
    n_states: int | None = None,
    n_actions: int | None = None,
    truncation: float = DEFAULT_TRUNCATION,
    smoothing: float = EMPTY_CELL_SMOOTHING,
) -> tuple[np.ndarray, dict]:
    """Plug-in occupancy-ratio table from empirical transition counts.

    Zero transition counts get ``smoothing`` added before normalisation; the
    ratio is clipped at ``truncation``.
    """
    M = n_states if n_states is not None else pi.n_states
    A = n_actions if n_actions is not None else pi.n_actions
    w = data.w
    counts = np.zeros((M, A, M))
    np.add.at(counts, (data.s0, data.a0, data.s1), w)
    counts[counts == 0] += smoothing
    P = counts / counts.sum(axis=2, keepdims=True)

    sa = np.zeros((M, A))
    np.add.at(sa, (data.s0, data.a0), w)
    s_mass = sa.sum(axis=1)
    b = np.full((M, A), 1.0 / A)
    seen = s_mass > 0
    b[seen] = sa[seen] / s_mass[seen, None]
    init = s_mass / s_mass.sum()
    mdp_hat = TabularMDP(P, np.zeros((M, A)), init, gamma)

    basis = one_hot_cells(M, A)
    start = w @ np.asarray(functional(data.s0, data.a0, basis), dtype=float) / w.sum()
    table = tabular_occupancy_ratio(mdp_hat, pi, Policy(b), truncation, start=start.reshape(M, A))
    rec = table[data.s0, data.a0]
    clipped = np.abs(rec) >= truncation
    return table, {"clipped_fraction": float(data.mean(clipped.astype(float)))}


def drl_nonparametric(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    q_hat,
    occupancy,
    gamma: float,
    level: float = DEFAULT_LEVEL,
    truncation: float = DEFAULT_TRUNCATION,
) -> EstimateReport:
    """DRL with occupancy-ratio weights (a table, weights, or ``None`` to estimate)."""
    diag: dict = {}
    if occupancy is None:
        occupancy, diag = empirical_occupancy_ratio(data, pi, functional, gamma, truncation=truncation)
    if not isinstance(occupancy, RieszWeights):
        occupancy = tabular_weights(occupancy)
    rep = drl_semiparametric(data, pi, functional, q_hat, occupancy, gamma, level, method="drl-nonparam")
    rep.diagnostics.update(diag)
    return rep


def contrast(treated: EstimateReport, control: EstimateReport, level: float | None = None) -> EstimateReport:
    """Difference of two estimates on the same records, with joint influence values."""
    level = treated.level if level is None else level
    est = treated.estimate - control.estimate
    infl = InfluenceValues(treated.influence.values - control.influence.values, treated.influence.weights)
    se = float(np.sqrt(eif_variance(infl)))
    return EstimateReport(est, se, wald_interval(est, se, level), f"{treated.method}:contrast", level,
                          {"treated": treated.estimate, "control": control.estimate}, infl)


# -- bootstrap ---------------------------------------------------------------


class _MemoQ:
    """Caches a Q-function's answers for repeated identical queries."""

    def __init__(self, q):
        self.q = q
        self.kind = getattr(q, "kind", "memo")
        self._cache: dict = {}

    def __call__(self, a, s):
        a = np.ascontiguousarray(np.broadcast_to(np.asarray(a), np.shape(s)))
        s = np.ascontiguousarray(s)
        key = (a.tobytes(), s.tobytes(), a.dtype.str, s.dtype.str)
        hit = self._cache.get(key)
        if hit is None:
            hit = np.asarray(self.q(a, s), dtype=float)
            self._cache[key] = hit
        return hit


def multinomial_resampler(rng: np.random.Generator, data: TransitionDataset) -> np.ndarray:
    p = data.w / data.w.sum()
    return rng.multinomial(data.n, p).astype(float)


def bootstrap_calibration_estimates(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    base,
    gamma: float,
    B: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float | None = None,
    min_pool_weight: float = DEFAULT_MIN_POOL_WEIGHT,
    resampler: Callable | None = None,
) -> np.ndarray:
    """Calibrated plug-in estimates on ``B`` resamples with ``base`` held fixed.

    Each replicate reruns fitted Q-calibration (iterations plus exact level
    solve) on the resample's weights. ``resampler(rng, data)`` returns one
    count per record; the default draws multinomial counts.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    resampler = multinomial_resampler if resampler is None else resampler
    memo = _MemoQ(base)
    tol = 1.0 / data.n if tol is None else tol
    scores = _Scores(data, pi, memo, gamma)
    out = np.empty(B)
    for b in range(B):
        counts = np.asarray(resampler(rng, data), dtype=float)
        if counts.shape != (data.n,) or np.any(counts < 0) or counts.sum() <= 0:
            raise ValueError("resampler must return nonnegative per-record counts")
        f, _, _ = _calibrate(scores.reweighted(counts * data.w), gamma, max_iters, tol, min_pool_weight, True)
        m = functional.values(data, CalibratedQ(memo, f))
        out[b] = float(np.dot(counts * data.w, m) / np.dot(counts, data.w))
    return out


def bootstrap_calibration_ci(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    base,
    gamma: float,
    B: int = 500,
    level: float = DEFAULT_LEVEL,
    seed: int = 0,
    **kwargs,
) -> tuple[float, float]:
    """Percentile interval from resampling only the calibration step."""
    if B < 100:
        warnings.warn(f"B={B} bootstrap replicates is below the recommended 100", RuntimeWarning, stacklevel=2)
    est = bootstrap_calibration_estimates(data, pi, functional, base, gamma, B, seed, **kwargs)
    lo, hi = np.quantile(est, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)
