"""Fitted Q-calibration: isotonic fixed-point iteration on initial Q scores.

The calibrated Q-function ``q* = f o q_n`` satisfies, on the sample, the
self-consistency ``q*(a, s) = mean of Y0 + gamma V(q*)(S1)`` over records
sharing the value ``q*(a, s)``. The iterative loop gets close; a final exact
solve on the level partition makes the identity hold to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .mdp import CrossFittedQ, Policy, TransitionDataset, value_under_policy
from .regression import DEFAULT_MIN_POOL_WEIGHT, StepFunction, pava_isotonic

DEFAULT_MAX_ITERS = 50
DEFAULT_CERTIFY_TOL = 1e-6


@dataclass(eq=False)
class CalibratedQ:
    """``q*(a, s) = calibrator(base(a, s))``."""

    base: object
    calibrator: StepFunction
    kind: str = field(default="calibrated")

    def __call__(self, a, s) -> np.ndarray:
        return self.calibrator(self.base(a, s))

    def to_json(self, base_ref: str | None = None) -> dict:
        return {"base": base_ref, "calibrator": self.calibrator.to_json()}


@dataclass(frozen=True)
class CalibrationReport:
    iterations: int
    final_increment: float
    increments: tuple[float, ...]
    max_orthogonality_violation: float
    n_levels: int
    converged: bool

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_increment": self.final_increment,
            "increments": list(self.increments),
            "max_orthogonality_violation": self.max_orthogonality_violation,
            "n_levels": self.n_levels,
            "converged": self.converged,
        }


class _Scores:
    """Base scores on the grid of their distinct values.

    Records are indexed by the grid position of their own score (``g0``) and of
    every pi-supported next-state score. Per-grid sums are formed with
    ``bincount``, so reweighting (for the bootstrap) only swaps ``w``.
    """

    def __init__(self, data: TransitionDataset, pi: Policy, base, gamma: float):
        self.y = data.y0
        x = np.asarray(base(data.a0, data.s0), dtype=float)
        nxt = []
        if gamma > 0:
            for a in pi.support:
                p = pi.probs[data.s1, a]
                rows = np.flatnonzero(p > 0)
                if rows.size:
                    xa = np.asarray(base(np.full(data.n, a), data.s1), dtype=float)
                    nxt.append((rows, p[rows], xa[rows]))
        if not np.all(np.isfinite(x)) or any(not np.all(np.isfinite(xa)) for _, _, xa in nxt):
            raise ValueError("base Q-function returned non-finite scores")
        self.grid = np.unique(np.concatenate([x] + [xa for _, _, xa in nxt]))
        self.g0 = np.searchsorted(self.grid, x)
        self.next = [(rows, p, np.searchsorted(self.grid, xa)) for rows, p, xa in nxt]
        self._set_weights(data.w)

    def _set_weights(self, w: np.ndarray) -> None:
        J = self.grid.shape[0]
        self.w = w
        self.W = np.bincount(self.g0, weights=w, minlength=J)
        self.Sy = np.bincount(self.g0, weights=w * self.y, minlength=J)
        self.obs = self.W > 0

    def reweighted(self, w: np.ndarray) -> "_Scores":
        other = object.__new__(_Scores)
        other.y, other.grid, other.g0, other.next = self.y, self.grid, self.g0, self.next
        other._set_weights(np.asarray(w, dtype=float))
        return other

    def next_mass(self, fvals: np.ndarray) -> np.ndarray:
        """Per-grid sum of ``w * V(f o base)(S1)``, with ``fvals = f(grid)``."""
        v = np.zeros(self.y.shape[0])
        for rows, p, gk in self.next:
            v[rows] += p * fvals[gk]
        return np.bincount(self.g0, weights=self.w * v, minlength=self.grid.shape[0])

    def bin_transition(self, b: np.ndarray, L: int) -> np.ndarray:
        """Weighted next-bin mass ``(L, L)`` for bin labels ``b`` on the grid."""
        P = np.zeros(L * L)
        src = b[self.g0]
        for rows, p, gk in self.next:
            P += np.bincount(src[rows] * L + b[gk], weights=self.w[rows] * p, minlength=L * L)
        return P.reshape(L, L)


def _exact_levels(sc: _Scores, f: StepFunction, gamma: float) -> StepFunction:
    """Solve the level-wise Bellman system on the bins of ``f``.

    Adjacent bins whose solved levels break monotonicity are merged and the
    system is solved again.
    """
    breaks = f.breakpoints.copy()
    while True:
        L = breaks.shape[0] + 1
        b = np.searchsorted(breaks, sc.grid, side="right")
        W = np.bincount(b, weights=sc.W, minlength=L)
        if np.any(W <= 0):
            # an emptied bin cannot be solved for; fold it into a neighbour
            j = int(np.flatnonzero(W <= 0)[0])
            breaks = np.delete(breaks, min(j, L - 2))
            continue
        ybar = np.bincount(b, weights=sc.Sy, minlength=L) / W
        if gamma > 0:
            P = sc.bin_transition(b, L) / W[:, None]
            levels = scipy.linalg.solve(np.eye(L) - gamma * P, ybar)
        else:
            levels = ybar
        drops = np.flatnonzero(np.diff(levels) < 0)
        if drops.size == 0:
            return StepFunction(breaks, levels, W)
        breaks = np.delete(breaks, drops[0])


def _calibrate(sc: _Scores, gamma: float, max_iters: int, tol: float,
               min_pool_weight: float, refine: bool):
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = sc.grid[sc.obs]
    W = sc.W[sc.obs]
    total = W.sum()
    prev = x
    fvals = sc.grid
    f = None
    increments: list[float] = []
    converged = False
    for _ in range(max_iters):
        if gamma > 0:
            targets = (sc.Sy + gamma * sc.next_mass(fvals))[sc.obs] / W
        else:
            targets = sc.Sy[sc.obs] / W
        f = pava_isotonic(x, targets, W, min_pool_weight)
        fvals = f(sc.grid)
        cur = fvals[sc.obs]
        increments.append(float(np.sqrt(np.dot(W, (cur - prev) ** 2) / total)))
        prev = cur
        if gamma == 0 or increments[-1] < tol:
            converged = True
            break
    if refine:
        f = _exact_levels(sc, f, gamma)
    return f, increments, converged


def fitted_q_calibration(
    data: TransitionDataset,
    pi: Policy,
    base,
    gamma: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float | None = None,
    min_pool_weight: float = DEFAULT_MIN_POOL_WEIGHT,
    refine: bool = True,
) -> tuple[CalibratedQ, CalibrationReport]:
    """Calibrate ``base`` so that it solves the empirical Bellman equation on its level sets.

    Each iteration isotonic-regresses the Bellman targets ``Y0 + gamma V(q*_k)(S1)``
    on the fixed base scores ``base(A0, S0)``. ``tol`` defaults to ``1/n``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    tol = 1.0 / data.n if tol is None else tol
    sc = _Scores(data, pi, base, gamma)
    f, incs, converged = _calibrate(sc, gamma, max_iters, tol, min_pool_weight, refine)
    qstar = CalibratedQ(base, f)
    report = CalibrationReport(
        iterations=len(incs),
        final_increment=incs[-1],
        increments=tuple(incs),
        max_orthogonality_violation=check_bellman_orthogonality(data, pi, qstar, gamma),
        n_levels=f.n_levels,
        converged=converged,
    )
    return qstar, report


def cross_fitted_calibration(
    data: TransitionDataset,
    pi: Policy,
    fold_bases: tuple[Sequence[int], Sequence] | CrossFittedQ,
    gamma: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float | None = None,
    min_pool_weight: float = DEFAULT_MIN_POOL_WEIGHT,
    refine: bool = True,
) -> tuple[list[CalibratedQ], CalibrationReport]:
    """One shared isotonic calibrator fit on pooled out-of-fold base scores.

    ``fold_bases`` is ``(fold id per record, base model per fold)``; each base
    must have been trained without its own fold. Record ``i`` is always scored
    by the base of its own fold.
    """
    if isinstance(fold_bases, CrossFittedQ):
        folds, bases = fold_bases.folds, fold_bases.models
    else:
        folds, bases = fold_bases
    folds = np.asarray(folds)
    if folds.shape != (data.n,) or folds.min() < 0 or folds.max() >= len(bases):
        raise ValueError("every record needs a fold id with a matching base model")
    pooled = CrossFittedQ(list(bases), folds)
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    tol = 1.0 / data.n if tol is None else tol
    sc = _Scores(data, pi, pooled, gamma)
    f, incs, converged = _calibrate(sc, gamma, max_iters, tol, min_pool_weight, refine)
    calibrated = [CalibratedQ(b, f) for b in bases]
    report = CalibrationReport(
        iterations=len(incs),
        final_increment=incs[-1],
        increments=tuple(incs),
        max_orthogonality_violation=check_bellman_orthogonality(
            data, pi, CrossFittedQ(calibrated, folds), gamma),
        n_levels=f.n_levels,
        converged=converged,
    )
    return calibrated, report


def temporal_differences(data: TransitionDataset, pi: Policy, q, gamma: float):
    """``(q(A0,S0), Y0 + gamma V(q)(S1) - q(A0,S0))`` per record."""
    v0 = np.asarray(q(data.a0, data.s0), dtype=float)
    target = data.y0 + gamma * value_under_policy(q, pi, data.s1) if gamma > 0 else data.y0
    return v0, target - v0


def level_residual_sums(data: TransitionDataset, pi: Policy, qstar, gamma: float):
    """Distinct ``q*`` values on the sample and the mean TD residual mass on each."""
    v0, td = temporal_differences(data, pi, qstar, gamma)
    levels, idx = np.unique(v0, return_inverse=True)
    sums = np.bincount(idx.reshape(-1), weights=data.w * td, minlength=levels.shape[0])
    return levels, sums / data.w.sum()


def check_bellman_orthogonality(data: TransitionDataset, pi: Policy, qstar, gamma: float) -> float:
    """Largest per-level mean temporal-difference residual of ``qstar``.

    Zero exactly when ``qstar`` is Bellman-calibrated on the sample: the TD
    errors are then orthogonal to every function of ``qstar(A0, S0)``.
    """
    _, sums = level_residual_sums(data, pi, qstar, gamma)
    return float(np.max(np.abs(sums)))
