"""Least-squares regression backends and weighted isotonic regression.

Every backend first collapses duplicate feature rows into one row carrying the
summed weight and the weighted mean target. For squared loss this leaves the
minimiser unchanged and makes repeated fits on discrete state spaces cheap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

BACKENDS = ("tabular-mean", "ridge-features", "boosted-trees")

DEFAULT_MIN_POOL_WEIGHT = 20.0

_TREE_DEFAULTS = {
    "rounds": 100,
    "depth": 3,
    "learning_rate": 0.1,
    "leaves": None,
    "min_leaf_weight": 1.0,
}


class RegressionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressorSpec:
    backend: str
    hyperparams: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        hp = dict(self.hyperparams)
        if self.backend == "ridge-features":
            lam = float(hp.setdefault("lam", 0.0))
            if lam < 0:
                raise ValueError("ridge penalty must be >= 0")
            hp.setdefault("fit_intercept", True)
        elif self.backend == "boosted-trees":
            unknown = set(hp) - set(_TREE_DEFAULTS)
            if unknown:
                raise ValueError(f"unknown tree hyperparameters {sorted(unknown)}")
            hp = {**_TREE_DEFAULTS, **hp}
            if int(hp["depth"]) < 1 or int(hp["rounds"]) < 1:
                raise ValueError("depth and rounds must be >= 1")
            if float(hp["learning_rate"]) <= 0:
                raise ValueError("learning_rate must be > 0")
            if hp["leaves"] is not None and int(hp["leaves"]) < 2:
                raise ValueError("leaves must be >= 2")
            if float(hp["min_leaf_weight"]) < 0:
                raise ValueError("min_leaf_weight must be >= 0")
        object.__setattr__(self, "hyperparams", hp)

    def to_json(self) -> dict:
        return {"backend": self.backend, "hyperparams": dict(self.hyperparams)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RegressorSpec":
        return cls(obj["backend"], dict(obj.get("hyperparams", {})))


@dataclass(eq=False)
class FittedRegressor:
    spec: RegressorSpec
    model: Any
    mse: float
    rank_deficient: bool = False

    def predict(self, features) -> np.ndarray:
        return self.predict_rows(RowGroups(_as_2d(features)))

    def predict_rows(self, groups: "RowGroups") -> np.ndarray:
        """Predictions for a pre-grouped feature matrix."""
        return self._predict_rows(groups.uniq)[groups.inv]

    def _predict_rows(self, X: np.ndarray) -> np.ndarray:
        backend = self.spec.backend
        if backend == "tabular-mean":
            table, fallback = self.model
            return np.array([table.get(row.tobytes(), fallback) for row in X])
        if backend == "ridge-features":
            coef, intercept = self.model
            return X @ coef + intercept
        return self.model.predict(X)


def _as_2d(features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return np.ascontiguousarray(X)


class RowGroups:
    """Distinct rows of a feature matrix and the row-to-group map.

    Callers that fit or predict repeatedly on the same matrix build this once.
    """

    def __init__(self, X: np.ndarray):
        X = _as_2d(X)
        keys = X.view(np.dtype((np.void, X.dtype.itemsize * X.shape[1]))).reshape(-1)
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        self.X = X
        self.uniq = X[first]
        self.inv = inv.reshape(-1)

    def __len__(self) -> int:
        return self.X.shape[0]


def compress_rows(X, y: np.ndarray, w: np.ndarray):
    """Unique rows with summed weights and weighted-mean targets."""
    groups = X if isinstance(X, RowGroups) else RowGroups(X)
    uniq, inv = groups.uniq, groups.inv
    W = np.bincount(inv, weights=w, minlength=uniq.shape[0])
    keep = W > 0
    WY = np.bincount(inv, weights=w * y, minlength=uniq.shape[0])
    ybar = np.zeros_like(W)
    ybar[keep] = WY[keep] / W[keep]
    return uniq[keep], ybar[keep], W[keep], inv


def fit_least_squares(spec: RegressorSpec, features, targets, weights=None) -> FittedRegressor:
    """Weighted least-squares fit within the backend's function class.

    ``features`` may be a :class:`RowGroups` to skip re-grouping the rows.
    """
    y = np.asarray(targets, dtype=np.float64)
    if len(features) == 0 or y.shape[0] == 0:
        raise ValueError("cannot fit on empty data")
    groups = features if isinstance(features, RowGroups) else RowGroups(features)
    if len(groups) != y.shape[0]:
        raise ValueError("features and targets differ in length")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per target, not all zero")
    Xu, yu, Wu, _ = compress_rows(groups, y, w)

    rank_deficient = False
    if spec.backend == "tabular-mean":
        table = {row.tobytes(): val for row, val in zip(Xu, yu)}
        model: Any = (table, float(np.dot(Wu, yu) / Wu.sum()))
    elif spec.backend == "ridge-features":
        model, rank_deficient = _fit_ridge(Xu, yu, Wu, float(spec.hyperparams["lam"]),
                                           bool(spec.hyperparams["fit_intercept"]))
    else:
        model = _fit_trees(Xu, yu, Wu, spec.hyperparams)

    fitted = FittedRegressor(spec, model, 0.0, rank_deficient)
    resid = y - fitted.predict_rows(groups)
    fitted.mse = float(np.dot(w, resid**2) / w.sum())
    return fitted


def _fit_ridge(X, y, W, lam, fit_intercept):
    if fit_intercept:
        xbar = W @ X / W.sum()
        ybar = float(W @ y / W.sum())
    else:
        xbar, ybar = np.zeros(X.shape[1]), 0.0
    Xc, yc = X - xbar, y - ybar
    gram = Xc.T @ (W[:, None] * Xc) + lam * np.eye(X.shape[1])
    rhs = Xc.T @ (W * yc)
    rank = np.linalg.matrix_rank(gram)
    if rank < X.shape[1]:
        warnings.warn("rank-deficient ridge system; using pseudo-inverse", RuntimeWarning, stacklevel=3)
        coef = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        deficient = True
    else:
        coef = np.linalg.solve(gram, rhs)
        deficient = False
    return (coef, ybar - float(xbar @ coef)), deficient


def _fit_trees(X, y, W, hp):
    from sklearn.ensemble import GradientBoostingRegressor

    frac = min(float(hp["min_leaf_weight"]) / W.sum(), 0.5)
    model = GradientBoostingRegressor(
        loss="squared_error",
        n_estimators=int(hp["rounds"]),
        max_depth=int(hp["depth"]),
        max_leaf_nodes=None if hp["leaves"] is None else int(hp["leaves"]),
        learning_rate=float(hp["learning_rate"]),
        min_weight_fraction_leaf=frac,
        subsample=1.0,
        random_state=0,
    )
    model.fit(X, y, sample_weight=W)
    return model


# -- isotonic regression ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Monotone right-continuous step function.

    ``levels[j]`` applies on ``[breakpoints[j-1], breakpoints[j])``; inputs
    below the first or above the last breakpoint get the boundary level.
    """

    breakpoints: np.ndarray
    levels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        b = np.asarray(self.breakpoints, dtype=np.float64).reshape(-1)
        v = np.asarray(self.levels, dtype=np.float64).reshape(-1)
        if v.shape[0] != b.shape[0] + 1:
            raise ValueError("need exactly one more level than breakpoints")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ValueError("levels must be non-decreasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "levels", v)
        if self.weights is not None:
            object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))

    def bin_index(self, x) -> np.ndarray:
        return np.searchsorted(self.breakpoints, np.asarray(x, dtype=np.float64), side="right")

    def __call__(self, x) -> np.ndarray:
        return self.levels[self.bin_index(x)]

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    def to_json(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "levels": self.levels.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "StepFunction":
        return cls(np.asarray(obj["breakpoints"], dtype=float), np.asarray(obj["levels"], dtype=float))


def _pava_blocks(yv: np.ndarray, wv: np.ndarray):
    """Pool-adjacent-violators on pre-sorted, tie-free points.

    Each pass pools every maximal run of decreasing adjacent blocks; a run is
    a chain of adjacent violators, so this is a valid pooling order and ends
    at the unique isotonic solution. Returns block start indices, summed
    weights and weighted sums.
    """
    starts = np.arange(yv.shape[0])
    sw = wv.astype(np.float64)
    swy = wv * yv
    while sw.shape[0] > 1:
        viol = swy[:-1] * sw[1:] > swy[1:] * sw[:-1]
        if not viol.any():
            break
        opens = np.concatenate(([True], ~viol))
        gid = np.cumsum(opens) - 1
        sw = np.bincount(gid, weights=sw)
        swy = np.bincount(gid, weights=swy)
        starts = starts[opens]
    return starts.tolist(), sw.tolist(), swy.tolist()


def _enforce_min_weight(starts, sw, swy, min_weight):
    starts, sw, swy = list(starts), list(sw), list(swy)
    j = 0
    while len(sw) > 1 and j < len(sw):
        if sw[j] >= min_weight:
            j += 1
            continue
        k = j + 1 if j + 1 < len(sw) else j - 1
        lo, hi = min(j, k), max(j, k)
        sw[lo] += sw[hi]
        swy[lo] += swy[hi]
        del starts[hi], sw[hi], swy[hi]
        j = lo
    return starts, sw, swy


def pava_isotonic(x, y, w=None, min_pool_weight: float = DEFAULT_MIN_POOL_WEIGHT) -> StepFunction:
    """Weighted L2 isotonic (non-decreasing) regression of ``y`` on ``x``.

    Ties in ``x`` are pooled first. After PAVA, adjacent levels are merged
    greedily until each carries at least ``min_pool_weight``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if not (x.shape == y.shape == w.shape) or x.shape[0] == 0:
        raise ValueError("x, y, w must be non-empty and of equal length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    keep = w > 0
    if not keep.any():
        raise ValueError("all weights are zero")
    x, y, w = x[keep], y[keep], w[keep]

    if x.shape[0] == 1 or np.all(x[1:] > x[:-1]):
        ux, W, ybar = x, w, y
    else:
        ux, inv = np.unique(x, return_inverse=True)
        W = np.bincount(inv, weights=w)
        ybar = np.bincount(inv, weights=w * y) / W
    starts, sw, swy = _pava_blocks(ybar, W)
    if min_pool_weight > 0:
        starts, sw, swy = _enforce_min_weight(starts, sw, swy, min_pool_weight)
    sw_a = np.asarray(sw)
    levels = np.asarray(swy) / sw_a
    # guard against rounding making pooled means locally decreasing
    levels = np.maximum.accumulate(levels)
    return StepFunction(ux[np.asarray(starts[1:], dtype=np.int64)], levels, sw_a)


def isotonic_objective(f: StepFunction, x, y, w=None) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    return float(np.dot(w, (y - f(x)) ** 2))
