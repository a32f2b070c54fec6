"""Transition data, policies, value operators and exact tabular oracles.

States and actions are integer codes. A :class:`StateSpace` maps state codes
to tuples of named integer fields so that regressors can work on features
instead of opaque ids.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Protocol, Sequence, Union

import numpy as np
import scipy.linalg

ArrayLike = Union[Sequence[float], np.ndarray]

DEFAULT_TRUNCATION = 1e4


class DomainError(ValueError):
    """A state or action code lies outside its alphabet."""


class OverlapError(ValueError):
    """Target mass sits on a cell the behavior policy never visits."""


def _frozen(x, dtype) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Transition(NamedTuple):
    s0: int
    a0: int
    y0: float
    s1: int


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Registry of integer-coded state tuples.

    State code ``k`` stands for the tuple ``codes[k]``.
    """

    fields: tuple[str, ...]
    codes: tuple[tuple[int, ...], ...]
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if any(len(c) != len(self.fields) for c in self.codes):
            raise ValueError("every state tuple must have one entry per field")
        lookup = {tuple(c): k for k, c in enumerate(self.codes)}
        if len(lookup) != len(self.codes):
            raise ValueError("duplicate state tuples in alphabet")
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self) -> int:
        return len(self.codes)

    def index(self, code: Sequence[int]) -> int:
        try:
            return self._lookup[tuple(int(c) for c in code)]
        except KeyError:
            raise DomainError(f"state {tuple(code)} not in alphabet") from None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.codes, dtype=np.int64).reshape(len(self.codes), len(self.fields))

    def field_index(self, name: str) -> int:
        try:
            return self.fields.index(name)
        except ValueError:
            raise KeyError(f"unknown state field {name!r}") from None

    def to_json(self) -> dict:
        return {"fields": list(self.fields), "states": [list(c) for c in self.codes]}

    @classmethod
    def from_json(cls, obj: dict) -> "StateSpace":
        return cls(tuple(obj["fields"]), tuple(tuple(int(v) for v in c) for c in obj["states"]))


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """i.i.d. single transitions ``(S0, A0, Y0, S1)``.

    ``weights`` are optional nonnegative record weights. Unit weights give the
    usual empirical distribution; population pseudo-data uses probabilities.
    """

    s0: np.ndarray
    a0: np.ndarray
    y0: np.ndarray
    s1: np.ndarray
    weights: np.ndarray | None = None
    states: StateSpace | None = None
    n_actions: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "s0", _frozen(self.s0, np.int64))
        object.__setattr__(self, "a0", _frozen(self.a0, np.int64))
        object.__setattr__(self, "y0", _frozen(self.y0, np.float64))
        object.__setattr__(self, "s1", _frozen(self.s1, np.int64))
        n = self.s0.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one transition")
        if not (self.s0.ndim == self.a0.ndim == self.y0.ndim == self.s1.ndim == 1):
            raise ValueError("dataset columns must be one-dimensional")
        if not (self.a0.shape[0] == self.y0.shape[0] == self.s1.shape[0] == n):
            raise ValueError("dataset columns have different lengths")
        if not np.all(np.isfinite(self.y0)):
            raise ValueError("rewards must be finite")
        if self.weights is not None:
            w = _frozen(self.weights, np.float64)
            if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite, nonnegative and one per record")
            if w.sum() <= 0:
                raise ValueError("weights sum to zero")
            object.__setattr__(self, "weights", w)
        if self.states is not None:
            m = len(self.states)
            for col in (self.s0, self.s1):
                if col.min() < 0 or col.max() >= m:
                    raise DomainError("state code outside alphabet")
        if self.a0.min() < 0 or (self.n_actions is not None and self.a0.max() >= self.n_actions):
            raise DomainError("action code outside action set")

    @property
    def n(self) -> int:
        return int(self.s0.shape[0])

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Transition]:
        for i in range(self.n):
            yield Transition(int(self.s0[i]), int(self.a0[i]), float(self.y0[i]), int(self.s1[i]))

    @property
    def records(self) -> list[Transition]:
        return list(self)

    @property
    def w(self) -> np.ndarray:
        """Record weights normalised to sum to ``n``."""
        if self.weights is None:
            return np.ones(self.n)
        return self.weights * (self.n / self.weights.sum())

    def mean(self, values: np.ndarray) -> float:
        """Empirical (weighted) mean over records."""
        if self.weights is None:
            return float(np.mean(values))
        return float(np.dot(self.weights, values) / self.weights.sum())

    def subset(self, idx: np.ndarray) -> "TransitionDataset":
        idx = np.asarray(idx)
        return TransitionDataset(
            self.s0[idx], self.a0[idx], self.y0[idx], self.s1[idx],
            None if self.weights is None else self.weights[idx],
            self.states, self.n_actions,
        )

    def reweighted(self, weights: np.ndarray) -> "TransitionDataset":
        return TransitionDataset(self.s0, self.a0, self.y0, self.s1, weights, self.states, self.n_actions)

    @classmethod
    def from_records(cls, records: Sequence[Transition], **kw) -> "TransitionDataset":
        cols = list(zip(*records)) if records else [[], [], [], []]
        return cls(*(np.asarray(c) for c in cols), **kw)

    # -- persistence -------------------------------------------------------
    def to_csv(self, path: str | Path) -> Path:
        """Write ``s0,a0,y0,s1`` rows plus an alphabet sidecar next to the CSV."""
        path = Path(path)
        header = ["s0", "a0", "y0", "s1"] + (["weight"] if self.weights is not None else [])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i in range(self.n):
                row = [int(self.s0[i]), int(self.a0[i]), repr(float(self.y0[i])), int(self.s1[i])]
                if self.weights is not None:
                    row.append(repr(float(self.weights[i])))
                writer.writerow(row)
        side = {"n_actions": self.n_actions}
        if self.states is not None:
            side.update(self.states.to_json())
        sidecar_path(path).write_text(json.dumps(side, indent=1) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TransitionDataset":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"s0", "a0", "y0", "s1"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: no records")
        weights = None
        if "weight" in rows[0]:
            weights = np.array([float(r["weight"]) for r in rows])
        states, n_actions = None, None
        side = sidecar_path(path)
        if side.exists():
            obj = json.loads(side.read_text())
            n_actions = obj.get("n_actions")
            if "states" in obj:
                states = StateSpace.from_json(obj)
        return cls(
            np.array([int(r["s0"]) for r in rows]),
            np.array([int(r["a0"]) for r in rows]),
            np.array([float(r["y0"]) for r in rows]),
            np.array([int(r["s1"]) for r in rows]),
            weights, states, n_actions,
        )


def sidecar_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".alphabet.json")


@dataclass(frozen=True, eq=False)
class Policy:
    """Finite-support policy ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = _frozen(self.probs, np.float64)
        if p.ndim != 2:
            raise ValueError("policy table must be (n_states, n_actions)")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def support(self) -> np.ndarray:
        """Actions with positive probability in at least one state."""
        return np.flatnonzero(self.probs.max(axis=0) > 0)

    def prob(self, a, s) -> np.ndarray | float:
        a, s = np.asarray(a), np.asarray(s)
        _check_states(s, self.n_states)
        out = self.probs[s, a]
        return float(out) if out.ndim == 0 else out

    @classmethod
    def deterministic(cls, action_of_state: ArrayLike, n_actions: int) -> "Policy":
        act = np.asarray(action_of_state, dtype=np.int64)
        probs = np.zeros((act.shape[0], n_actions))
        probs[np.arange(act.shape[0]), act] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite discounted MDP with ``transition[s, a, s']`` and mean rewards."""

    transition: np.ndarray
    reward_mean: np.ndarray
    init_dist: np.ndarray
    gamma: float
    states: StateSpace | None = None

    def __post_init__(self) -> None:
        P = _frozen(self.transition, np.float64)
        r = _frozen(self.reward_mean, np.float64)
        mu = _frozen(self.init_dist, np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition must be (M, A, M)")
        if r.shape != P.shape[:2] or mu.shape != (P.shape[0],):
            raise ValueError("reward_mean must be (M, A) and init_dist (M,)")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to one")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ValueError("init_dist must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", r)
        object.__setattr__(self, "init_dist", mu)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_gamma(self, gamma: float) -> "TabularMDP":
        return TabularMDP(self.transition, self.reward_mean, self.init_dist, gamma, self.states)

    def state_action_kernel(self, pi: Policy) -> np.ndarray:
        """``K[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')`` on the flattened grid."""
        M, A = self.n_states, self.n_actions
        K = self.transition[:, :, :, None] * pi.probs[None, None, :, :]
        return K.reshape(M * A, M * A)


class QFunction(Protocol):
    kind: str

    def __call__(self, a, s) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TabularQ:
    table: np.ndarray
    kind: str = "tabular"

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", _frozen(self.table, np.float64))

    def __call__(self, a, s) -> np.ndarray:
        s = np.asarray(s)
        _check_states(s, self.table.shape[0])
        return self.table[s, np.asarray(a)]


@dataclass(eq=False)
class CrossFittedQ:
    """Record-aligned Q-function: entry ``i`` of a query uses ``models[folds[i]]``."""

    models: list
    folds: np.ndarray
    kind: str = "cross-fitted"

    def __post_init__(self) -> None:
        self.folds = _frozen(self.folds, np.int64)
        if self.folds.size and (self.folds.min() < 0 or self.folds.max() >= len(self.models)):
            raise ValueError("fold id without a model")

    def __call__(self, a, s) -> np.ndarray:
        s = np.asarray(s)
        a = np.broadcast_to(np.asarray(a), s.shape)
        if s.shape != self.folds.shape:
            raise ValueError("cross-fitted Q must be queried with record-aligned arrays")
        out = np.empty(s.shape[0])
        for j, model in enumerate(self.models):
            mask = self.folds == j
            if mask.any():
                out[mask] = model(a[mask], s[mask])
        return out


def _check_states(s: np.ndarray, n_states: int) -> None:
    if s.size and (s.min() < 0 or s.max() >= n_states):
        raise DomainError(f"state code outside alphabet of size {n_states}")


def value_under_policy(q, pi: Policy, s):
    """``V^pi(q)(s) = sum_a pi(a|s) q(a, s)``; scalar in, scalar out.

    ``q`` is queried with arrays aligned to ``s``, so record-aligned
    Q-functions (one model per record) work unchanged.
    """
    s_arr = np.asarray(s, dtype=np.int64)
    _check_states(s_arr, pi.n_states)
    flat = np.atleast_1d(s_arr)
    total = np.zeros(flat.shape[0])
    for a in pi.support:
        p = pi.probs[flat, a]
        if np.any(p > 0):
            vals = np.asarray(q(np.full(flat.shape[0], a), flat), dtype=float)
            total += np.where(p > 0, p * vals, 0.0)
    return float(total[0]) if s_arr.ndim == 0 else total


def bellman_target(q, pi: Policy, t: Transition, gamma: float) -> float:
    """``y0 + gamma * V^pi(q)(s1)`` for a single transition."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if gamma == 0.0:
        return float(t.y0)
    return float(t.y0 + gamma * value_under_policy(q, pi, t.s1))


def bellman_targets(q, pi: Policy, data: TransitionDataset, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return data.y0.astype(float)
    return data.y0 + gamma * value_under_policy(q, pi, data.s1)


def tabular_q_solve(mdp: TabularMDP, pi: Policy) -> TabularQ:
    """Exact Q-function from ``(I - gamma P^pi) q = r`` by dense LU."""
    M, A = mdp.n_states, mdp.n_actions
    r = mdp.reward_mean.reshape(M * A)
    if mdp.gamma == 0.0:
        return TabularQ(mdp.reward_mean.copy())
    lhs = np.eye(M * A) - mdp.gamma * mdp.state_action_kernel(pi)
    q = scipy.linalg.lu_solve(scipy.linalg.lu_factor(lhs), r)
    return TabularQ(q.reshape(M, A))


def discounted_occupancy(mdp: TabularMDP, pi: Policy, start: np.ndarray) -> np.ndarray:
    """``sum_t gamma^t P^pi((S_t, A_t) = .)`` for a start measure on (s, a)."""
    M, A = mdp.n_states, mdp.n_actions
    mu = np.asarray(start, dtype=float).reshape(M * A)
    if mdp.gamma == 0.0:
        return mu.reshape(M, A).copy()
    lhs = np.eye(M * A) - mdp.gamma * mdp.state_action_kernel(pi)
    rho = scipy.linalg.lu_solve(scipy.linalg.lu_factor(lhs), mu, trans=1)
    return rho.reshape(M, A)


def tabular_occupancy_ratio(
    mdp: TabularMDP,
    pi: Policy,
    behavior: Policy,
    truncation: float = DEFAULT_TRUNCATION,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Discounted state-action occupancy ratio ``d(s, a)`` as an (M, A) table.

    ``start`` is the (possibly signed) measure on (s, a) the functional puts on
    ``q``; it defaults to ``init_dist(s) pi(a|s)``, the policy value. Values are
    clipped to ``[-truncation, truncation]``.
    """
    if start is None:
        start = mdp.init_dist[:, None] * pi.probs
    rho = discounted_occupancy(mdp, pi, start)
    base = mdp.init_dist[:, None] * behavior.probs
    mass = np.abs(rho) > 1e-15
    bad = mass & (base <= 0)
    if bad.any() and not np.isfinite(truncation):
        s, a = np.argwhere(bad)[0]
        raise OverlapError(f"no behavior mass at state {s}, action {a}")
    ratio = np.zeros_like(rho)
    ok = base > 0
    ratio[ok] = rho[ok] / base[ok]
    ratio[bad] = np.sign(rho[bad]) * np.inf
    return np.clip(ratio, -truncation, truncation)


def population_pseudo_data(mdp: TabularMDP, behavior: Policy, tol: float = 0.0) -> TransitionDataset:
    """One weighted record per reachable ``(s, a, s')`` with ``y = r(s, a)``.

    Weighted least squares on this dataset equals population least squares.
    """
    w = mdp.init_dist[:, None, None] * behavior.probs[:, :, None] * mdp.transition
    s, a, s1 = np.nonzero(w > tol)
    return TransitionDataset(
        s, a, mdp.reward_mean[s, a], s1, w[s, a, s1], mdp.states, mdp.n_actions
    )
