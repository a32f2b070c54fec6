"""Linear functionals ``q -> m(S0, A0, q)`` of a Q-function.

A functional is evaluated on record-aligned arrays ``(s0, a0)`` and a callable
``q(a, s)``. ``q`` may return a vector per query (shape ``(n,)``) or a matrix
(shape ``(n, k)``, one column per basis function); built-in functionals handle
both so that representer solves can push a whole feature basis through ``m``
in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import Policy, StateSpace, TransitionDataset

KINDS = ("policy-value", "ate-contrast", "custom-linear")

MFn = Callable[[np.ndarray, np.ndarray, Callable], np.ndarray]


def _scale_rows(p: np.ndarray, vals: np.ndarray) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    return p[:, None] * vals if vals.ndim == 2 else p * vals


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    kind: str
    m: MFn
    arms: tuple["FunctionalSpec", "FunctionalSpec"] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "ate-contrast" and self.arms is None:
            raise ValueError("an ate-contrast needs its two arms")

    def __call__(self, s0, a0, q) -> np.ndarray:
        return self.m(np.asarray(s0), np.asarray(a0), q)

    def values(self, data: TransitionDataset, q) -> np.ndarray:
        return np.asarray(self(data.s0, data.a0, q), dtype=float)

    def scaled(self, c: float) -> "FunctionalSpec":
        return FunctionalSpec("custom-linear", lambda s, a, q: c * self.m(s, a, q), name=f"{c}*{self.name}")

    def __add__(self, other: "FunctionalSpec") -> "FunctionalSpec":
        return FunctionalSpec("custom-linear", lambda s, a, q: self.m(s, a, q) + other.m(s, a, q),
                              name=f"({self.name}+{other.name})")


def policy_value(pi: Policy, name: str = "policy-value") -> FunctionalSpec:
    """``m(s, a, q) = sum_a' pi(a'|s) q(a', s)``."""

    def m(s0, a0, q):
        total = 0.0
        for a in pi.support:
            p = pi.probs[s0, a]
            if np.any(p > 0):
                total = total + _scale_rows(p, q(np.full(s0.shape[0], a), s0))
        return total

    return FunctionalSpec("policy-value", m, name=name)


def point_evaluation(action_fn, state_fn, name: str = "point") -> FunctionalSpec:
    """``m(s, a, q) = q(action_fn(s, a), state_fn(s, a))``."""

    def m(s0, a0, q):
        return np.asarray(q(action_fn(s0, a0), state_fn(s0, a0)), dtype=float)

    return FunctionalSpec("custom-linear", m, name=name)


def ate_contrast(treated: FunctionalSpec, control: FunctionalSpec, name: str = "ate") -> FunctionalSpec:
    def m(s0, a0, q):
        return treated.m(s0, a0, q) - control.m(s0, a0, q)

    return FunctionalSpec("ate-contrast", m, arms=(treated, control), name=name)


def custom_linear(m: MFn, name: str = "custom") -> FunctionalSpec:
    return FunctionalSpec("custom-linear", m, name=name)


def arm_state_map(states: StateSpace, field: str, value: int) -> np.ndarray:
    """State code obtained by setting ``field`` to ``value``, for every state."""
    codes = states.as_array()
    k = states.field_index(field)
    out = np.empty(len(states), dtype=np.int64)
    for i, row in enumerate(codes):
        moved = row.copy()
        moved[k] = value
        out[i] = states.index(moved)
    return out


def ab_test_ate(states: StateSpace, treatment_field: str = "z") -> FunctionalSpec:
    """Long-term ATE when the treatment arm is part of the state and ``A_t = Z``.

    Arm ``z`` evaluates ``q(z, (z, s~))`` at the unit's baseline ``s~``.
    """
    arms = []
    for z in (1, 0):
        to_arm = arm_state_map(states, treatment_field, z)
        arms.append(point_evaluation(
            lambda s0, a0, z=z: np.full(np.shape(s0), z),
            lambda s0, a0, to_arm=to_arm: to_arm[s0],
            name=f"arm{z}",
        ))
    return ate_contrast(arms[0], arms[1], name="ate")
