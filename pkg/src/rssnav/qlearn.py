"""Tabular Q-learning pieces: state registry, Q-table, rewards, action choice.

Random draws all come from a ``numpy.random.Generator`` and follow one fixed
protocol so that the compiled training loop in :mod:`rssnav._kernels` can
replay the exact same stream:

* an epsilon-greedy branch costs one ``rng.random()``; exploring costs one more;
* picking among ``n`` candidates uses ``int(rng.random() * n)``;
* a greedy choice with a single maximiser draws nothing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gridworld import ACTIONS, Action, CellIndex

__all__ = [
    "StateMode",
    "StateRegistry",
    "QTable",
    "RewardKind",
    "RewardSpec",
    "EmptyActionSet",
    "NonFiniteInput",
    "ZeroDistance",
    "q_update",
    "greedy_action",
    "epsilon_greedy",
    "reward",
    "pick_uniform",
]

QUANTUM_DBM = 1e-6


class EmptyActionSet(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class ZeroDistance(ValueError):
    pass


class StateMode(str, enum.Enum):
    RSS = "rss"
    LOCATION = "location"


class StateRegistry:
    """Maps observations to dense integer state ids, created on first sight.

    In RSS mode an observation joins the first (oldest) anchor lying strictly
    within ``threshold_db`` of it.  With a zero threshold observations are
    compared after rounding to 1e-6 dBm, so values that went through a text
    round trip still land on the same state.  In location mode the
    observation is the cell itself.
    """

    def __init__(self, mode: StateMode | str = StateMode.RSS, threshold_db: float = 0.0):
        self.mode = StateMode(mode)
        if threshold_db < 0:
            raise ValueError("threshold_db must be non-negative")
        self.threshold_db = float(threshold_db)
        self.anchors: list = []
        self._index: dict = {}

    def __len__(self) -> int:
        return len(self.anchors)

    def __repr__(self):
        return f"StateRegistry(mode={self.mode.value}, threshold_db={self.threshold_db}, states={len(self)})"

    @property
    def entries(self) -> list[tuple[object, int]]:
        return [(anchor, i) for i, anchor in enumerate(self.anchors)]

    def _key(self, observation):
        if self.mode is StateMode.LOCATION:
            return CellIndex(*observation)
        return round(float(observation) / QUANTUM_DBM)

    def lookup(self, observation) -> int | None:
        """State id for ``observation`` without creating one."""
        if self.mode is StateMode.RSS and self.threshold_db > 0:
            obs = float(observation)
            for i, anchor in enumerate(self.anchors):
                if abs(obs - anchor) < self.threshold_db:
                    return i
            return None
        return self._index.get(self._key(observation))

    def state_for(self, observation) -> int:
        found = self.lookup(observation)
        if found is not None:
            return found
        sid = len(self.anchors)
        if self.mode is StateMode.LOCATION:
            self.anchors.append(CellIndex(*observation))
        else:
            self.anchors.append(float(observation))
        if not (self.mode is StateMode.RSS and self.threshold_db > 0):
            self._index[self._key(observation)] = sid
        return sid


class QTable:
    """Action values ``q[state, action]``; pairs never written read as 0."""

    def __init__(self, capacity: int = 64):
        self._q = np.zeros((max(int(capacity), 1), len(ACTIONS)), dtype=np.float64)
        self.n_states = 0

    def reserve(self, capacity: int) -> None:
        if capacity > self._q.shape[0]:
            grown = np.zeros((capacity, len(ACTIONS)), dtype=np.float64)
            grown[: self._q.shape[0]] = self._q
            self._q = grown

    def _touch(self, state: int) -> None:
        if state >= self._q.shape[0]:
            self.reserve(max(2 * self._q.shape[0], state + 1))
        if state >= self.n_states:
            self.n_states = state + 1

    @property
    def buffer(self) -> np.ndarray:
        """Backing array, writable in place by the training loop."""
        return self._q

    @property
    def values(self) -> np.ndarray:
        return self._q[: self.n_states].copy()

    def get(self, state: int, action) -> float:
        if state < 0 or state >= self._q.shape[0]:
            return 0.0
        return float(self._q[state, int(action)])

    def set(self, state: int, action, value: float) -> None:
        if not math.isfinite(value):
            raise NonFiniteInput(f"Q value must be finite, got {value}")
        self._touch(state)
        self._q[state, int(action)] = value

    def row(self, state: int) -> np.ndarray:
        if state < 0 or state >= self._q.shape[0]:
            return np.zeros(len(ACTIONS))
        return self._q[state].copy()

    def max_value(self, state: int) -> float:
        if state < 0 or state >= self._q.shape[0]:
            return 0.0
        return float(self._q[state].max())

    def dump(self) -> str:
        """``state_id,action,value`` lines, states ascending, compass order."""
        lines = []
        for s in range(self.n_states):
            for a in ACTIONS:
                lines.append(f"{s},{a.name},{float(self._q[s, a])!r}")
        return "\n".join(lines) + ("\n" if lines else "")


class RewardKind(str, enum.Enum):
    RSS_DELTA = "rss_delta"
    INVERSE_DISTANCE = "inverse_distance"


@dataclass(frozen=True)
class RewardSpec:
    kind: RewardKind = RewardKind.RSS_DELTA
    goal_bonus: float = 1000.0
    # "replace": reaching the goal pays goal_bonus only; "add": step reward + bonus
    bonus_mode: str = "replace"

    def __post_init__(self):
        object.__setattr__(self, "kind", RewardKind(self.kind))
        if self.goal_bonus < 0:
            raise ValueError("goal_bonus must be non-negative")
        if self.bonus_mode not in ("replace", "add"):
            raise ValueError(f"bonus_mode must be 'replace' or 'add', got {self.bonus_mode!r}")


def q_update(
    table: QTable, s: int, a, r: float, s_next: int, alpha: float, gamma: float
) -> float:
    """One bootstrap step; returns the new ``q(s, a)``."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if not (math.isfinite(r) and math.isfinite(gamma)):
        raise NonFiniteInput("reward and gamma must be finite")
    target = r + gamma * table.max_value(s_next)
    new = (1.0 - alpha) * table.get(s, a) + alpha * target
    table.set(s, a, new)
    return new


def pick_uniform(items: Sequence, rng: np.random.Generator):
    return items[int(rng.random() * len(items))]


def greedy_action(
    table: QTable, s: int, allowed: Sequence[Action], rng: np.random.Generator | None = None
) -> Action:
    """Best allowed action.  Ties go to a uniform draw, or to compass order
    when ``rng`` is None."""
    allowed = sorted(allowed)
    if not allowed:
        raise EmptyActionSet("no action to choose from")
    q = table.row(s)
    best = max(q[a] for a in allowed)
    ties = [Action(a) for a in allowed if q[a] == best]
    if len(ties) == 1 or rng is None:
        return ties[0]
    return pick_uniform(ties, rng)


def epsilon_greedy(
    table: QTable, s: int, allowed: Sequence[Action], epsilon: float, rng: np.random.Generator
) -> Action:
    allowed = sorted(allowed)
    if not allowed:
        raise EmptyActionSet("no action to choose from")
    if rng.random() < epsilon:
        return Action(pick_uniform(allowed, rng))
    return greedy_action(table, s, allowed, rng)


def reward(
    spec: RewardSpec,
    rss_now: float,
    rss_prev: float,
    dist_now_m: float,
    reached_goal: bool,
) -> float:
    if reached_goal and spec.bonus_mode == "replace":
        return spec.goal_bonus
    if spec.kind is RewardKind.RSS_DELTA:
        base = rss_now - rss_prev
    else:
        if dist_now_m <= 0:
            if reached_goal:
                base = 0.0
            else:
                raise ZeroDistance("inverse-distance reward at zero distance")
        else:
            base = 1.0 / dist_now_m
    return base + spec.goal_bonus if reached_goal else base
