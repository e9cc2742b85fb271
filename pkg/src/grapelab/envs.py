"""NChain and 8x8 FrozenLake, as exact models and as step/reset simulators.

The simulators implement the dynamics directly rather than sampling from the
model tensors, so agreement between the two is a meaningful check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .mdp import TabularMdp

NCHAIN_INTERIOR = 20
LEFT, RIGHT = 0, 1

FROZENLAKE_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)
# 0=left, 1=down, 2=right, 3=up as (drow, dcol)
FL_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Transition(NamedTuple):
    x: int
    a: int
    r: float
    y: int
    mu_a: float
    d: bool


@dataclass
class TransitionBatch:
    """Column view of consecutive transitions.

    Arrays are 1-D ``(T,)`` or 2-D ``(T, B)`` for ``B`` independent
    trajectories laid side by side; time is always the leading axis.
    """

    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    d: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: Iterable[Transition]) -> "TransitionBatch":
        ts = list(transitions)
        if not ts:
            raise ValueError("empty trajectory")
        cols = list(zip(*ts))
        return cls(
            np.asarray(cols[0], dtype=np.int64),
            np.asarray(cols[1], dtype=np.int64),
            np.asarray(cols[2], dtype=float),
            np.asarray(cols[3], dtype=np.int64),
            np.asarray(cols[4], dtype=float),
            np.asarray(cols[5], dtype=bool),
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, t: int) -> Transition:
        return Transition(int(self.x[t]), int(self.a[t]), float(self.r[t]),
                          int(self.y[t]), float(self.mu[t]), bool(self.d[t]))

    def __iter__(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield self[t]


def as_batch(traj) -> TransitionBatch:
    return traj if isinstance(traj, TransitionBatch) else TransitionBatch.from_transitions(traj)


class ReplayBuffer:
    """Bounded FIFO of transitions backed by ring arrays."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._x = np.zeros(capacity, dtype=np.int64)
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._y = np.zeros(capacity, dtype=np.int64)
        self._mu = np.zeros(capacity)
        self._d = np.zeros(capacity, dtype=bool)
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def append(self, t: Transition) -> None:
        if not t.mu_a > 0.0:
            raise ValueError("behaviour probability must be positive")
        i = (self._start + self._size) % self.capacity
        self._x[i], self._a[i], self._r[i] = t.x, t.a, t.r
        self._y[i], self._mu[i], self._d[i] = t.y, t.mu_a, t.d
        if self._size < self.capacity:
            self._size += 1
        else:
            self._start = (self._start + 1) % self.capacity

    def slice(self, start: int, n: int) -> TransitionBatch:
        """Entries ``start .. start + n - 1`` counted from the oldest."""
        if start < 0 or n < 1 or start + n > self._size:
            raise IndexError(f"slice [{start}, {start + n}) outside buffer of size {self._size}")
        idx = (self._start + start + np.arange(n)) % self.capacity
        return TransitionBatch(self._x[idx], self._a[idx], self._r[idx],
                               self._y[idx], self._mu[idx], self._d[idx])

    def contiguous(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniformly placed run of ``n`` consecutive transitions (may cross episodes)."""
        if n > self._size:
            raise ValueError(f"need {n} transitions, buffer holds {self._size}")
        start = int(rng.integers(self._size - n + 1))
        return self.slice(start, n)

    def __iter__(self) -> Iterator[Transition]:
        if self._size:
            yield from self.slice(0, self._size)


# -- NChain ---------------------------------------------------------------------


def nchain_mdp(slip_prob: float, gamma: float = 0.99, goal_reward: float = 1.0,
               n_interior: int = NCHAIN_INTERIOR) -> TabularMdp:
    """Interior states ``1..n``, terminals ``0`` and ``n + 1``; reward on entering the right end."""
    if not 0.0 <= slip_prob <= 0.5:
        raise ValueError(f"slip_prob must lie in [0, 0.5], got {slip_prob}")
    S = n_interior + 2
    P = np.zeros((S, 2, S))
    r = np.zeros((S, 2))
    for x in (0, S - 1):
        P[x, :, x] = 1.0
    for x in range(1, S - 1):
        P[x, RIGHT, x + 1] += 1.0 - slip_prob
        P[x, RIGHT, x - 1] += slip_prob
        P[x, LEFT, x - 1] += 1.0 - slip_prob
        P[x, LEFT, x + 1] += slip_prob
        r[x] = goal_reward * P[x, :, S - 1]
    term = np.zeros(S, dtype=bool)
    term[[0, S - 1]] = True
    return TabularMdp(P, r, term, gamma, r_max=goal_reward)


class NChainEnv:
    def __init__(self, slip_prob: float = 0.2, goal_reward: float = 1.0,
                 start_state: int | str | None = None, rng: np.random.Generator | None = None,
                 n_interior: int = NCHAIN_INTERIOR):
        if not 0.0 <= slip_prob <= 0.5:
            raise ValueError(f"slip_prob must lie in [0, 0.5], got {slip_prob}")
        if start_state is None:
            start_state = n_interior // 2
        if start_state != "uniform-random" and not 1 <= int(start_state) <= n_interior:
            raise ValueError(f"start_state must be an interior state or 'uniform-random', got {start_state}")
        self.slip_prob = slip_prob
        self.goal_reward = goal_reward
        self.start_state = start_state
        self.n_interior = n_interior
        self.n_states = n_interior + 2
        self.n_actions = 2
        self.rng = rng if rng is not None else np.random.default_rng()
        self.state: int | None = None

    def model(self, gamma: float = 0.99) -> TabularMdp:
        return nchain_mdp(self.slip_prob, gamma, self.goal_reward, self.n_interior)

    def reset(self) -> int:
        if self.start_state == "uniform-random":
            self.state = int(self.rng.integers(1, self.n_interior + 1))
        else:
            self.state = int(self.start_state)
        return self.state

    def step(self, a: int) -> tuple[int, float, bool]:
        x = self.state
        if x is None or x == 0 or x == self.n_states - 1:
            raise RuntimeError("step called on a terminal or un-reset environment")
        move = 1 if a == RIGHT else -1
        if self.rng.random() < self.slip_prob:
            move = -move
        y = x + move
        self.state = y
        done = y == 0 or y == self.n_states - 1
        return y, (self.goal_reward if y == self.n_states - 1 else 0.0), done


# -- FrozenLake -------------------------------------------------------------------


def _fl_move(row: int, col: int, a: int, n: int) -> tuple[int, int]:
    dr, dc = FL_MOVES[a]
    return min(max(row + dr, 0), n - 1), min(max(col + dc, 0), n - 1)


def frozenlake_mdp(gamma: float = 0.99, slippery: bool = True,
                   layout: tuple[str, ...] = FROZENLAKE_8X8) -> TabularMdp:
    n = len(layout)
    S = n * n
    P = np.zeros((S, 4, S))
    r = np.zeros((S, 4))
    term = np.array([c in "HG" for c in "".join(layout)])
    for s in range(S):
        if term[s]:
            P[s, :, s] = 1.0
            continue
        row, col = divmod(s, n)
        for a in range(4):
            dirs = ((a - 1) % 4, a, (a + 1) % 4) if slippery else (a,)
            for b in dirs:
                nr, nc = _fl_move(row, col, b, n)
                y = nr * n + nc
                P[s, a, y] += 1.0 / len(dirs)
                if layout[nr][nc] == "G":
                    r[s, a] += 1.0 / len(dirs)
    return TabularMdp(P, r, term, gamma, r_max=1.0)


def frozenlake_goal(layout: tuple[str, ...] = FROZENLAKE_8X8) -> int:
    return "".join(layout).index("G")


class FrozenLakeEnv:
    def __init__(self, slippery: bool = True, rng: np.random.Generator | None = None,
                 layout: tuple[str, ...] = FROZENLAKE_8X8):
        self.layout = layout
        self.size = len(layout)
        self.slippery = slippery
        self.n_states = self.size * self.size
        self.n_actions = 4
        self.rng = rng if rng is not None else np.random.default_rng()
        flat = "".join(layout)
        self.start_state = flat.index("S")
        self.goal = flat.index("G")
        self._cells = flat
        self.state: int | None = None

    def model(self, gamma: float = 0.99) -> TabularMdp:
        return frozenlake_mdp(gamma, self.slippery, self.layout)

    def reset(self) -> int:
        self.state = self.start_state
        return self.state

    def step(self, a: int) -> tuple[int, float, bool]:
        x = self.state
        if x is None or self._cells[x] in "HG":
            raise RuntimeError("step called on a terminal or un-reset environment")
        if self.slippery:
            a = (a - 1 + int(self.rng.integers(3))) % 4
        row, col = _fl_move(*divmod(x, self.size), a, self.size)
        y = row * self.size + col
        self.state = y
        cell = self._cells[y]
        return y, (1.0 if cell == "G" else 0.0), cell in "HG"


def sample_trajectories(mdp: TabularMdp, mu: np.ndarray, x0: int, a0: int, horizon: int,
                        n: int, rng: np.random.Generator,
                        entry_reward: np.ndarray | None = None) -> TransitionBatch:
    """``n`` trajectories of length ``horizon`` from ``(x0, a0)`` under ``mu``, sampled from the model.

    With ``entry_reward`` the reward is the one paid on entering the next
    state; otherwise the expected reward ``r(x, a)`` is used. Steps after
    termination repeat the terminal state; the ``d`` flag makes them inert
    for the target recursions.
    """
    S, A = mdp.n_states, mdp.n_actions
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_mu = np.cumsum(mu, axis=1)
    shape = (horizon, n)
    xs = np.empty(shape, dtype=np.int64)
    acts = np.empty(shape, dtype=np.int64)
    ys = np.empty(shape, dtype=np.int64)
    x = np.full(n, x0, dtype=np.int64)
    a = np.full(n, a0, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for t in range(horizon):
        u = rng.random(n)
        y = np.minimum((u[:, None] > cum_p[x, a]).sum(axis=1), S - 1)
        y = np.where(done, x, y)
        xs[t], acts[t], ys[t] = x, a, y
        done = done | mdp.terminal[y]
        x = y
        v = rng.random(n)
        a_next = np.minimum((v[:, None] > cum_mu[np.where(mdp.terminal[x], 0, x)]).sum(axis=1), A - 1)
        a = np.where(done, a, a_next)
    d = mdp.terminal[ys]
    if entry_reward is None:
        r = mdp.reward[xs, acts]
    else:
        r = np.where(mdp.terminal[xs], 0.0, np.asarray(entry_reward, dtype=float)[ys])
    mu_a = mu[xs, acts]
    return TransitionBatch(xs, acts, r, ys, mu_a, d)
