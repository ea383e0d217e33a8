"""Tabular multi-agent Q-learning with the Friend stage-game value.

Q-values live in a :class:`StageGameTensor`: for every state an array of
shape ``(n_agents, |A_1|, ..., |A_n|)`` holding one table per agent. Unseen
states read as all zeros.

The Friend value of agent ``i`` maximises the expected ``Q^i`` over product
distributions ``pi_1 x ... x pi_n``. The expectation is multilinear in the
``pi_k``, so its maximum over the product of simplices is attained at a
vertex, i.e. at a pure joint action; we therefore enumerate joint actions.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np


@dataclass
class LearningParams:
    alpha: float = 0.5
    beta_gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta_gamma < 1.0:
            raise ValueError("beta_gamma must lie in [0, 1)")


@dataclass
class StageGameTensor:
    action_counts: tuple
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.action_counts = tuple(int(a) for a in self.action_counts)
        if not self.action_counts or min(self.action_counts) < 1:
            raise ValueError("every agent needs at least one action")

    @property
    def agent_count(self) -> int:
        return len(self.action_counts)

    @property
    def shape(self) -> tuple:
        return (self.agent_count, *self.action_counts)

    def table(self, state: Hashable) -> np.ndarray:
        """Read-only view of all agents' tables at ``state`` (zeros if unseen)."""
        t = self.values.get(state)
        if t is None:
            return np.zeros(self.shape)
        return t

    def _writable(self, state: Hashable) -> np.ndarray:
        t = self.values.get(state)
        if t is None:
            t = np.zeros(self.shape)
            self.values[state] = t
        return t

    def set(self, state: Hashable, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.shape == self.action_counts:
            table = np.broadcast_to(table, self.shape)
        if table.shape != self.shape:
            raise ValueError(f"table shape {table.shape} != {self.shape}")
        self.values[state] = np.array(table, dtype=float)

    def check_joint(self, joint_action: Sequence[int]) -> tuple:
        ja = tuple(int(a) for a in joint_action)
        if len(ja) != self.agent_count:
            raise IndexError(f"joint action {ja} has wrong length")
        for a, n in zip(ja, self.action_counts):
            if not 0 <= a < n:
                raise IndexError(f"joint action {ja} out of range {self.action_counts}")
        return ja

    def copy(self) -> "StageGameTensor":
        return StageGameTensor(self.action_counts, {s: t.copy() for s, t in self.values.items()})


def friend_value_2p(q: StageGameTensor, state: Hashable, agent: int = 0) -> float:
    """Two-player Friend value: max over (a1, a2) of agent's Q."""
    if q.agent_count != 2:
        raise ValueError(f"friend_value_2p needs 2 agents, got {q.agent_count}")
    return float(q.table(state)[agent].max())


def friend_value_n(q: StageGameTensor, state: Hashable, agent: int = 0) -> float:
    if not 0 <= agent < q.agent_count:
        raise IndexError(f"agent {agent} out of range")
    return float(q.table(state)[agent].max())


def friend_argmax(q: StageGameTensor, state: Hashable, agent: int = 0) -> tuple:
    """Joint action attaining agent's Friend value; lowest flat index on ties."""
    t = q.table(state)[agent]
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(t)), t.shape))


def expected_value(table: np.ndarray, policies: Sequence[np.ndarray]) -> float:
    """Expectation of a joint table under a product of per-agent distributions."""
    out = table
    for pi in reversed(policies):
        out = out @ pi
    return float(out)


def friend_q_update(q: StageGameTensor, state: Hashable, joint_action: Sequence[int],
                    rewards: Sequence[float], next_state: Optional[Hashable],
                    params: LearningParams, alpha: Optional[float] = None) -> StageGameTensor:
    """One asynchronous Friend-Q backup of the visited entry, in place.

    ``next_state=None`` marks a terminal transition (no bootstrap).
    """
    ja = q.check_joint(joint_action)
    if len(rewards) != q.agent_count:
        raise ValueError("need one reward per agent")
    a = params.alpha if alpha is None else alpha
    targets = [
        rewards[i] + (0.0 if next_state is None
                      else params.beta_gamma * friend_value_n(q, next_state, i))
        for i in range(q.agent_count)
    ]
    t = q._writable(state)
    for i in range(q.agent_count):
        idx = (i, *ja)
        t[idx] = (1.0 - a) * t[idx] + a * targets[i]
    return q


def pure_nash_oracle(q: StageGameTensor, state: Hashable) -> list[tuple]:
    """All pure joint actions from which no agent gains by deviating alone."""
    if q.agent_count > 3:
        raise ValueError("pure_nash_oracle is limited to 3 agents")
    if int(np.prod(q.action_counts)) > 10_000:
        raise ValueError("pure_nash_oracle is limited to 10,000 joint actions")
    t = q.table(state)
    stable = np.ones(q.action_counts, dtype=bool)
    for i in range(q.agent_count):
        best = t[i].max(axis=i, keepdims=True)
        stable &= t[i] >= best
    return [tuple(int(x) for x in ja) for ja in zip(*np.nonzero(stable))]


# ---------------------------------------------------------------- toy environments


class TabularGame:
    """Deterministic finite Markov game with per-agent rewards.

    ``next_states[s]`` and ``rewards[s]`` are arrays over joint actions;
    ``rewards[s]`` has a leading agent axis. ``next_state = -1`` is terminal.
    """

    def __init__(self, action_counts, next_states, rewards, start=0, horizon=None):
        self.action_counts = tuple(action_counts)
        self.next_states = [np.asarray(n, dtype=int) for n in next_states]
        self.rewards = [np.asarray(r, dtype=float) for r in rewards]
        self.start = start
        self.horizon = horizon
        self.n_states = len(self.next_states)

    @property
    def agent_count(self) -> int:
        return len(self.action_counts)

    def reset(self):
        return self.start

    def step(self, state, joint_action):
        ja = tuple(joint_action)
        r = self.rewards[state][(slice(None), *ja)]
        nxt = int(self.next_states[state][ja])
        return r, (None if nxt < 0 else nxt)


def matrix_game(payoff) -> TabularGame:
    """Repeated single-state common-payoff game."""
    payoff = np.asarray(payoff, dtype=float)
    n = payoff.ndim
    return TabularGame(payoff.shape, [np.zeros(payoff.shape, dtype=int)],
                       [np.broadcast_to(payoff, (n, *payoff.shape))])


def value_iteration(game: TabularGame, gamma: float, agent: int = 0, tol: float = 1e-12,
                    max_iter: int = 100_000) -> list[np.ndarray]:
    """Optimal joint-action values of agent's reward treating all agents as one."""
    Q = [np.zeros(game.action_counts) for _ in range(game.n_states)]
    for _ in range(max_iter):
        V = np.array([q.max() for q in Q])
        new = []
        for s in range(game.n_states):
            ns = game.next_states[s]
            boot = np.where(ns >= 0, V[np.clip(ns, 0, None)], 0.0)
            new.append(game.rewards[s][agent] + gamma * boot)
        delta = max(np.abs(a - b).max() for a, b in zip(new, Q))
        Q = new
        if delta < tol:
            break
    return Q


def greedy_joint_policy(q: StageGameTensor, states) -> dict:
    return {s: friend_argmax(q, s) for s in states}


def tabular_friend_learning(game: TabularGame, episodes: int, params: LearningParams,
                            exploration: float = 0.1, *, steps_per_episode: int = 1,
                            alpha_decay: Optional[float] = 1000.0,
                            rng: Optional[np.random.Generator] = None) -> StageGameTensor:
    """Friend-Q learning from zero tables with epsilon-greedy joint play.

    Each agent ``k`` plays its component of the joint action maximising its
    own ``Q^k`` (explores uniformly with probability ``exploration``); all
    agents then observe every reward and action and back up their tables.
    The step size for an entry visited ``m`` times is
    ``alpha / (1 + m / alpha_decay)`` (constant when ``alpha_decay`` is None).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    q = StageGameTensor(game.action_counts)
    visits: dict = {}
    for _ in range(episodes):
        s = game.reset()
        for _ in range(steps_per_episode):
            ja = []
            for k in range(game.agent_count):
                if rng.random() < exploration:
                    ja.append(int(rng.integers(game.action_counts[k])))
                else:
                    ja.append(friend_argmax(q, s, k)[k])
            ja = tuple(ja)
            r, s2 = game.step(s, ja)
            m = visits.get((s, ja), 0)
            visits[(s, ja)] = m + 1
            a = params.alpha if alpha_decay is None else params.alpha / (1.0 + m / alpha_decay)
            friend_q_update(q, s, ja, r, s2, params, alpha=a)
            if s2 is None:
                break
            s = s2
    return q


# ---------------------------------------------------------------- snapshots


def export_tensor(q: StageGameTensor, path):
    n = q.agent_count
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", *[f"a{i + 1}" for i in range(n)], "agent", "q_value"])
        w.writerow(["#action_counts", *q.action_counts, "", ""])
        for s in sorted(q.values, key=repr):
            t = q.values[s]
            for ja in itertools.product(*(range(c) for c in q.action_counts)):
                for i in range(n):
                    w.writerow([repr(s), *ja, i, repr(float(t[(i, *ja)]))])


def import_tensor(path) -> StageGameTensor:
    import ast

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    counts = tuple(int(x) for x in rows[1][1:] if x != "")
    q = StageGameTensor(counts)
    n = len(counts)
    for row in rows[2:]:
        s = ast.literal_eval(row[0])
        ja = tuple(int(x) for x in row[1 : 1 + n])
        i = int(row[1 + n])
        q._writable(s)[(i, *ja)] = float(row[2 + n])
    return q
