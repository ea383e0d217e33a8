"""Small feedforward Q-network with replay, a target copy and the TD loss.

Hidden layers are ReLU, the output layer is linear. Everything is plain
numpy; inputs may be a single vector or a batch of row vectors.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass
class QNetworkParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: W {W.shape} and b {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {k} input width does not chain")

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0], *(W.shape[1] for W in self.weights))

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_params(sizes: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> QNetworkParams:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append((rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return QNetworkParams(weights, biases)


def zeros_like(params: QNetworkParams) -> QNetworkParams:
    return QNetworkParams([np.zeros_like(W) for W in params.weights],
                          [np.zeros_like(b) for b in params.biases])


def forward(params: QNetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=params.weights[0].dtype)
    if x.shape[-1] != params.n_inputs:
        raise ValueError(f"input width {x.shape[-1]} != network input {params.n_inputs}")
    h = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def forward_cached(params: QNetworkParams, x: np.ndarray):
    """Batched forward pass keeping the activations needed by :func:`backward`."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backward(params: QNetworkParams, acts: list, dout: np.ndarray) -> QNetworkParams:
    """Gradients of ``sum(dout * output)`` with respect to every parameter."""
    gW, gb = [], []
    g = dout
    for k in range(len(params.weights) - 1, -1, -1):
        gW.append(acts[k].T @ g)
        gb.append(g.sum(axis=0))
        if k:
            g = (g @ params.weights[k].T) * (acts[k] > 0)
    return QNetworkParams(gW[::-1], gb[::-1])


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False


def _batch_arrays(batch):
    if isinstance(batch, dict):
        return (batch["state"], batch["action"], batch["reward"], batch["next_state"],
                batch["terminal"])
    return (np.array([t.state for t in batch], dtype=float),
            np.array([t.action for t in batch], dtype=np.int64),
            np.array([t.reward for t in batch], dtype=float),
            np.array([t.next_state for t in batch], dtype=float),
            np.array([t.terminal for t in batch], dtype=bool))


def td_loss(params: QNetworkParams, target_params: QNetworkParams, batch, gamma: float):
    """Mean squared TD error and its gradient with respect to ``params``.

    Targets ``r + gamma * max_a' Q_target(s', a')`` (no bootstrap on terminal
    transitions) are held fixed; only ``Q(s, a)`` is differentiated.
    ``batch`` is a sequence of :class:`Transition` or a dict of arrays as
    returned by :meth:`ReplayBuffer.sample`.
    """
    s, a, r, s2, term = _batch_arrays(batch)
    B = len(a)
    if B == 0:
        raise ValueError("empty batch")
    if np.any(a >= params.n_actions) or np.any(a < 0):
        raise IndexError("action index outside the network's output width")
    dtype = params.weights[0].dtype
    q, acts = forward_cached(params, np.asarray(s, dtype=dtype))
    boot = forward(target_params, s2).max(axis=1)
    y = r + gamma * np.where(term, 0.0, boot)
    rows = np.arange(B)
    err = q[rows, a] - y
    loss = float(np.mean(err ** 2))
    dout = np.zeros_like(q)
    dout[rows, a] = 2.0 * err / B
    return loss, backward(params, acts, dout)


def sgd_step(params: QNetworkParams, grads: QNetworkParams, learn_rate: float) -> QNetworkParams:
    if params.sizes != grads.sizes:
        raise ValueError(f"gradient shapes {grads.sizes} != parameter shapes {params.sizes}")
    return QNetworkParams(
        [W - learn_rate * g for W, g in zip(params.weights, grads.weights)],
        [b - learn_rate * g for b, g in zip(params.biases, grads.biases)],
    )


def sync_target(online: QNetworkParams) -> QNetworkParams:
    return copy.deepcopy(online)


def epsilon_greedy(q_values, epsilon_exploit: float, rng: np.random.Generator) -> int:
    """Argmax (lowest index on ties) with probability ``epsilon_exploit``, else uniform."""
    q_values = np.asarray(q_values)
    if q_values.size == 0:
        raise ValueError("empty q_values")
    if not 0.0 <= epsilon_exploit <= 1.0:
        raise ValueError("epsilon_exploit must lie in [0, 1]")
    if rng.random() < epsilon_exploit:
        return int(np.argmax(q_values))
    return int(rng.integers(q_values.size))


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is evicted first.

    Columns are allocated on the first :meth:`add` from the shapes given.
    """

    def __init__(self, capacity: int = 20000, rng_seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = np.random.default_rng(rng_seed)
        self.columns: dict = {}
        self.size = 0
        self.pos = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, **fields):
        if not self.columns:
            for name, v in fields.items():
                v = np.asarray(v)
                self.columns[name] = np.zeros((self.capacity, *v.shape), dtype=v.dtype)
        for name, col in self.columns.items():
            col[self.pos] = fields[name]
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def push(self, t: Transition):
        self.add(state=t.state, action=t.action, reward=t.reward, next_state=t.next_state,
                 terminal=t.terminal)

    def ordered(self) -> dict:
        """All stored rows, oldest first."""
        start = self.pos if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return {k: v[idx] for k, v in self.columns.items()}

    def sample(self, batch_size: int) -> dict:
        if batch_size > self.size:
            raise ValueError(f"batch of {batch_size} from a buffer of {self.size}")
        idx = self.rng.integers(self.size, size=batch_size)
        return {k: v[idx] for k, v in self.columns.items()}


@dataclass
class TrainSchedule:
    batch_size: int = 50
    target_sync_every: int = 400
    learn_rate: float = 0.1
    gamma: float = 0.9
    epsilon_start: float = 0.1
    epsilon_max: float = 0.9
    anneal_fraction: float = 0.2
    anneal_steps: Optional[int] = None
    memory_size: int = 20000
    reward_scale: float = 100.0
    hidden: tuple = (128, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.target_sync_every < 1 or self.memory_size < 1:
            raise ValueError("batch_size, target_sync_every and memory_size must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon_start <= self.epsilon_max <= 1.0:
            raise ValueError("need 0 <= epsilon_start <= epsilon_max <= 1")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")

    def exploit_probability(self, step: int, anneal_steps: Optional[int] = None) -> float:
        """Linear ramp from ``epsilon_start`` to ``epsilon_max``, then flat."""
        n = self.anneal_steps if anneal_steps is None else anneal_steps
        if not n:
            return self.epsilon_max
        frac = min(step / n, 1.0)
        return self.epsilon_start + frac * (self.epsilon_max - self.epsilon_start)


class DQNAgent:
    """Online network, target network and replay buffer for one learner."""

    def __init__(self, n_inputs: int, n_actions: int, schedule: TrainSchedule,
                 rng: np.random.Generator, dtype=np.float64):
        self.schedule = schedule
        self.rng = rng
        self.online = init_params((n_inputs, *schedule.hidden, n_actions), rng, dtype)
        self.target = sync_target(self.online)
        self.buffer = ReplayBuffer(schedule.memory_size, int(rng.integers(2**31)))
        self.train_steps = 0
        self.syncs = 0

    def q_values(self, x) -> np.ndarray:
        return forward(self.online, x)

    def act(self, x, exploit: float) -> int:
        return epsilon_greedy(self.q_values(x), exploit, self.rng)

    def remember(self, state, action, reward, next_state, terminal=False):
        self.buffer.add(state=np.asarray(state, dtype=self.online.weights[0].dtype),
                        action=int(action), reward=float(reward),
                        next_state=np.asarray(next_state, dtype=self.online.weights[0].dtype),
                        terminal=bool(terminal))

    def learn(self) -> Optional[float]:
        """One SGD step on a sampled batch; returns the loss, or None if too few samples."""
        sch = self.schedule
        if len(self.buffer) < sch.batch_size:
            return None
        loss, grads = td_loss(self.online, self.target, self.buffer.sample(sch.batch_size), sch.gamma)
        self.online = sgd_step(self.online, grads, sch.learn_rate)
        self.after_update()
        return loss

    def after_update(self):
        self.train_steps += 1
        if self.train_steps % self.schedule.target_sync_every == 0:
            if not self.online.is_finite():
                raise FloatingPointError("non-finite network parameters")
            self.target = sync_target(self.online)
            self.syncs += 1


# ---------------------------------------------------------------- files


def save_params(params: QNetworkParams, path):
    arrays = {f"a{k}": a for k, a in enumerate(params.arrays())}
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.array(CHECKPOINT_VERSION),
                 sizes=np.array(params.sizes), **arrays)


def load_params(path) -> QNetworkParams:
    with np.load(path) as z:
        if int(z["format_version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['format_version'])}")
        n = len(z["sizes"]) - 1
        ws = [z[f"a{2 * k}"] for k in range(n)]
        bs = [z[f"a{2 * k + 1}"] for k in range(n)]
    return QNetworkParams(ws, bs)


TRAIN_LOG_COLUMNS = ("step", "epsilon", "loss", "mean_q", "buffer_size")


class TrainLog:
    def __init__(self):
        self.rows: list = []

    def record(self, step, epsilon, loss, mean_q, buffer_size):
        self.rows.append((step, epsilon, loss, mean_q, buffer_size))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAIN_LOG_COLUMNS)
            w.writerows(self.rows)
