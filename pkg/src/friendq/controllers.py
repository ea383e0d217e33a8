"""Signal controllers and the episode/training loop.

Decision model: a junction decides when its own green runs out, so
junctions decide asynchronously. At a decision the controller picks the
green duration of the next phase (an index into ``cfg.durations``). The
transition recorded for that decision spans to the same junction's next
decision; its reward is the drop in total waiting over that interval
(network-wide for centralized and Friend, the junction's own approaches
for independent learners). The joint action stored with a transition is
the vector of every junction's currently active duration index.

Friend-DQN uses one 6-output network per junction over
``own grid + neighbour grids + own phase`` with the joint value
``Q(s, a) = sum_i Q_i(s_i, a_i)``. Under that factorisation the Friend
value (max over joint actions) is the sum of per-agent maxima, so greedy
joint action selection costs ``6 n`` evaluations and the TD target is
``r + gamma * sum_i max_a Q_i^target(s_i', a)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import qnet, traffic
from .qnet import DQNAgent, TrainSchedule
from .traffic import GRID_SIZE, NetworkConfig

CONVERGENCE_WINDOW = 20
CONVERGENCE_TOL = 0.05


class ControllerKind(str, Enum):
    FIXED_TIME = "fixed"
    CENTRALIZED_DQN = "centralized"
    INDEPENDENT_DQN = "independent"
    FRIEND_DQN = "friend"

    @classmethod
    def parse(cls, text) -> "ControllerKind":
        if isinstance(text, cls):
            return text
        t = str(text).strip().lower().replace("-", "_")
        for k in cls:
            if t in (k.value, k.name.lower()):
                return k
        raise ValueError(f"unknown controller kind {text!r}")


@dataclass
class DecisionContext:
    grids: np.ndarray  # (n, 16, 16) of 0/1
    phases: np.ndarray  # (n, 2) one-hot of the phase the current/next duration applies to
    total_wait: float
    local_wait: np.ndarray
    time: float

    @property
    def junction_count(self) -> int:
        return self.grids.shape[0]


def observe(state: traffic.SimState) -> DecisionContext:
    n = state.junction_count
    grids = np.stack([traffic.encode_state(state, j).cells for j in range(n)])
    # the phase whose green the junction's pending or active duration governs
    governed = state.phase.copy()
    for j in state.decision_junctions():
        governed[j] = 1 - governed[j]
    phases = np.zeros((n, 2), dtype=np.int8)
    phases[np.arange(n), governed] = 1
    return DecisionContext(
        grids=grids,
        phases=phases,
        total_wait=traffic.total_waiting(state),
        local_wait=np.array([traffic.local_waiting(state, j) for j in range(n)]),
        time=state.now,
    )


# ---------------------------------------------------------------- inputs


def local_input(ctx: DecisionContext, j: int) -> np.ndarray:
    return np.concatenate((ctx.grids[j].ravel(), ctx.phases[j])).astype(np.float64)


def friend_input(ctx: DecisionContext, j: int, nbrs: Sequence[int]) -> np.ndarray:
    parts = [ctx.grids[j].ravel()] + [ctx.grids[k].ravel() for k in nbrs] + [ctx.phases[j]]
    return np.concatenate(parts).astype(np.float64)


def central_input(ctx: DecisionContext) -> np.ndarray:
    return np.concatenate((ctx.grids.reshape(-1), ctx.phases.reshape(-1))).astype(np.float64)


def local_width() -> int:
    return GRID_SIZE * GRID_SIZE + 2


# ---------------------------------------------------------------- action selection


def decode_joint(flat: int, n: int, n_actions: int = 6) -> tuple:
    """Base-``n_actions`` digits of ``flat``, junction 0 most significant."""
    return tuple(int(d) for d in np.unravel_index(int(flat), (n_actions,) * n))


def encode_joint(joint: Sequence[int], n_actions: int = 6) -> int:
    return int(np.ravel_multi_index(tuple(int(a) for a in joint), (n_actions,) * len(joint)))


def act_fixed(ctx: DecisionContext, duration: float = 40.0) -> tuple:
    return (float(duration),) * ctx.junction_count


def act_centralized(ctx: DecisionContext, net: qnet.QNetworkParams, exploit: float,
                    rng: np.random.Generator, n_actions: int = 6) -> tuple:
    n = ctx.junction_count
    if net.n_actions != n_actions ** n:
        raise ValueError(f"joint head width {net.n_actions} != {n_actions}^{n}")
    flat = qnet.epsilon_greedy(qnet.forward(net, central_input(ctx)), exploit, rng)
    return decode_joint(flat, n, n_actions)


def act_friend(ctx: DecisionContext, nets: Sequence[qnet.QNetworkParams], exploit: float,
               rng: np.random.Generator, neighbours: Sequence[Sequence[int]],
               junctions: Optional[Sequence[int]] = None, counter: Optional[list] = None) -> dict:
    """Per-agent epsilon-greedy choice; returns ``{junction: action index}``.

    ``counter``, if given, is extended with the number of action values
    evaluated for each agent.
    """
    if len(nets) != ctx.junction_count or len(neighbours) != ctx.junction_count:
        raise ValueError("need one network and one neighbour list per junction")
    out = {}
    for j in range(ctx.junction_count) if junctions is None else junctions:
        q = qnet.forward(nets[j], friend_input(ctx, j, neighbours[j]))
        if counter is not None:
            counter.append(q.size)
        out[j] = qnet.epsilon_greedy(q, exploit, rng)
    return out


def act_independent(ctx: DecisionContext, nets: Sequence[qnet.QNetworkParams], exploit: float,
                    rng: np.random.Generator, junctions: Optional[Sequence[int]] = None,
                    counter: Optional[list] = None) -> dict:
    if len(nets) != ctx.junction_count:
        raise ValueError("need one network per junction")
    out = {}
    for j in range(ctx.junction_count) if junctions is None else junctions:
        q = qnet.forward(nets[j], local_input(ctx, j))
        if counter is not None:
            counter.append(q.size)
        out[j] = qnet.epsilon_greedy(q, exploit, rng)
    return out


def factored_argmax(tables: Sequence[np.ndarray]) -> tuple:
    """Joint argmax of ``sum_i Q_i(a_i)``: the per-agent argmaxes."""
    return tuple(int(np.argmax(t)) for t in tables)


# ---------------------------------------------------------------- controllers


class Controller:
    kind: ControllerKind
    learns = True

    def __init__(self, cfg: NetworkConfig, schedule: TrainSchedule, seed: int):
        self.cfg = cfg
        self.schedule = schedule
        self.n = cfg.junction_count
        self.n_actions = len(cfg.durations)
        self.rng = np.random.default_rng([seed, 7919])
        self.decisions = 0
        self.anneal_steps: Optional[int] = None
        self.losses: list = []

    def exploit(self) -> float:
        return self.schedule.exploit_probability(self.decisions, self.anneal_steps)

    def decide(self, ctx: DecisionContext, due: Sequence[int]) -> dict:
        raise NotImplementedError

    def store(self, j: int, prev: DecisionContext, joint: np.ndarray, next_ctx: DecisionContext,
              terminal: bool):
        pass

    def learn(self) -> list:
        return []

    def networks(self) -> dict:
        return {}

    def head_widths(self) -> list:
        return [p.n_actions for p in self.networks().values()]

    def mean_q(self, ctx: DecisionContext) -> float:
        return float("nan")


class FixedTimeController(Controller):
    kind = ControllerKind.FIXED_TIME
    learns = False

    def decide(self, ctx, due):
        d = act_fixed(ctx, self.cfg.fixed_phase_duration)
        return {j: d[j] for j in due}


class CentralizedDQN(Controller):
    kind = ControllerKind.CENTRALIZED_DQN

    def __init__(self, cfg, schedule, seed):
        super().__init__(cfg, schedule, seed)
        width = self.n * local_width()
        self.agent = DQNAgent(width, self.n_actions ** self.n, schedule,
                              np.random.default_rng([seed, 1]))
        self._fresh = 0

    def decide(self, ctx, due):
        joint = act_centralized(ctx, self.agent.online, self.exploit(), self.rng, self.n_actions)
        return {j: joint[j] for j in due}

    def store(self, j, prev, joint, next_ctx, terminal):
        r = (prev.total_wait - next_ctx.total_wait) / self.schedule.reward_scale
        self.agent.remember(central_input(prev), encode_joint(joint, self.n_actions), r,
                            central_input(next_ctx), terminal)
        self._fresh += 1

    def learn(self):
        out = []
        for _ in range(self._fresh):
            loss = self.agent.learn()
            if loss is not None:
                out.append(loss)
        self._fresh = 0
        return out

    def networks(self):
        return {"central": self.agent.online}

    def mean_q(self, ctx):
        return float(qnet.forward(self.agent.online, central_input(ctx)).mean())


class IndependentDQN(Controller):
    kind = ControllerKind.INDEPENDENT_DQN

    def __init__(self, cfg, schedule, seed):
        super().__init__(cfg, schedule, seed)
        self.agents = [DQNAgent(local_width(), self.n_actions, schedule,
                                np.random.default_rng([seed, 100 + j])) for j in range(self.n)]
        self._fresh: list = []

    def decide(self, ctx, due):
        return act_independent(ctx, [a.online for a in self.agents], self.exploit(), self.rng, due)

    def store(self, j, prev, joint, next_ctx, terminal):
        r = (prev.local_wait[j] - next_ctx.local_wait[j]) / self.schedule.reward_scale
        self.agents[j].remember(local_input(prev, j), int(joint[j]), r,
                                local_input(next_ctx, j), terminal)
        self._fresh.append(j)

    def learn(self):
        out = []
        for j in self._fresh:
            loss = self.agents[j].learn()
            if loss is not None:
                out.append(loss)
        self._fresh = []
        return out

    def networks(self):
        return {f"agent{j}": a.online for j, a in enumerate(self.agents)}

    def mean_q(self, ctx):
        return float(np.mean([qnet.forward(a.online, local_input(ctx, j)).mean()
                              for j, a in enumerate(self.agents)]))


class FriendDQN(Controller):
    kind = ControllerKind.FRIEND_DQN

    def __init__(self, cfg, schedule, seed):
        super().__init__(cfg, schedule, seed)
        self.neighbours = traffic.neighbours(self.n)
        self.online = []
        init_rng = np.random.default_rng([seed, 2])
        for j in range(self.n):
            width = GRID_SIZE * GRID_SIZE * (1 + len(self.neighbours[j])) + 2
            self.online.append(qnet.init_params((width, *schedule.hidden, self.n_actions), init_rng))
        self.target = [qnet.sync_target(p) for p in self.online]
        self.buffer = qnet.ReplayBuffer(schedule.memory_size, int(init_rng.integers(2**31)))
        self.train_steps = 0
        self.syncs = 0
        self._fresh = 0

    def inputs(self, ctx) -> list:
        return [friend_input(ctx, j, self.neighbours[j]) for j in range(self.n)]

    def decide(self, ctx, due):
        return act_friend(ctx, self.online, self.exploit(), self.rng, self.neighbours, due)

    def store(self, j, prev, joint, next_ctx, terminal):
        r = (prev.total_wait - next_ctx.total_wait) / self.schedule.reward_scale
        row = {"action": np.asarray(joint, dtype=np.int64), "reward": r, "terminal": terminal}
        for k, (x, x2) in enumerate(zip(self.inputs(prev), self.inputs(next_ctx))):
            row[f"s{k}"] = x
            row[f"n{k}"] = x2
        self.buffer.add(**row)
        self._fresh += 1

    def joint_td_loss(self, batch: dict):
        """Loss and per-agent gradients of the factored TD error."""
        gamma = self.schedule.gamma
        a = batch["action"]
        B = a.shape[0]
        rows = np.arange(B)
        q_tot = np.zeros(B)
        boot = np.zeros(B)
        caches = []
        for k in range(self.n):
            q, acts = qnet.forward_cached(self.online[k], batch[f"s{k}"])
            caches.append((q, acts))
            q_tot += q[rows, a[:, k]]
            boot += qnet.forward(self.target[k], batch[f"n{k}"]).max(axis=1)
        y = batch["reward"] + gamma * np.where(batch["terminal"], 0.0, boot)
        err = q_tot - y
        grads = []
        for k, (q, acts) in enumerate(caches):
            dout = np.zeros_like(q)
            dout[rows, a[:, k]] = 2.0 * err / B
            grads.append(qnet.backward(self.online[k], acts, dout))
        return float(np.mean(err ** 2)), grads

    def learn(self):
        out = []
        sch = self.schedule
        for _ in range(self._fresh):
            if len(self.buffer) < sch.batch_size:
                break
            loss, grads = self.joint_td_loss(self.buffer.sample(sch.batch_size))
            self.online = [qnet.sgd_step(p, g, sch.learn_rate) for p, g in zip(self.online, grads)]
            self.train_steps += 1
            if self.train_steps % sch.target_sync_every == 0:
                if not all(p.is_finite() for p in self.online):
                    raise FloatingPointError("non-finite network parameters")
                self.target = [qnet.sync_target(p) for p in self.online]
                self.syncs += 1
            out.append(loss)
        self._fresh = 0
        return out

    def networks(self):
        return {f"agent{j}": p for j, p in enumerate(self.online)}

    def mean_q(self, ctx):
        return float(np.mean([qnet.forward(p, x).mean() for p, x in zip(self.online, self.inputs(ctx))]))


_KINDS = {
    ControllerKind.FIXED_TIME: FixedTimeController,
    ControllerKind.CENTRALIZED_DQN: CentralizedDQN,
    ControllerKind.INDEPENDENT_DQN: IndependentDQN,
    ControllerKind.FRIEND_DQN: FriendDQN,
}


def make_controller(kind, cfg: NetworkConfig, schedule: TrainSchedule, seed: int) -> Controller:
    return _KINDS[ControllerKind.parse(kind)](cfg, schedule, seed)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricSeries:
    episode: list = field(default_factory=list)
    mean_wait_s: list = field(default_factory=list)
    cum_reward: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)
    converged_flag: list = field(default_factory=list)

    COLUMNS = ("episode", "mean_wait_s", "cum_reward", "epsilon", "converged_flag")

    def append(self, episode, mean_wait, cum_reward, epsilon):
        self.episode.append(episode)
        self.mean_wait_s.append(mean_wait)
        self.cum_reward.append(cum_reward)
        self.epsilon.append(epsilon)
        self.converged_flag.append(window_converged(self.mean_wait_s))

    def __len__(self):
        return len(self.episode)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(self.episode, self.mean_wait_s, self.cum_reward, self.epsilon,
                           self.converged_flag):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3])),
                            int(row[4])])

    @classmethod
    def read_csv(cls, path) -> "MetricSeries":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            for row in reader:
                out.episode.append(int(row[0]))
                out.mean_wait_s.append(float(row[1]))
                out.cum_reward.append(float(row[2]))
                out.epsilon.append(float(row[3]))
                out.converged_flag.append(bool(int(row[4])))
        return out


def window_converged(series: Sequence[float], window: int = CONVERGENCE_WINDOW,
                     tol: float = CONVERGENCE_TOL) -> bool:
    """Trailing ``window`` mean within ``tol`` (relative) of the window before it."""
    if len(series) < 2 * window:
        return False
    recent = float(np.mean(series[-window:]))
    before = float(np.mean(series[-2 * window: -window]))
    return abs(recent - before) < tol * abs(before)


def episodes_to_convergence(series: Sequence[float], window: int = CONVERGENCE_WINDOW,
                            tol: float = CONVERGENCE_TOL) -> Optional[int]:
    """Number of episodes after which the criterion first holds, or None."""
    for e in range(2 * window, len(series) + 1):
        if window_converged(series[:e], window, tol):
            return e
    return None


def converged_mean_wait(series: Sequence[float], window: int = CONVERGENCE_WINDOW) -> float:
    return float(np.mean(series[-window:]))


# ---------------------------------------------------------------- training loop


@dataclass
class EpisodeResult:
    mean_wait: float
    cum_reward: float
    decisions: list  # (time, junction, duration)
    transitions: list  # (junction, t0, t1, reward)
    losses: list


def expected_decisions(cfg: NetworkConfig) -> float:
    cycle = float(np.mean(cfg.durations)) + cfg.yellow
    return cfg.junction_count * cfg.sim_duration / cycle


def run_episode(controller: Controller, cfg: NetworkConfig, episode: int, learn: bool = True,
                train_log: Optional[qnet.TrainLog] = None,
                state: Optional[traffic.SimState] = None) -> EpisodeResult:
    """Simulate one episode, storing transitions and training when ``learn``."""
    fixed = controller.kind is ControllerKind.FIXED_TIME
    if state is None:
        state = traffic.build_network(cfg, episode=episode, fixed_time=fixed)
    n = cfg.junction_count
    active = np.zeros(n, dtype=np.int64)
    open_: dict = {}
    decisions, transitions, losses = [], [], []
    first_wait = None
    ctx = None
    while True:
        due = traffic.run_until_decision(state)
        ctx = observe(state)
        if first_wait is None:
            first_wait = ctx.total_wait
        if not due:
            break
        if controller.learns:
            for j in due:
                if j in open_:
                    prev, joint = open_.pop(j)
                    _record(controller, transitions, j, prev, joint, ctx, learn, False)
        choice = controller.decide(ctx, due)
        for j in due:
            if fixed:
                duration = choice[j]
            else:
                active[j] = choice[j]
                duration = cfg.durations[choice[j]]
            traffic.set_phase_duration(state, j, duration)
            decisions.append((state.now, j, float(duration)))
        if controller.learns:
            for j in due:
                open_[j] = (ctx, active.copy())
            controller.decisions += len(due)
            if learn:
                step_losses = controller.learn()
                losses += step_losses
                if train_log is not None and step_losses:
                    train_log.record(controller.decisions, controller.exploit(),
                                     float(np.mean(step_losses)), controller.mean_q(ctx),
                                     _buffer_size(controller))
    # time limit: close open intervals, bootstrapping from the final state
    for j in sorted(open_):
        prev, joint = open_[j]
        _record(controller, transitions, j, prev, joint, ctx, learn, False)
    if learn and controller.learns:
        losses += controller.learn()
    nv = state.n_veh
    mean_wait = float(state.veh_wait[:nv].mean()) if nv else 0.0
    return EpisodeResult(mean_wait, traffic.reward(first_wait, ctx.total_wait), decisions,
                         transitions, losses)


def _record(controller, transitions, j, prev, joint, ctx, learn, terminal):
    if controller.kind is ControllerKind.INDEPENDENT_DQN:
        r = traffic.reward(prev.local_wait[j], ctx.local_wait[j])
    else:
        r = traffic.reward(prev.total_wait, ctx.total_wait)
    transitions.append((j, prev.time, ctx.time, r))
    if learn:
        controller.store(j, prev, joint, ctx, terminal)


def _buffer_size(controller) -> int:
    if hasattr(controller, "buffer"):
        return len(controller.buffer)
    if hasattr(controller, "agent"):
        return len(controller.agent.buffer)
    if hasattr(controller, "agents"):
        return sum(len(a.buffer) for a in controller.agents)
    return 0


def train(kind, cfg: NetworkConfig, schedule: TrainSchedule, episodes: int, seed: int = 0,
          train_log: Optional[qnet.TrainLog] = None, progress=None):
    """Train a controller for ``episodes`` episodes; returns (controller, MetricSeries).

    Episode ``e`` uses demand stream ``(seed, e)``; the exploitation
    probability ramps over ``schedule.anneal_fraction`` of the expected
    decisions unless ``schedule.anneal_steps`` is set.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    cfg = cfg.replace(rng_seed=seed)
    controller = make_controller(kind, cfg, schedule, seed)
    if schedule.anneal_steps is None:
        controller.anneal_steps = int(math.ceil(
            schedule.anneal_fraction * episodes * expected_decisions(cfg)))
    series = MetricSeries()
    for e in range(episodes):
        res = run_episode(controller, cfg, e, learn=True, train_log=train_log)
        eps = controller.exploit() if controller.learns else 1.0
        series.append(e, res.mean_wait, res.cum_reward, eps)
        if progress is not None:
            progress(e, res)
    return controller, series


# ---------------------------------------------------------------- checkpoints


def save_controller(controller: Controller, directory, seed: int):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, params in controller.networks().items():
        fname = f"{name}.npz"
        qnet.save_params(params, d / fname)
        files[name] = fname
    manifest = {
        "kind": controller.kind.value,
        "junction_count": controller.n,
        "durations": list(controller.cfg.durations),
        "seed": seed,
        "networks": files,
        "config": controller.cfg.to_dict(),
        "schedule": asdict(controller.schedule),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_controller(directory) -> Controller:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = NetworkConfig(**manifest["config"])
    schedule = TrainSchedule(**manifest["schedule"])
    ctrl = make_controller(manifest["kind"], cfg, schedule, manifest["seed"])
    nets = {name: qnet.load_params(d / f) for name, f in manifest["networks"].items()}
    if isinstance(ctrl, CentralizedDQN):
        ctrl.agent.online = nets["central"]
        ctrl.agent.target = qnet.sync_target(nets["central"])
    elif isinstance(ctrl, IndependentDQN):
        for j, a in enumerate(ctrl.agents):
            a.online = nets[f"agent{j}"]
            a.target = qnet.sync_target(a.online)
    elif isinstance(ctrl, FriendDQN):
        ctrl.online = [nets[f"agent{j}"] for j in range(ctrl.n)]
        ctrl.target = [qnet.sync_target(p) for p in ctrl.online]
    return ctrl
