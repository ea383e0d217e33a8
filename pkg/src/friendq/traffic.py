"""Discrete-time slot simulator of a small grid of signalised junctions.

Geometry
--------
Junctions sit on a grid: 1 or 2 or 3 in a west-east line, 4 as a 2x2 block
(row index grows southward). Every junction has four inbound arms
N, E, S, W (index 0..3), named after the side traffic arrives from. An arm
with a junction on that side is an interior road shared with the neighbour;
otherwise it is an entry road fed by seeded demand. Vehicles drive straight
through and depart on clearing the last stop line on their path.

Each lane of ``lane_length`` metres holds ``floor(lane_length / 7)`` slots
(one car length plus gap). Slot 0 is the upstream end, the last slot is at
the stop line.

Signals cycle NS_GREEN -> EW_GREEN -> ... with a fixed all-stop yellow
before each new green. A junction is at a decision point when its green
timer has run out and it is not in yellow; until a new duration is set it
holds its current green.

State encoding
--------------
A 16x16 binary matrix per junction. Each arm is split into 8 cells of
``lane_length / 8`` metres, cell 0 farthest from the junction::

    N arm: rows 0..7,       columns 5..7   (lane k -> column 5 + k)
    S arm: rows 15..8,      columns 8..10  (lane k -> column 8 + k)
    E arm: columns 15..8,   rows 5..7      (lane k -> row 5 + k)
    W arm: columns 0..7,    rows 8..10     (lane k -> row 8 + k)

The column/row offsets generalise to ``lanes_per_road`` lanes as
``8 - lanes + k`` and ``8 + k``.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels

NORTH, EAST, SOUTH, WEST = range(4)
ARM_NAMES = ("N", "E", "S", "W")
SLOT_LENGTH = 7.0
GRID_SIZE = 16
CELLS_PER_ARM = GRID_SIZE // 2
DEFAULT_DURATIONS = (10, 15, 20, 25, 30, 35)

# (dx, dy) toward the side an arm's traffic comes from
_ARM_OFFSET = {NORTH: (0, -1), EAST: (1, 0), SOUTH: (0, 1), WEST: (-1, 0)}
_LAYOUTS = {
    1: [(0, 0)],
    2: [(0, 0), (1, 0)],
    3: [(0, 0), (1, 0), (2, 0)],
    4: [(0, 0), (1, 0), (0, 1), (1, 1)],
}


class Phase(IntEnum):
    NS_GREEN = 0
    EW_GREEN = 1


def arm_axis(arm: int) -> int:
    return Phase.NS_GREEN if arm in (NORTH, SOUTH) else Phase.EW_GREEN


@dataclass
class NetworkConfig:
    """Network and demand attributes; defaults follow the reference experiment setup."""

    junction_count: int = 2
    roads: Optional[int] = None
    lane_length: float = 100.0
    lanes_per_road: int = 3
    arrival_rate: float = 0.05
    ew_demand_factor: float = 1.0
    fixed_phase_duration: float = 40.0
    sim_duration: float = 19800.0
    rng_seed: int = 0
    dt: float = 1.0
    yellow: float = 3.0
    initial_green: float = 20.0
    durations: tuple = DEFAULT_DURATIONS

    def __post_init__(self):
        self.durations = tuple(float(d) for d in self.durations)
        self.validate()

    def validate(self):
        if self.junction_count not in _LAYOUTS:
            raise ValueError(f"junction_count must be in 1..4, got {self.junction_count}")
        if not self.lane_length > 0:
            raise ValueError("lane_length must be positive")
        if self.lane_length < SLOT_LENGTH:
            raise ValueError(f"lane_length must hold at least one {SLOT_LENGTH} m slot")
        if not 1 <= self.lanes_per_road <= CELLS_PER_ARM:
            raise ValueError(f"lanes_per_road must be in 1..{CELLS_PER_ARM}")
        if self.arrival_rate < 0 or self.ew_demand_factor < 0:
            raise ValueError("arrival rates must be non-negative")
        for name in ("fixed_phase_duration", "sim_duration", "dt", "yellow", "initial_green"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.durations or min(self.durations) <= 0:
            raise ValueError("durations must be a non-empty set of positive seconds")
        if self.roads is not None and self.roads != count_external_roads(self.junction_count):
            raise ValueError(
                f"roads={self.roads} does not match the {self.junction_count}-junction "
                f"topology ({count_external_roads(self.junction_count)} directed external roads)"
            )

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["durations"] = list(self.durations)
        return d


def neighbours(junction_count: int) -> list[list[int]]:
    """Adjacent junction ids for every junction, in arm order N, E, S, W."""
    pos = _LAYOUTS[junction_count]
    index = {p: j for j, p in enumerate(pos)}
    out = []
    for x, y in pos:
        nb = []
        for arm in range(4):
            dx, dy = _ARM_OFFSET[arm]
            if (x + dx, y + dy) in index:
                nb.append(index[(x + dx, y + dy)])
        out.append(nb)
    return out


def count_external_roads(junction_count: int) -> int:
    """Directed entry plus exit roads of the generated topology."""
    pos = set(_LAYOUTS[junction_count])
    entries = sum(
        1
        for x, y in pos
        for dx, dy in _ARM_OFFSET.values()
        if (x + dx, y + dy) not in pos
    )
    return 2 * entries


@dataclass
class Vehicle:
    id: int
    lane: int
    position: float
    cumulative_wait: float
    entered_at: float
    departed_at: Optional[float] = None


@dataclass
class SignalPhase:
    junction: int
    active_phase: Phase
    remaining: float
    in_yellow: bool
    yellow_remaining: float


@dataclass
class OccupancyGrid:
    cells: np.ndarray
    junction: int


@dataclass
class SimState:
    cfg: NetworkConfig
    # topology, per lane
    lane_junction: np.ndarray
    lane_arm: np.ndarray
    lane_axis: np.ndarray
    lane_index: np.ndarray
    lane_next: np.ndarray
    entry_lanes: np.ndarray
    n_slots: int
    # dynamics
    occ: np.ndarray
    pending: np.ndarray
    arrivals: np.ndarray
    now: float = 0.0
    step_count: int = 0
    # signals, per junction
    phase: np.ndarray = None
    remaining: np.ndarray = None
    in_yellow: np.ndarray = None
    yellow_remaining: np.ndarray = None
    next_green: np.ndarray = None
    fixed_time: bool = False
    # vehicles, indexed by id
    n_veh: int = 0
    n_departed: int = 0
    n_arrived: int = 0
    veh_lane: np.ndarray = None
    veh_slot: np.ndarray = None
    veh_wait: np.ndarray = None
    veh_alive: np.ndarray = None
    veh_event: np.ndarray = None
    veh_entered: np.ndarray = None
    veh_departed: np.ndarray = None
    # encoding lookup: per junction, (lane ids, slot->row, slot->col)
    grid_maps: list = field(default_factory=list)
    departed_buf: np.ndarray = None
    log: Optional[list] = None

    @property
    def junction_count(self) -> int:
        return self.cfg.junction_count

    @property
    def slot_length(self) -> float:
        return self.cfg.lane_length / self.n_slots

    def copy(self) -> "SimState":
        new = dataclasses.replace(self)
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                setattr(new, f.name, v.copy())
        new.log = None if self.log is None else list(self.log)
        return new

    def green_axis(self) -> np.ndarray:
        g = self.phase.astype(np.int64)
        g[self.in_yellow] = -1
        return g

    def at_decision(self, junction: int) -> bool:
        return (not self.in_yellow[junction]) and self.remaining[junction] <= 0

    def decision_junctions(self) -> list[int]:
        return [j for j in range(self.junction_count) if self.at_decision(j)]

    def signal(self, junction: int) -> SignalPhase:
        return SignalPhase(
            junction=junction,
            active_phase=Phase(int(self.phase[junction])),
            remaining=float(self.remaining[junction]),
            in_yellow=bool(self.in_yellow[junction]),
            yellow_remaining=float(self.yellow_remaining[junction]),
        )

    def on_network(self) -> int:
        return int(self.veh_alive[: self.n_veh].sum())

    def vehicles(self) -> list[Vehicle]:
        out = []
        for v in range(self.n_veh):
            dep = self.veh_departed[v]
            out.append(
                Vehicle(
                    id=v,
                    lane=int(self.veh_lane[v]),
                    position=(self.veh_slot[v] + 0.5) * self.slot_length,
                    cumulative_wait=float(self.veh_wait[v]),
                    entered_at=float(self.veh_entered[v]),
                    departed_at=None if np.isnan(dep) else float(dep),
                )
            )
        return out

    def lane_name(self, lane: int) -> str:
        j = self.lane_junction[lane]
        return f"J{j}{ARM_NAMES[self.lane_arm[lane]]}{self.lane_index[lane]}"

    def place_vehicle(self, lane: int, slot: int, wait: float = 0.0) -> int:
        """Insert a vehicle directly (for scripted scenarios); returns its id."""
        if self.occ[lane, slot] >= 0:
            raise ValueError(f"slot {slot} of lane {lane} is occupied")
        self._reserve(1)
        v = self.n_veh
        self.n_veh += 1
        self.occ[lane, slot] = v
        self.veh_lane[v] = lane
        self.veh_slot[v] = slot
        self.veh_wait[v] = wait
        self.veh_alive[v] = True
        self.veh_entered[v] = self.now
        if self.log is not None:
            self.log.append((self.now, v, "spawn", self.lane_name(lane),
                             (slot + 0.5) * self.slot_length, wait))
        return v

    def _reserve(self, extra: int):
        need = self.n_veh + extra
        cap = self.veh_lane.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name, fill in (("veh_lane", -1), ("veh_slot", -1), ("veh_wait", 0.0),
                           ("veh_alive", False), ("veh_event", -1),
                           ("veh_entered", np.nan), ("veh_departed", np.nan)):
            old = getattr(self, name)
            arr = np.full(new_cap, fill, dtype=old.dtype)
            arr[:cap] = old
            setattr(self, name, arr)


def _arrival_schedule(cfg: NetworkConfig, entry_rates: np.ndarray, rng: np.random.Generator):
    """Per-step arrival counts, shape (entry lanes, steps).

    Inter-arrival gaps are Uniform(0, 2 / rate) per lane (mean 1 / rate).
    """
    steps = int(round(cfg.sim_duration / cfg.dt))
    counts = np.zeros((len(entry_rates), steps), dtype=np.int64)
    for i, rate in enumerate(entry_rates):
        if rate * cfg.sim_duration < 1e-9:  # also guards 2 / rate overflow
            continue
        expect = int(cfg.sim_duration * rate * 1.2 + 10 * math.sqrt(cfg.sim_duration * rate) + 10)
        times = np.cumsum(rng.uniform(0.0, 2.0 / rate, size=expect))
        while times[-1] < cfg.sim_duration:
            more = np.cumsum(rng.uniform(0.0, 2.0 / rate, size=expect)) + times[-1]
            times = np.concatenate((times, more))
        times = times[times < cfg.sim_duration]
        counts[i] = np.bincount((times // cfg.dt).astype(np.int64), minlength=steps)[:steps]
    return counts


def _grid_maps(lane_junction, lane_arm, lane_index, n_slots, slot_length, lane_length, J):
    cell_length = lane_length / CELLS_PER_ARM
    lanes_per = int(lane_index.max()) + 1
    maps = []
    for j in range(J):
        lanes = np.flatnonzero(lane_junction == j)
        rows = np.zeros((len(lanes), n_slots), dtype=np.int64)
        cols = np.zeros((len(lanes), n_slots), dtype=np.int64)
        for r, lane in enumerate(lanes):
            arm, k = lane_arm[lane], lane_index[lane]
            for s in range(n_slots):
                c = min(int(((s + 0.5) * slot_length) // cell_length), CELLS_PER_ARM - 1)
                rows[r, s], cols[r, s] = arm_cell(arm, k, c, lanes_per)
        maps.append((lanes, rows, cols))
    return maps


def arm_cell(arm: int, lane: int, cell: int, lanes_per_road: int) -> tuple[int, int]:
    """Matrix (row, col) of a cell on an arm; cell 0 is farthest from the junction."""
    mid = CELLS_PER_ARM
    if arm == NORTH:
        return cell, mid - lanes_per_road + lane
    if arm == EAST:
        return mid - lanes_per_road + lane, GRID_SIZE - 1 - cell
    if arm == SOUTH:
        return GRID_SIZE - 1 - cell, mid + lane
    return mid + lane, cell


def build_network(cfg: NetworkConfig, *, episode: int = 0, fixed_time: bool = False,
                  record: bool = False) -> SimState:
    """Initialise an empty network with every signal in NS_GREEN.

    ``episode`` offsets the demand stream so successive episodes of one
    experiment see different (but reproducible) arrivals.
    """
    cfg.validate()
    J = cfg.junction_count
    pos = _LAYOUTS[J]
    index = {p: j for j, p in enumerate(pos)}
    lanes_per = cfg.lanes_per_road
    n_lanes = J * 4 * lanes_per

    lane_junction = np.repeat(np.arange(J), 4 * lanes_per)
    lane_arm = np.tile(np.repeat(np.arange(4), lanes_per), J)
    lane_index = np.tile(np.arange(lanes_per), 4 * J)
    lane_axis = np.array([arm_axis(a) for a in lane_arm], dtype=np.int64)
    lane_next = np.full(n_lanes, -1, dtype=np.int64)
    entries = []
    for lane in range(n_lanes):
        j, arm, k = lane_junction[lane], lane_arm[lane], lane_index[lane]
        x, y = pos[j]
        dx, dy = _ARM_OFFSET[arm]
        if (x + dx, y + dy) not in index:
            entries.append(lane)
        # traffic continues away from the side it came from
        down = (x - dx, y - dy)
        if down in index:
            lane_next[lane] = (index[down] * 4 + arm) * lanes_per + k
    entry_lanes = np.array(entries, dtype=np.int64)

    n_slots = int(cfg.lane_length // SLOT_LENGTH)
    slot_length = cfg.lane_length / n_slots
    rng = np.random.default_rng([cfg.rng_seed, episode])
    factor = np.where(lane_axis[entry_lanes] == Phase.EW_GREEN, cfg.ew_demand_factor, 1.0)
    arrivals = _arrival_schedule(cfg, cfg.arrival_rate * factor, rng)

    cap = 1024
    state = SimState(
        cfg=cfg,
        lane_junction=lane_junction,
        lane_arm=lane_arm,
        lane_axis=lane_axis,
        lane_index=lane_index,
        lane_next=lane_next,
        entry_lanes=entry_lanes,
        n_slots=n_slots,
        occ=np.full((n_lanes, n_slots), -1, dtype=np.int64),
        pending=np.zeros(len(entry_lanes), dtype=np.int64),
        arrivals=arrivals,
        phase=np.full(J, Phase.NS_GREEN, dtype=np.int64),
        remaining=np.full(J, cfg.fixed_phase_duration if fixed_time else cfg.initial_green),
        in_yellow=np.zeros(J, dtype=bool),
        yellow_remaining=np.zeros(J),
        next_green=np.zeros(J),
        fixed_time=fixed_time,
        veh_lane=np.full(cap, -1, dtype=np.int64),
        veh_slot=np.full(cap, -1, dtype=np.int64),
        veh_wait=np.zeros(cap),
        veh_alive=np.zeros(cap, dtype=bool),
        veh_event=np.full(cap, -1, dtype=np.int8),
        veh_entered=np.full(cap, np.nan),
        veh_departed=np.full(cap, np.nan),
        log=[] if record else None,
    )
    state.departed_buf = np.zeros(n_lanes, dtype=np.int64)
    state.grid_maps = _grid_maps(lane_junction, lane_arm, lane_index, n_slots, slot_length,
                                 cfg.lane_length, J)
    return state


def step(state: SimState, dt: Optional[float] = None) -> SimState:
    """Advance one timestep in place and return the state."""
    dt = state.cfg.dt if dt is None else dt
    t = state.step_count
    if t < state.arrivals.shape[1]:
        new = state.arrivals[:, t]
        state.pending += new
        state.n_arrived += int(new.sum())
    state._reserve(len(state.entry_lanes))
    first_new = state.n_veh
    alive_before = np.flatnonzero(state.veh_alive[: state.n_veh]) if state.log is not None else None
    n_veh, n_dep = kernels.advance(
        state.occ, state.lane_axis, state.lane_junction, state.lane_next,
        state.entry_lanes, state.pending, state.green_axis(),
        state.veh_lane, state.veh_slot, state.veh_wait, state.veh_alive, state.veh_event,
        state.departed_buf, state.n_veh, float(dt),
    )
    state.n_veh = int(n_veh)
    end = state.now + dt
    state.veh_entered[first_new: state.n_veh] = end
    if n_dep:
        state.veh_departed[state.departed_buf[:n_dep]] = end
        state.n_departed += int(n_dep)
    if state.log is not None:
        _log_step(state, alive_before, first_new, end)
    _advance_signals(state, dt)
    state.now = end
    state.step_count += 1
    return state


def _log_step(state: SimState, alive_before, first_new, end):
    names = {kernels.STOP: "stop", kernels.MOVE: "move", kernels.DEPART: "depart"}
    for v in alive_before:
        code = int(state.veh_event[v]) if state.veh_alive[v] else kernels.DEPART
        lane = int(state.veh_lane[v])
        state.log.append((end, int(v), names[code], state.lane_name(lane),
                          (state.veh_slot[v] + 0.5) * state.slot_length,
                          float(state.veh_wait[v])))
    for v in range(first_new, state.n_veh):
        state.log.append((end, v, "spawn", state.lane_name(int(state.veh_lane[v])),
                          0.5 * state.slot_length, 0.0))


def _advance_signals(state: SimState, dt: float):
    y = state.in_yellow.copy()
    state.yellow_remaining[y] -= dt
    done = y & (state.yellow_remaining <= 1e-9)
    state.in_yellow[done] = False
    state.yellow_remaining[done] = 0.0
    state.remaining[done] = state.next_green[done]
    green = ~y
    state.remaining[green] = np.maximum(state.remaining[green] - dt, 0.0)


def set_phase_duration(state: SimState, junction: int, duration: float) -> SimState:
    """Schedule the next phase (after yellow) with ``duration`` seconds of green."""
    cfg = state.cfg
    if not 0 <= junction < cfg.junction_count:
        raise KeyError(f"unknown junction {junction}")
    allowed = set(cfg.durations)
    if state.fixed_time:
        allowed.add(float(cfg.fixed_phase_duration))
    if float(duration) not in allowed:
        raise ValueError(f"duration {duration} s is not an allowed action {sorted(allowed)}")
    if not state.at_decision(junction):
        raise RuntimeError(f"junction {junction} is not at a decision point")
    state.phase[junction] = 1 - state.phase[junction]
    state.in_yellow[junction] = True
    state.yellow_remaining[junction] = cfg.yellow
    state.next_green[junction] = float(duration)
    state.remaining[junction] = 0.0
    return state


def encode_state(state: SimState, junction: int) -> OccupancyGrid:
    if not 0 <= junction < state.junction_count:
        raise KeyError(f"unknown junction {junction}")
    lanes, rows, cols = state.grid_maps[junction]
    cells = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int8)
    mask = state.occ[lanes] >= 0
    cells[rows[mask], cols[mask]] = 1
    return OccupancyGrid(cells=cells, junction=junction)


def total_waiting(state: SimState) -> float:
    n = state.n_veh
    return float(state.veh_wait[:n][state.veh_alive[:n]].sum())


def local_waiting(state: SimState, junction: int) -> float:
    """Waiting summed over vehicles on the junction's own approach lanes."""
    n = state.n_veh
    alive = state.veh_alive[:n]
    here = state.lane_junction[state.veh_lane[:n]] == junction
    return float(state.veh_wait[:n][alive & here].sum())


def reward(prev_wait: float, next_wait: float) -> float:
    return prev_wait - next_wait


def run_until_decision(state: SimState, max_steps: Optional[int] = None) -> list[int]:
    """Step until some junction needs a decision or the run ends.

    Returns the junctions at a decision point (empty when time is up).
    """
    end = state.arrivals.shape[1]
    n = 0
    while state.step_count < end:
        due = state.decision_junctions()
        if due:
            return due
        step(state)
        n += 1
        if max_steps is not None and n >= max_steps:
            break
    return []


def finished(state: SimState) -> bool:
    return state.step_count >= state.arrivals.shape[1]


# ---------------------------------------------------------------- files

_CONFIG_KEYS = {
    "junction_count": int,
    "roads": int,
    "lane_length": float,
    "lanes_per_road": int,
    "arrival_rate": float,
    "ew_demand_factor": float,
    "fixed_phase_duration": float,
    "sim_duration": float,
    "rng_seed": int,
    "dt": float,
    "yellow": float,
    "initial_green": float,
}


def read_config(path, section: str = "network") -> NetworkConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return config_from_section(parser[section] if parser.has_section(section) else {})


def config_from_section(sec) -> NetworkConfig:
    kw = {}
    for key, value in dict(sec).items():
        if key == "durations":
            kw[key] = tuple(float(x) for x in value.replace(",", " ").split())
        elif key in _CONFIG_KEYS:
            kw[key] = _CONFIG_KEYS[key](value)
        else:
            raise KeyError(f"unknown network key {key!r}")
    return NetworkConfig(**kw)


def write_config(cfg: NetworkConfig, path, section: str = "network"):
    parser = configparser.ConfigParser()
    parser[section] = config_section(cfg)
    with open(path, "w") as fh:
        parser.write(fh)


def config_section(cfg: NetworkConfig) -> dict:
    out = {}
    for key in _CONFIG_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    out["durations"] = " ".join(repr(d) for d in cfg.durations)
    return out


LOG_COLUMNS = ("time_s", "vehicle_id", "event", "lane", "position_m", "cumulative_wait_s")


def write_vehicle_log(state: SimState, path):
    if state.log is None:
        raise ValueError("state was built without record=True")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in state.log:
            w.writerow(row)


def read_vehicle_log(path) -> list[tuple]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return [(float(t), int(v), e, lane, float(p), float(w)) for t, v, e, lane, p, w in rows[1:]]
