"""Per-second vehicle update for the slot-based simulator.

Two implementations with identical semantics:

* ``advance_loops``: explicit loops, compiled with numba when enabled.
* ``advance_vectorized``: array expressions only, used when numba is off.

Update rule (parallel, start-of-step occupancy):

1. a vehicle moves one slot forward iff the slot ahead was empty at the
   start of the step;
2. a vehicle on the stop-line slot crosses iff its approach has green and
   either the approach exits the network (the vehicle departs) or slot 0 of
   the downstream approach was empty at the start of the step;
3. every entry lane with pending demand inserts one vehicle into slot 0 if
   that slot is empty after movement, in ascending entry order;
4. every vehicle that neither moved nor was inserted accrues ``dt`` wait.

Event codes written to ``veh_event``: 0 stop, 1 move, 2 spawn, 3 depart.
Departed ids are written to the front of ``departed``; both functions
return ``(vehicle count, departures)``.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

STOP, MOVE, SPAWN, DEPART = 0, 1, 2, 3


def advance_loops(occ, lane_axis, lane_junction, lane_next, entry_lanes, pending,
                  green_axis, veh_lane, veh_slot, veh_wait, veh_alive, veh_event,
                  departed, n_veh, dt):
    n_lanes, n_slots = occ.shape
    last = n_slots - 1
    occ0 = occ.copy()
    n_dep = 0
    for lane in range(n_lanes):
        v = occ0[lane, last]
        if v >= 0:
            crossed = False
            if green_axis[lane_junction[lane]] == lane_axis[lane]:
                nxt = lane_next[lane]
                if nxt < 0:
                    occ[lane, last] = -1
                    veh_alive[v] = False
                    veh_event[v] = DEPART
                    departed[n_dep] = v
                    n_dep += 1
                    crossed = True
                elif occ0[nxt, 0] < 0:
                    occ[lane, last] = -1
                    occ[nxt, 0] = v
                    veh_lane[v] = nxt
                    veh_slot[v] = 0
                    veh_event[v] = MOVE
                    crossed = True
            if not crossed:
                veh_event[v] = STOP
                veh_wait[v] += dt
        for k in range(last - 1, -1, -1):
            v = occ0[lane, k]
            if v < 0:
                continue
            if occ0[lane, k + 1] < 0:
                occ[lane, k + 1] = v
                occ[lane, k] = -1
                veh_slot[v] = k + 1
                veh_event[v] = MOVE
            else:
                veh_event[v] = STOP
                veh_wait[v] += dt
    for i in range(entry_lanes.shape[0]):
        lane = entry_lanes[i]
        if pending[i] > 0 and occ[lane, 0] < 0:
            v = n_veh
            n_veh += 1
            occ[lane, 0] = v
            veh_lane[v] = lane
            veh_slot[v] = 0
            veh_wait[v] = 0.0
            veh_alive[v] = True
            veh_event[v] = SPAWN
            pending[i] -= 1
    return n_veh, n_dep


def advance_vectorized(occ, lane_axis, lane_junction, lane_next, entry_lanes, pending,
                       green_axis, veh_lane, veh_slot, veh_wait, veh_alive, veh_event,
                       departed, n_veh, dt):
    n_lanes, n_slots = occ.shape
    last = n_slots - 1
    occ0 = occ.copy()

    head = occ0[:, last]
    exits = lane_next < 0
    next_free = np.zeros(n_lanes, dtype=bool)
    inner = ~exits
    next_free[inner] = occ0[lane_next[inner], 0] < 0
    green = green_axis[lane_junction] == lane_axis
    has_head = head >= 0
    cross = has_head & green & (exits | next_free)

    body = occ0[:, :-1]
    ahead = occ0[:, 1:]
    occupied = body >= 0
    mv = occupied & (ahead < 0)
    moved_ids = body[mv]
    occ[:, 1:][mv] = moved_ids
    occ[:, :-1][mv] = -1
    veh_slot[moved_ids] += 1
    veh_event[moved_ids] = MOVE
    held = body[occupied & ~mv]

    gone = cross & exits
    dep_ids = head[gone]
    occ[gone, last] = -1
    veh_alive[dep_ids] = False
    veh_event[dep_ids] = DEPART
    departed[: dep_ids.shape[0]] = dep_ids

    hop = cross & ~exits
    hop_ids = head[hop]
    hop_to = lane_next[hop]
    occ[hop, last] = -1
    occ[hop_to, 0] = hop_ids
    veh_lane[hop_ids] = hop_to
    veh_slot[hop_ids] = 0
    veh_event[hop_ids] = MOVE

    stuck = np.concatenate((held, head[has_head & ~cross]))
    veh_event[stuck] = STOP
    veh_wait[stuck] += dt

    can = (pending > 0) & (occ[entry_lanes, 0] < 0)
    lanes = entry_lanes[can]
    k = lanes.shape[0]
    if k:
        ids = np.arange(n_veh, n_veh + k)
        occ[lanes, 0] = ids
        veh_lane[ids] = lanes
        veh_slot[ids] = 0
        veh_wait[ids] = 0.0
        veh_alive[ids] = True
        veh_event[ids] = SPAWN
        pending[can] -= 1
    return n_veh + k, dep_ids.shape[0]


if USE_NUMBA:
    advance_jit = njit(cache=True)(advance_loops)
    advance = advance_jit
else:
    advance_jit = None
    advance = advance_vectorized
