"""Time the vehicle-update kernel: numba loops against the numpy fallback.

Both run on the same recorded simulator inputs, so the comparison is
kernel-only. Usage: python3 benchmarks/bench_kernels.py [--junctions 4] [--steps 2000]
"""
import argparse
import time

import numpy as np

from friendq import kernels, traffic


def recorded_inputs(junctions, steps, rate):
    """Snapshots of kernel arguments along one seeded run."""
    cfg = traffic.NetworkConfig(junction_count=junctions, arrival_rate=rate,
                                sim_duration=steps, rng_seed=0)
    state = traffic.build_network(cfg)
    rng = np.random.default_rng(0)
    snaps = []
    while not traffic.finished(state):
        for j in state.decision_junctions():
            traffic.set_phase_duration(state, j, cfg.durations[rng.integers(6)])
        state._reserve(len(state.entry_lanes))
        snaps.append(state.copy())
        traffic.step(state)
    return snaps


def call(fn, s):
    return fn(s.occ, s.lane_axis, s.lane_junction, s.lane_next, s.entry_lanes, s.pending,
              s.green_axis(), s.veh_lane, s.veh_slot, s.veh_wait, s.veh_alive, s.veh_event,
              s.departed_buf, s.n_veh, 1.0)


def bench(fn, snaps, repeats):
    best = np.inf
    for _ in range(repeats):
        work = [s.copy() for s in snaps]
        t0 = time.perf_counter()
        for s in work:
            call(fn, s)
        best = min(best, time.perf_counter() - t0)
    return best / len(snaps)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--junctions", type=int, default=4)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--rate", type=float, default=0.1)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    snaps = recorded_inputs(args.junctions, args.steps, args.rate)
    impls = {"numpy": kernels.advance_vectorized}
    if kernels.advance_jit is not None:
        call(kernels.advance_jit, snaps[0].copy())  # compile outside the timing
        impls["numba"] = kernels.advance_jit
    else:
        print("numba disabled (FRIENDQ_NO_NUMBA set or numba missing)")
    times = {name: bench(fn, snaps, args.repeats) for name, fn in impls.items()}
    for name, t in times.items():
        print(f"{name:6s} {t * 1e6:9.2f} us/step")
    if "numba" in times:
        print(f"speedup {times['numpy'] / times['numba']:.1f}x")


if __name__ == "__main__":
    main()
