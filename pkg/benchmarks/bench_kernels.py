"""Compiled vs pure-Python car-following kernel.

Runs the same seeded world under both backends, checks the states stay
bit-identical, and reports per-step wall time.

    python3 benchmarks/bench_kernels.py --vehicles 200 --steps 400
"""

import argparse
import time

import numpy as np

from dtnative.sim import kernels, world


def make_world(vehicles, seed):
    cfg = world.SimConfig(sensors=5, seed=seed, rows=4, cols=4, arrival_rate=0.0)
    w = world.build_network(cfg)
    rng = np.random.default_rng(seed)
    n_routes = len(w.network.routes)
    for _ in range(vehicles):
        r = int(rng.integers(n_routes))
        k = int(rng.integers(w.route_len[r]))
        lane = w.routes[r, k]
        w.add_vehicle(r, k, float(rng.uniform(0, w.lane_len[lane])), float(rng.uniform(0, 13.89)))
    return w


def run(backend, vehicles, steps, seed):
    fn = kernels.get_backend(backend)[1]
    w = make_world(vehicles, seed)
    lane, pos, speed, ridx = w.v_lane.copy(), w.v_pos.copy(), w.v_speed.copy(), w.v_ridx.copy()
    red = w.lane_red()
    t0 = time.perf_counter()
    for _ in range(steps):
        order = np.lexsort((-pos, lane))
        fn(order, lane, pos, speed, ridx, w.v_route, w.routes, w.route_len, w.lane_len,
           w.lane_limit, red, 0.5, 2.0, 4.5, 5.0, 2.5)
    return time.perf_counter() - t0, (lane, pos, speed, ridx)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vehicles", type=int, default=200)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    backends = ["python"] + (["cython"] if kernels.CYTHON_AVAILABLE else [])
    results = {b: run(b, a.vehicles, a.steps, a.seed) for b in backends}
    for b, (secs, _) in results.items():
        print(f"{b:>7}: {secs / a.steps * 1e6:9.1f} us/step  ({a.vehicles} vehicles, {a.steps} steps)")
    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        same = all(np.array_equal(x, y) for x, y in zip(py[1], cy[1]))
        print(f"speedup: {py[0] / cy[0]:.1f}x   identical states: {same}")


if __name__ == "__main__":
    main()
