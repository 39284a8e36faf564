"""Numba kernels vs the numpy fallback.

Times the two table kernels directly, then one end-to-end simulation per
backend in a fresh interpreter (the backend is chosen at import time).

    python benchmarks/bench_kernels.py [--repeat N] [--skip-sim]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from epochsim import _accel

SIM_SNIPPET = """
import time
from epochsim import SimConfig, Simulator, _accel
from epochsim.trace import bundled_trace, parse_trace
ops = parse_trace(bundled_trace("high-locality").splitlines(), 4)
t = time.perf_counter()
Simulator(SimConfig(), ops).run(final_checkpoint=True)
print(_accel.backend(), time.perf_counter() - t)
"""


def leaf(rng, density):
    valid = (rng.random(1024) < density).astype(np.uint8)
    spec = (rng.random(1024) < 0.2).astype(np.uint8) & valid
    private = rng.integers(0, 4, 1024).astype(np.uint8)
    shared = rng.integers(0, 8, 16).astype(np.uint8)
    return valid, spec, private, shared


def time_call(fn, args_list, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        for args in args_list:
            fn(*args)
        best = min(best, time.perf_counter() - t)
    return best / len(args_list)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    out = np.empty(1024, dtype=np.int64)
    rows = []
    for density in (0.01, 0.1, 0.5):
        leaves = [leaf(rng, density) for _ in range(200)]
        scans = [(lv[0], int(rng.integers(0, 1024))) for lv in leaves]
        sweeps = [(v, s, p.copy(), sh.copy(), 0, 1, out) for v, s, p, sh in leaves]
        row = {"density": density,
               "next_set_np": time_call(_accel.next_set_np, scans, repeat),
               "sweep_np": time_call(_accel.predictor_sweep_np, sweeps, repeat)}
        if _accel.USE_NUMBA:
            _accel.next_set(*scans[0])  # compile outside the timed loop
            _accel.predictor_sweep(*sweeps[0])
            row["next_set_nb"] = time_call(_accel.next_set, scans, repeat)
            row["sweep_nb"] = time_call(_accel.predictor_sweep, sweeps, repeat)
        rows.append(row)
    return rows


def bench_sim():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, EPOCHSIM_NO_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-sim", action="store_true")
    args = ap.parse_args()

    print(f"backend in this process: {_accel.backend()}")
    print(f"{'density':>8} {'kernel':>10} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for row in bench_kernels(args.repeat):
        for k in ("next_set", "sweep"):
            np_us = row[f"{k}_np"] * 1e6
            nb = row.get(f"{k}_nb")
            nb_txt = f"{nb * 1e6:10.2f}" if nb is not None else f"{'n/a':>10}"
            sp = f"{np_us / (nb * 1e6):8.1f}" if nb else f"{'':>8}"
            print(f"{row['density']:>8} {k:>10} {np_us:10.2f} {nb_txt} {sp}")
    if not args.skip_sim:
        sims = bench_sim()
        print("end-to-end high-locality run: "
              + ", ".join(f"{k} {v:.2f}s" for k, v in sims.items()))


if __name__ == "__main__":
    main()
