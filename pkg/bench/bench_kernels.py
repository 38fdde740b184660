"""Timing comparison of the compiled and pure-numpy sequence kernels.

Runs the forward+backward pass of one training-shaped workload per plan
under both loop implementations and reports wall times, the speedup,
and the worst numerical deviation between them.

Usage: python bench/bench_kernels.py [--repeats 50]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from edgepop.nn import kernels
from edgepop.nn.core import init_lstm_weights

PLANS = [
    ("desk scale", dict(hidden=16, width=12, steps=11, batch=32)),
    ("mid scale", dict(hidden=64, width=24, steps=11, batch=32)),
    ("full scale", dict(hidden=128, width=24, steps=11, batch=32)),
]


def workload(hidden, width, steps, batch, seed=0):
    rng = np.random.default_rng(seed)
    w = init_lstm_weights(hidden, width, rng)
    x = rng.normal(size=(steps, batch, width))
    dy = rng.normal(size=(steps, batch, hidden))
    return w, x, dy


def run_once(w, x, dy):
    y, cache = kernels.seq_forward(w.w, w.b, x)
    dw, db, dx = kernels.seq_backward(w.w, x, cache, dy)
    return y, dw, db, dx


def time_backend(cy_module, w, x, dy, repeats):
    saved = kernels._cy
    kernels._cy = cy_module
    try:
        run_once(w, x, dy)  # warm up
        t0 = time.perf_counter()
        for _ in range(repeats):
            out = run_once(w, x, dy)
        elapsed = (time.perf_counter() - t0) / repeats
        return elapsed, out
    finally:
        kernels._cy = saved


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    try:
        from edgepop.nn import _kernels_cy
    except ImportError:
        _kernels_cy = None
        print("compiled extension unavailable; timing the numpy path only")

    print(f"{'plan':<12} {'python':>10} {'cython':>10} {'speedup':>8} {'max dev':>10}")
    for name, shape in PLANS:
        w, x, dy = workload(**shape)
        t_py, out_py = time_backend(None, w, x, dy, args.repeats)
        if _kernels_cy is None:
            print(f"{name:<12} {t_py * 1e3:9.2f}ms {'-':>10} {'-':>8} {'-':>10}")
            continue
        t_cy, out_cy = time_backend(_kernels_cy, w, x, dy, args.repeats)
        dev = max(float(np.abs(a - b).max()) for a, b in zip(out_py, out_cy))
        print(
            f"{name:<12} {t_py * 1e3:9.2f}ms {t_cy * 1e3:9.2f}ms "
            f"{t_py / t_cy:7.2f}x {dev:10.2e}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
