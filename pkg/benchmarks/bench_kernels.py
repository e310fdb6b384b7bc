"""Time the numba and numpy paths of every hot kernel.

    python benchmarks/bench_kernels.py [--repeat 20] [--episode]

``--episode`` also times one full simulated episode in a subprocess per path,
toggled through ``CROWDSLAM_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from crowdslam import kernels
from crowdslam._accel import HAVE_NUMBA


def cases(rng):
    pos = rng.uniform(-6, 6, (15, 2))
    seqs = np.ascontiguousarray(rng.uniform([0, -1], [1.5, 1], (225, 10, 2)))
    mpc = (
        np.array([0.0, 0.0, 0.3]), seqs, 0.1, pos, rng.normal(size=pos.shape), np.array([4.0, 1.0]),
        0.6, 0.5, np.array([1.0, 2.0, 0.01, 10.0, 0.5]), np.array([-6.0, 6.0, -6.0, 6.0]),
    )  # fmt: skip
    batch = rng.uniform(-6, 6, (32 * 15, 2))
    bounds = np.arange(33, dtype=np.int64) * 15
    src, _ = kernels.radius_edges_np(batch, bounds, 4.0)
    starts = np.flatnonzero(np.r_[True, src[1:] != src[:-1]])
    logits = rng.normal(size=src.shape[0])
    return {
        "social_forces (15 peds)": ("social_forces", (pos, np.array([0.5, -0.5]), 2.0, 0.35, 0.3, 0.3)),
        "mpc_rollout_costs (225 x 10)": ("mpc_rollout_costs", mpc),
        "radius_edges (32 scenes x 15)": ("radius_edges", (batch, bounds, 4.0)),
        "segment_softmax (same graph)": ("segment_softmax", (logits, starts)),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    n = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n


def episode_seconds(flag: str) -> float:
    code = (
        "import time; from crowdslam.simulator import SimConfig, run_episode;"
        "run_episode(SimConfig(episode_length=5), 0);"
        "t = time.perf_counter(); run_episode(SimConfig(), 1); print(time.perf_counter() - t)"
    )
    env = dict(os.environ, CROWDSLAM_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--episode", action="store_true", help="also time a full simulated episode")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    print(f"{'kernel':34s} {'numpy (us)':>12s} {'numba (us)':>12s} {'speed-up':>9s}")
    for label, (name, call_args) in cases(np.random.default_rng(args.seed)).items():
        t_np = time_call(getattr(kernels, name + "_np"), call_args, args.repeat)
        if HAVE_NUMBA:
            t_nb = time_call(getattr(kernels, name + "_nb"), call_args, args.repeat)
            print(f"{label:34s} {t_np * 1e6:12.1f} {t_nb * 1e6:12.1f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{label:34s} {t_np * 1e6:12.1f} {'-':>12s} {'-':>9s}")
    if args.episode:
        t_np = episode_seconds("0")
        line = f"{'run_episode (default config)':34s} {t_np * 1e6:12.0f}"
        if HAVE_NUMBA:
            t_nb = episode_seconds("1")
            line += f" {t_nb * 1e6:12.0f} {t_np / t_nb:8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
