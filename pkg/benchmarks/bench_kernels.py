"""Compare the compiled and numpy stratum kernels.

Usage::

    python benchmarks/bench_kernels.py [--strata 2000] [--repeat 20]

Each workload packs ``--strata`` matched sets into one call of
``clogit_strata`` (log-likelihood, score and Hessian), the call the Newton
solver makes once per iteration. A last row times a complete two-step
analysis of one simulated pooled dataset under each backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pooled_spline import _backend


def packed_strata(rng, n_strata, sizes, n_feat=3):
    """Random features for strata whose (cases, controls) are drawn from ``sizes``."""
    F, y, off = [], [], [0]
    for k in rng.integers(0, len(sizes), n_strata):
        n, m = sizes[k]
        F.append(rng.normal(size=(n + m, n_feat)))
        y.append(np.r_[np.ones(n, np.int8), np.zeros(m, np.int8)])
        off.append(off[-1] + n + m)
    return np.vstack(F), np.concatenate(y), np.asarray(off, np.int64)


WORKLOADS = {
    "1:1": [(1, 1)],
    "1:2 and 1:1": [(1, 2), (1, 1)],
    "mixed n:m (N <= 12)": [(1, 3), (2, 4), (3, 5), (2, 8), (4, 8)],
}

ANALYZE_SNIPPET = """
import time
from pooled_spline.inference import analyze
from pooled_spline.simulation import SimulationConfig, generate_dataset
cfg = SimulationConfig(n_replicates=1)
ds = generate_dataset(cfg, 0)
t = time.perf_counter()
for _ in range({n}):
    analyze(ds, "full", basis=cfg.basis, wald_terms=())
print((time.perf_counter() - t) / {n})
"""


def time_analyze(backend, n):
    env = dict(os.environ, POOLED_SPLINE_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", ANALYZE_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strata", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    backends = ["python"]
    try:
        _backend.get_kernel("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy fallback only")

    rng = np.random.default_rng(args.seed)
    beta = np.array([0.3, -0.2, 0.1])
    print(f"{'workload':<24}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for label, sizes in WORKLOADS.items():
        F, y, off = packed_strata(rng, args.strata, sizes)
        times = []
        for b in backends:
            kern = _backend.get_kernel(b)
            kern(F, y, off, beta, True)
            best = min(timeit.repeat(lambda: kern(F, y, off, beta, True), number=1,
                                     repeat=args.repeat))
            times.append(1e3 * best)
        speed = f"{times[1] / times[0]:>9.1f}x" if len(times) == 2 else ""
        print(f"{label:<24}" + "".join(f"{t:>16.3f}" for t in times) + speed)

    times = [1e3 * time_analyze(b, 5) for b in backends]
    speed = f"{times[1] / times[0]:>9.1f}x" if len(times) == 2 else ""
    print(f"{'analyze, 2000 pairs':<24}" + "".join(f"{t:>16.3f}" for t in times) + speed)


if __name__ == "__main__":
    main()
