"""Numba vs numpy timings for the hot kernels and one end-to-end solve.

    python benchmarks/bench_kernels.py [--repeat 200]

Kernel timings call the ``*_np`` and ``*_nb`` variants directly. The
end-to-end row runs a 64-domain solve in two subprocesses, one with
``MIXOPT_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixopt import _kernels as K

SOLVE_SNIPPET = """
import time, numpy as np
from mixopt.domains import DomainSet, Mixture
from mixopt.optimize import SolveSpec, solve_exact
from mixopt.regression import FitConfig, fit_models
from mixopt.oracle import GroundTruthModel, oracle_dataset
from mixopt.swarm import SwarmConfig, sample_swarm
m = 64
d = DomainSet(tuple((f"d{j:02d}", 1000 + 37 * j) for j in range(m)))
g = GroundTruthModel.random(d.ids, 8, seed=0)
t0 = time.perf_counter()
data = oracle_dataset(g, d, sample_swarm(d, SwarmConfig(3 * (m + 1), seed=0)))
models = fit_models(data, FitConfig(restarts=2, seed=0))
t1 = time.perf_counter()
p0 = Mixture(d.ids, np.full(m, 1.0 / m))
solve_exact(g.objective(), SolveSpec(p0, 0.05))
t2 = time.perf_counter()
print(f"{t1 - t0:.4f} {t2 - t1:.4f}")
"""


def _cases(rng):
    for m in (8, 64, 512):
        v = rng.normal(size=m)
        caps = rng.uniform(1.5 / m, 4.0 / m, size=m)
        yield f"project_capped_simplex m={m}", "project_capped_simplex", (v, caps)
        s = rng.uniform(1e-3, 10.0, size=m)
        yield f"project_capped_simplex_scaled m={m}", "project_capped_simplex_scaled", (v, caps, s)
    for m, n in ((8, 4), (64, 16)):
        A = rng.normal(size=(n, m)) / np.sqrt(m)
        c = rng.uniform(0.2, 1.0, size=n)
        w = np.full(n, 1.0 / n)
        p = rng.dirichlet(np.ones(m))
        yield f"loglinear_value_grad m={m} n={n}", "loglinear_value_grad", (w, c, A, p)
        P = rng.dirichlet(np.ones(m), size=512)
        yield f"loglinear_values m={m} n={n} K=512", "loglinear_values", (w, c, A, P)
    for m, k in ((8, 27), (64, 195)):
        P = rng.dirichlet(np.ones(m), size=k)
        theta = np.concatenate([[np.log(0.5)], rng.normal(size=m) / np.sqrt(m)])
        y = 0.5 + np.exp(P @ theta[1:]) + 1e-3 * rng.normal(size=k)
        yield f"loglinear_residual_jac m={m} K={k}", "loglinear_residual_jac", (theta, P, y)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, name, args in _cases(rng):
        f_np, f_nb = getattr(K, f"{name}_np"), getattr(K, f"{name}_nb")
        f_nb(*args)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: f_np(*args), number=repeat, repeat=3)) / repeat
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=repeat, repeat=3)) / repeat
        rows.append((label, t_np, t_nb))
    return rows


def bench_end_to_end():
    out = {}
    for name, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, MIXOPT_DISABLE_NUMBA=flag)
        subprocess.run([sys.executable, "-c", SOLVE_SNIPPET], env=env, check=True, capture_output=True)  # warm cache
        res = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET], env=env, check=True, capture_output=True, text=True)
        out[name] = tuple(float(x) for x in res.stdout.split())
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    print(f"{'kernel':45s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{label:45s} {t_np * 1e6:10.2f} {t_nb * 1e6:10.2f} {t_np / t_nb:8.1f}x")
    if not args.skip_end_to_end:
        e2e = bench_end_to_end()
        for stage, k in (("fit m=64 K=195", 0), ("solve m=64", 1)):
            t_nb, t_np = e2e["numba"][k], e2e["numpy"][k]
            print(f"{'end-to-end ' + stage:45s} {t_np * 1e6:10.0f} {t_nb * 1e6:10.0f} {t_np / t_nb:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
