"""Timing of the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (numba compiles on first call), then
timed ``--repeat`` times; the best time is reported together with the speedup and a
check that both backends return the same numbers.
"""
import argparse
import time

import numpy as np

from bulkdiff._accel import HAVE_NUMBA, backend_as
from bulkdiff.core import CoefficientModel, Domain, sample_poisson
from bulkdiff.functionals import FeatureBasis
from bulkdiff.kernels.chain import run_sweeps


def _best(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t)
    return min(ts), out


def coefficient_case():
    dom = Domain.torus(81.0, 1)
    mu = sample_poisson(dom, 1.0, 1)
    model = CoefficientModel("smooth-count", 2.0, width=0.4)
    X = np.linspace(-40, 40, 4000).reshape(-1, 1)
    return "coefficient field (81 particles, 4000 points)", lambda: model.field(mu.points, X, dom.side)


def feature_case():
    U = Domain.cube(2, 1)
    B = FeatureBasis(U)
    pts = sample_poisson(Domain(1, "box", 9.0), 1.0, 2).points
    return f"feature values+gradients (cube side 9, nf={B.nf})", lambda: B.features(pts)


def chain_case():
    dom = Domain.torus(27.0, 1)
    model = CoefficientModel("count-indicator", 2.0)
    mu = sample_poisson(dom, 1.0, 3)
    g = np.random.default_rng(4)
    k, n = 200, mu.n
    order = g.permuted(np.tile(np.arange(n, dtype=np.int64), (k, 1)), axis=1)
    z, u = g.standard_normal((k, n, 1)), g.random((k, n))

    def run():
        pts = np.array(mu.points)
        acc = run_sweeps(pts, dom.side, model.code, model.params, 0.05, True, order, z, u)
        return pts, acc
    return f"Metropolis sweeps ({k} sweeps, {n} particles)", run


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-10)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
    print(f"{'kernel':55s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}  agree")
    for case in (coefficient_case, feature_case, chain_case):
        name, fn = case()
        with backend_as("numpy"):
            t_np, out_np = _best(fn, args.repeat)
        if HAVE_NUMBA:
            with backend_as("numba"):
                t_nb, out_nb = _best(fn, args.repeat)
            print(f"{name:55s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:8.1f}  {_same(out_np, out_nb)}")
        else:
            print(f"{name:55s} {1e3 * t_np:11.2f} {'-':>11s} {'-':>8s}  -")


if __name__ == "__main__":
    main()
