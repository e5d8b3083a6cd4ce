"""Numba vs numpy timing for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Each kernel is called once per backend before timing so JIT compilation is
excluded.  Outputs of the two paths are compared as a sanity check.
"""
import argparse
import json
import time

import numpy as np

from rnavelo import _accel
from rnavelo.dynamics import GeneKinetics, curve
from rnavelo.hitting import HittingProblem, solve_hitting
from rnavelo.inference import gauss_newton, project_times
from rnavelo.kernelwalk import KernelSpec, SweepConfig, apply_walk, sweep_samples, transition_matrix
from rnavelo.synth import TAU_FACTOR


def best_of(fn, repeat):
    out = fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases():
    X, V = sweep_samples(SweepConfig(n=2000), 2000, 0)
    F = np.column_stack([X[:, 0] ** 2, np.sin(X[:, 1])])
    spec = KernelSpec(0.02, include_diagonal=False)
    yield "kernel_apply n=2000", lambda b: apply_walk(X, V, F, spec, backend=b)

    P = transition_matrix(*sweep_samples(SweepConfig(n=400), 400, 1), KernelSpec(0.5))
    target = np.arange(10)
    prob = HittingProblem(P, target, max_iters=20_000, tol=1e-10)
    yield "hitting_iteration n=400", lambda b: solve_hitting(prob, backend=b).k

    k = GeneKinetics(alpha_on=25.0, beta=1.0, gamma=2.0)
    rng = np.random.default_rng(0)
    t = rng.uniform(0, TAU_FACTOR, 2000)
    cu, cs = curve(t, 25.0, 1.0, 2.0)
    u = cu + rng.normal(0, 0.3, t.size)
    s = cs + rng.normal(0, 0.3, t.size)
    yield "projection 2000 cells", lambda b: project_times(u, s, k, 0.0, 2 * TAU_FACTOR, 64, backend=b)[0]
    yield "gauss_newton 2000 cells", lambda b: np.array(
        gauss_newton(u, s, t, 20.0, 1.5, 1.0, np.inf, backend=b)[:3])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba not installed; only the numpy path is timed")
    rows = []
    print(f"{'kernel':28s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for name, fn in cases():
        t_np, out_np = best_of(lambda: fn("numpy"), args.repeat)
        if _accel.HAVE_NUMBA:
            t_nb, out_nb = best_of(lambda: fn("numba"), args.repeat)
            a, b = np.asarray(out_np, float), np.asarray(out_nb, float)
            fin = np.isfinite(a) & np.isfinite(b)
            diff = float(np.max(np.abs(a[fin] - b[fin]))) if fin.any() else 0.0
        else:
            t_nb, diff = float("nan"), float("nan")
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb,
                     "max_abs_diff": diff})
        print(f"{name:28s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} {diff:10.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
