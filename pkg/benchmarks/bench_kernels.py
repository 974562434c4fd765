"""Compare the compiled kernels with the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time per call for both backends, their ratio, and the
largest absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from sdac._kernels import _pykernels

try:
    from sdac._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    pos = rng.normal(size=100)
    w = rng.dirichlet(np.ones(100))
    T, m = 64, 25
    traj = (rng.normal(size=T), (rng.random(T) < 0.05).astype(float), rng.uniform(0.5, 1.5, T),
            rng.normal(size=(T, 2 * m)), 0.99, 0.97, m)
    pred = np.sort(rng.normal(size=(256, m)), axis=1)
    target = rng.normal(size=(256, 2 * m))
    tw = np.full((256, 2 * m), 1.0 / (2 * m))
    return {
        "project_weighted (100 -> 25 atoms)": ("project_weighted", (pos, w, 25)),
        "td_lambda_targets (64 steps, 50 -> 25 atoms)": ("td_lambda_targets", traj),
        "quantile_loss_grad (256 x 25 vs 50)": ("quantile_loss_grad", (pred, target, tw)),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the pure-Python backend is available")
    print(f"{'kernel':48s} {'python':>12s} {'cython':>12s} {'speedup':>8s} {'max diff':>9s}")
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        fns = {"python": getattr(_pykernels, name)}
        if _ckernels is not None:
            fns["cython"] = getattr(_ckernels, name)
        times = {}
        for backend, fn in fns.items():
            timer = timeit.Timer(lambda fn=fn: fn(*call_args))
            number, _ = timer.autorange()
            times[backend] = np.median(timer.repeat(args.repeat, number)) / number
        if "cython" in times:
            diff = _max_diff(fns["python"](*call_args), fns["cython"](*call_args))
            print(f"{label:48s} {times['python'] * 1e6:10.1f}us {times['cython'] * 1e6:10.1f}us "
                  f"{times['python'] / times['cython']:7.1f}x {diff:9.1e}")
        else:
            print(f"{label:48s} {times['python'] * 1e6:10.1f}us {'-':>12s} {'-':>8s} {'-':>9s}")


if __name__ == "__main__":
    main()
