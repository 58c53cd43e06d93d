"""Compare the compiled and pure-Python pendulum kernels.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 10]``.
Prints per-call times for both backends and their ratio, and checks that the
two agree to rounding.
"""

import argparse
import timeit

import numpy as np

from dsqp_rti.kernels import get_backend
from dsqp_rti.pendulum import PendulumChainParams

PARAMS = PendulumChainParams().kernel_params


def _cases(batch, rng):
    X = rng.normal(size=(batch, 4))
    P = rng.normal(size=(batch, 3))
    NU = rng.normal(size=(batch, 4))
    x, u = X[0], float(P[0, 0])
    return {
        "pendulum_rhs": lambda k: k.pendulum_rhs(x, u, 0.3, -0.2, True, True, PARAMS),
        "rk4_frozen": lambda k: k.rk4_frozen(x, u, 0.3, -0.2, True, True, 0.04, PARAMS),
        f"rk4_frozen_batch[{batch}]": lambda k: k.rk4_frozen_batch(X, P, True, True, 0.04, PARAMS),
        f"rk4_frozen_batch+hess[{batch}]": lambda k: k.rk4_frozen_batch(X, P, True, True, 0.04, PARAMS, NU),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b) if x is not None)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    ap.add_argument("--batch", type=int, default=10, help="shooting intervals per batched call")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    py = get_backend("python")
    try:
        cc = get_backend("compiled")
    except ImportError:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace` first")
        cc = None
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'python [us]':>12s} {'compiled [us]':>14s} {'speedup':>8s} {'max diff':>10s}")
    for name, call in _cases(args.batch, rng).items():
        t_py = min(timeit.repeat(lambda: call(py), number=args.number, repeat=args.repeat)) / args.number
        if cc is None:
            print(f"{name:32s} {t_py * 1e6:12.2f}")
            continue
        t_cc = min(timeit.repeat(lambda: call(cc), number=args.number, repeat=args.repeat)) / args.number
        diff = _max_diff(call(py), call(cc))
        print(f"{name:32s} {t_py * 1e6:12.2f} {t_cc * 1e6:14.2f} {t_py / t_cc:8.1f} {diff:10.1e}")


if __name__ == "__main__":
    main()
