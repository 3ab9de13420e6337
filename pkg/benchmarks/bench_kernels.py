"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--shape B C H W]

Prints one row per kernel with the best-of-N time for each backend and the
speedup. Without the built extension only the numpy column is filled.
"""
import argparse
import timeit

import numpy as np

from skynas.tensor import kernels


def cases(shape, rng):
    B, C, H, W = shape
    x = rng.normal(size=shape)
    gy = rng.normal(size=shape)
    w = rng.normal(size=(C, 3, 3))
    gamma, beta = rng.normal(size=C), rng.normal(size=C)
    _, idx = kernels.python_backend.maxpool2_forward(x)
    gp = rng.normal(size=(B, C, H // 2, W // 2))
    _, xhat, _, _, inv = kernels.python_backend.bn_train_forward(x, gamma, beta, 1e-5)

    return {
        "dwconv3_forward": lambda k: (lambda: k.dwconv3_forward(x, w)),
        "dwconv3_backward_input": lambda k: (lambda: k.dwconv3_backward_input(gy, w)),
        "dwconv3_backward_weight": lambda k: (lambda: k.dwconv3_backward_weight(x, gy)),
        "maxpool2_forward": lambda k: (lambda: k.maxpool2_forward(x)),
        "maxpool2_backward": lambda k: (lambda: k.maxpool2_backward(gp, idx)),
        "bn_train_forward": lambda k: (lambda: k.bn_train_forward(x, gamma, beta, 1e-5)),
        "bn_train_backward": lambda k: (lambda: k.bn_train_backward(gy, xhat, gamma, inv)),
        "relu6_backward": lambda k: (lambda: k.relu6_backward(3 * x, gy)),
    }


def best(fn, repeat):
    fn()
    n = max(1, int(0.05 / max(1e-6, min(timeit.repeat(fn, number=1, repeat=3)))))
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--shape", type=int, nargs=4, default=(16, 48, 80, 160), metavar=("B", "C", "H", "W"))
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("numpy", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))
    print(f"shape {tuple(args.shape)}, best of {args.repeat}; active backend: {kernels.BACKEND}")
    print(f"{'kernel':<26}" + "".join(f"{name + ' ms':>12}" for name, _ in backends) + f"{'speedup':>10}")
    for name, make in cases(tuple(args.shape), rng).items():
        times = [best(make(k), args.repeat) for _, k in backends]
        speed = f"{times[0] / times[1]:>9.2f}x" if len(times) > 1 else f"{'-':>10}"
        print(f"{name:<26}" + "".join(f"{t * 1e3:>12.3f}" for t in times) + speed)


if __name__ == "__main__":
    main()
