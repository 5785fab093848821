"""Time the compiled kernels against the numpy reference.

    python benchmarks/bench_kernels.py [--dims 32] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from voxatlas import _warp_py

try:
    from voxatlas import _warp_c
except ImportError:  # extension not built
    _warp_c = None


def cases(dims, rng):
    vol = rng.random((2,) + dims)
    theta = np.eye(3).reshape(-1).tolist() + [0.5, -0.3, 0.2]
    theta = np.array(theta) + rng.normal(0, 0.02, 12)
    phi = rng.normal(0, 0.5, (10, 10, 10, 3))
    up = rng.normal(size=(2,) + dims)
    x = rng.random(int(np.prod(dims)))
    g = np.clip(x + rng.normal(0, 0.1, x.size), 0, 1)
    dh = rng.normal(size=(32, 32))
    return {
        "warp_forward": lambda m: m.warp_forward(vol, theta, phi, dims, False),
        "warp_forward_nearest": lambda m: m.warp_forward(vol[0], theta, phi, dims, True),
        "warp_vjp": lambda m: m.warp_vjp(vol, theta, phi, dims, up),
        "joint_hist": lambda m: m.joint_hist(x, g, 32),
        "joint_hist_vjp": lambda m: m.joint_hist_vjp(x, g, dh, 32),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    dims = (args.dims,) * 3
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases(dims, rng).items():
        py = min(timeit.repeat(lambda: fn(_warp_py), number=1, repeat=args.repeat)) * 1e3
        if _warp_c is None:
            print(f"{name:<22}{py:>10.2f}{'-':>11}{'-':>9}")
            continue
        c = min(timeit.repeat(lambda: fn(_warp_c), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{py:>10.2f}{c:>11.2f}{py / c:>8.1f}x")


if __name__ == "__main__":
    main()
