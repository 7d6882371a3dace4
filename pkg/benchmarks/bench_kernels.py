"""Compare the compiled and numpy kernel backends on the shapes the model uses.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from paad import kernels
from paad.fieldsim import WorldConfig, generate_world, lidar_angles


def cases():
    rng = np.random.default_rng(0)
    img = rng.random((32, 1, 60, 80)).astype(np.float32)
    cols = np.ascontiguousarray(kernels.backend_module("numpy").im2col(img, 3, 2, 1))
    act = rng.random((32, 8, 30, 40)).astype(np.float32)
    pooled, arg = kernels.backend_module("numpy").maxpool2(act)
    world = generate_world(WorldConfig(seed=0))
    ang = lidar_angles()
    return {
        "im2col 32x1x60x80": lambda m: m.im2col(img, 3, 2, 1),
        "col2im 32x1x60x80": lambda m: m.col2im(cols, img.shape, 3, 2, 1),
        "maxpool2 32x8x30x40": lambda m: m.maxpool2(act),
        "maxpool2_backward": lambda m: m.maxpool2_backward(pooled, arg, act.shape),
        "ray_cast 1081 beams": lambda m: kernels.ray_cast(0.0, 0.0, ang, world.circles, 10.0, impl=m),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        backends = {"cython": kernels.backend_module("cython")}
    except ImportError:
        backends = {}
        print("compiled extension not built; timing numpy only")
    backends["numpy"] = kernels.backend_module("numpy")
    print(f"{'kernel':24s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}")
    for name, fn in cases().items():
        ms = {}
        for b, mod in backends.items():
            n = 20
            ms[b] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n * 1e3
        speed = f"{ms['numpy'] / ms['cython']:9.1f}x" if "cython" in ms else ""
        print(f"{name:24s}" + "".join(f"{ms[b]:10.3f}ms" for b in backends) + f"{speed:>10s}")


if __name__ == "__main__":
    main()
