"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from rin import kernels
from rin.config import parse_config
from rin.diffusion import SIGMOID, train_loss
from rin.model import RIN
from rin.rng import generator
from rin.tensor import backward

SHAPES = [(256, 32), (1030, 128), (4096, 256)]

TINY = """model.input_shape=16,16,3
model.patch_size=2
model.num_blocks=2
model.layers_per_block=2
model.num_latents=16
model.latent_dim=64
model.interface_dim=64
model.heads=4
"""


def kernel_cases(rows, cols, dtype):
    r = np.random.default_rng(0)
    x = r.standard_normal((rows, cols)).astype(dtype)
    dy = r.standard_normal((rows, cols)).astype(dtype)
    scale = np.ones(cols, dtype)
    bias = np.zeros(cols, dtype)
    _, xhat, rstd = kernels.layer_norm_forward(x, scale, bias, 1e-6)
    y = kernels.softmax_forward(x)
    return {
        "layer_norm fwd": lambda: kernels.layer_norm_forward(x, scale, bias, 1e-6),
        "layer_norm bwd": lambda: kernels.layer_norm_backward(dy, xhat, rstd, scale),
        "gelu fwd": lambda: kernels.gelu_forward(x),
        "gelu bwd": lambda: kernels.gelu_backward(x, dy),
        "softmax fwd": lambda: kernels.softmax_forward(x),
        "softmax bwd": lambda: kernels.softmax_backward(y, dy),
    }


def train_step_case():
    cfg = parse_config(TINY)
    model = RIN(cfg.model)
    x0 = np.random.default_rng(0).uniform(-1, 1, (16,) + cfg.model.input_shape)

    def step():
        backward(train_loss(model, x0, None, SIGMOID, 0.9, generator(0, 1, 0)))
    return step


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    print(f"{'case':<34}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for dtype in (np.float32, np.float64):
        for rows, cols in SHAPES:
            names = kernel_cases(rows, cols, dtype)
            for name in names:
                times = {}
                for b in backends:
                    with kernels.use_backend(b):
                        fn = kernel_cases(rows, cols, dtype)[name]
                        times[b] = best_of(fn, args.repeat)
                label = f"{name} {rows}x{cols} {np.dtype(dtype).name}"
                speed = times["python"] / times["cython"] if "cython" in times else float("nan")
                print(f"{label:<34}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
                      + f"{speed:>9.2f}x")
    times = {}
    for b in backends:
        with kernels.use_backend(b):
            times[b] = best_of(train_step_case(), max(args.repeat // 4, 3))
    speed = times["python"] / times["cython"] if "cython" in times else float("nan")
    print(f"{'train step (16x16x3, batch 16)':<34}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
          + f"{speed:>9.2f}x")


if __name__ == "__main__":
    main()
