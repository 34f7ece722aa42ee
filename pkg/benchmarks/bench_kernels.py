"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--dtype float32]

Shapes follow the character and tracking networks at batch size 32.
"""
import argparse
import timeit

import numpy as np

from learnet import _pykernels
from learnet._backend import compiled_kernels


def cases(rng, dtype):
    def arr(*shape):
        return rng.standard_normal(shape).astype(dtype)

    x28, k1 = arr(32, 28, 28, 1), arr(5, 5, 1, 16)
    x12, k2 = arr(32, 12, 12, 16), arr(5, 5, 16, 64)
    x64, k3 = arr(32, 64, 64, 1), arr(3, 3, 1, 16)
    d12, dk = arr(32, 12, 12, 64), arr(32, 5, 5, 64)
    p24 = arr(32, 24, 24, 16)
    y, idx = _pykernels.maxpool2(p24)
    return [
        ("conv2d 28x28x1 -> 16, f5", "conv2d", (x28, k1)),
        ("conv2d 12x12x16 -> 64, f5", "conv2d", (x12, k2)),
        ("conv2d_batched 12x12x16 -> 64", "conv2d_batched", (x12, k2)),
        ("conv2d 64x64x1 -> 16, f3", "conv2d", (x64, k3)),
        ("conv2d_grad_kernel 12x12x16, f5", "conv2d_grad_kernel", (x12, arr(32, 8, 8, 64), 5, 5)),
        ("dconv 12x12x64, f5 per sample", "dconv", (d12, dk)),
        ("maxpool2 24x24x16", "maxpool2", (p24,)),
        ("maxpool2_grad 24x24x16", "maxpool2_grad", (y, idx, 24, 24)),
    ]


def best_time(fn, args, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-6)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args(argv)
    if compiled_kernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install --no-build-isolation -e .`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for label, name, call_args in cases(rng, np.dtype(args.dtype)):
        py, cy = getattr(_pykernels, name), getattr(compiled_kernels, name)
        out_py, out_cy = py(*call_args), cy(*call_args)
        if isinstance(out_py, tuple):
            out_py, out_cy = out_py[0], out_cy[0]
        diff = float(np.max(np.abs(out_py.astype(np.float64) - out_cy)))
        t_py, t_cy = best_time(py, call_args, args.repeat), best_time(cy, call_args, args.repeat)
        print(f"{label:<34}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
