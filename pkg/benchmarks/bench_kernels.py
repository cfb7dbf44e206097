"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Kernel rows time each backend directly. The forward row runs a 64-token
canonical forward pass in a subprocess per backend (the backend is fixed at
import, so ``INTACTLAB_PURE=1`` selects the fallback).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from intactlab import _fallback

try:
    from intactlab import _kernels
except ImportError:
    _kernels = None

FORWARD_SNIPPET = """
import timeit
from intactlab import kernels, recipes
from intactlab.model import forward
w = recipes.canonical_model()
toks = list(range(64))
forward(w, toks)
print(kernels.BACKEND, min(timeit.repeat(lambda: forward(w, toks), number=1, repeat={repeat})))
"""


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    a, b = rng.standard_normal((48, 64)), rng.standard_normal((64, 172))
    w = rng.standard_normal((172, 64))
    kv = rng.standard_normal((64, 16))
    yield "matmul 48x64 @ 64x172", lambda m: m.matmul(a, b)
    yield "quantize 172x64 b3 g16", lambda m: m.quantize_groups(w, 3, 16, False)
    yield "quantize kv 64x16 b4 per-row", lambda m: m.quantize_groups(kv, 4, 16, False)
    codes, scales, zeros = _fallback.quantize_groups(w, 3, 16, False)
    yield "dequantize 172x64 g16", lambda m: m.dequantize_groups(codes, scales, zeros, 16)


def forward_time(pure, repeat):
    env = dict(os.environ)
    env.pop("INTACTLAB_PURE", None)
    if pure:
        env["INTACTLAB_PURE"] = "1"
    out = subprocess.run([sys.executable, "-c", FORWARD_SNIPPET.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'case':34s} {'cython (us)':>12s} {'numpy (us)':>12s} {'speedup':>8s}")
    for name, call in kernel_cases(rng):
        t_np = best(lambda: call(_fallback), args.repeat) * 1e6
        if _kernels is None:
            print(f"{name:34s} {'n/a':>12s} {t_np:12.1f} {'':>8s}")
            continue
        t_cy = best(lambda: call(_kernels), args.repeat) * 1e6
        print(f"{name:34s} {t_cy:12.1f} {t_np:12.1f} {t_np / t_cy:7.2f}x")
    backend, t_fast = forward_time(False, max(3, args.repeat // 4))
    _, t_pure = forward_time(True, max(3, args.repeat // 4))
    print(f"{'forward, 64 tokens (' + backend + ')':34s} {t_fast * 1e3:10.2f}ms {t_pure * 1e3:10.2f}ms "
          f"{t_pure / t_fast:7.2f}x")


if __name__ == "__main__":
    main()
