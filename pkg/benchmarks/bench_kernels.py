"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 128] [--repeat 20]

Also times one full training step of a small model under each backend by
re-importing the package with ``LMCAT_PURE_PYTHON`` toggled in a subprocess.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lmcat import _kernels_py as ref

try:
    from lmcat import _kernels as compiled
except ImportError:
    compiled = None

STEP_SNIPPET = """
import time, numpy as np
from lmcat.kernels import BACKEND
from lmcat.model import LMCAT, ModelConfig
rng = np.random.default_rng(0)
m = LMCAT(ModelConfig(patch_size=8), seed=0, dtype=np.float32)
sar = rng.uniform(size=(32, 2, 8, 8)).astype(np.float32)
opt = rng.uniform(size=(32, 10, 8, 8)).astype(np.float32)
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter()
    m.zero_grad(); m.encode(sar, opt)[1].backward()
    best = min(best, time.perf_counter() - t)
print(BACKEND, best)
"""


def cases(rows, cols, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, cols)).astype(dtype)
    g = rng.standard_normal((rows, cols)).astype(dtype)
    gamma = rng.standard_normal(cols).astype(dtype)
    beta = rng.standard_normal(cols).astype(dtype)
    y = ref.softmax_rows(x, 0.2)
    _, xhat, rstd = ref.layer_norm_forward(x, gamma, beta, 1e-5)
    return {
        "softmax": lambda k: k.softmax_rows(x, 0.2),
        "softmax_backward": lambda k: k.softmax_rows_backward(y, g, 0.2),
        "log_softmax": lambda k: k.log_softmax_rows(x, 0.2),
        "layer_norm": lambda k: k.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(g, xhat, rstd, gamma),
        "gelu": lambda k: k.gelu_forward(x),
        "gelu_backward": lambda k: k.gelu_backward(x, g),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the fallback is available")
    for dtype in (np.float64, np.float32):
        print(f"\n{np.dtype(dtype).name}, {args.rows} x {args.cols}")
        print(f"{'kernel':<22}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
        for name, fn in cases(args.rows, args.cols, dtype).items():
            t_ref = min(timeit.repeat(lambda: fn(ref), number=1, repeat=args.repeat)) * 1e3
            if compiled is None:
                print(f"{name:<22}{t_ref:>12.3f}{'-':>13}{'-':>9}")
                continue
            t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<22}{t_ref:>12.3f}{t_c:>13.3f}{t_ref / t_c:>8.1f}x")

    print("\nalignment forward+backward, batch 32, 8x8 patches (best of 5)")
    for pure in ("1", "0"):
        env = dict(os.environ, LMCAT_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=5)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]) * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
