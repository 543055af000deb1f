"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Kernel timings call both backends in-process. The end-to-end figure runs
one training step (forward + backward, depth-3 net, 4x1x64x64 batch) in a
subprocess per backend, since the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmisnet import kernels
from mmisnet.tensor import _taps, gaussian_weights

STEP_SNIPPET = """
import time, numpy as np
from mmisnet import kernels
from mmisnet.network import NetworkConfig, init_parameters
from mmisnet.train import loss_and_grads
from mmisnet.loss import LossConfig
rng = np.random.default_rng(0)
ck = init_parameters(NetworkConfig(num_classes=4), 0)
x = rng.normal(size=(4, 1, 64, 64))
y = (rng.random((4, 4, 64, 64)) < 0.3).astype(float)
m = np.ones((4, 4), bool)
loss_and_grads(ck, x, y, m, LossConfig())
best = float('inf')
for _ in range({repeat}):
    t = time.perf_counter()
    loss_and_grads(ck, x, y, m, LossConfig())
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def cases(rng):
    x4 = rng.normal(size=(4, 16, 64, 64))
    x3 = x4.reshape(-1, 64, 64)
    w = gaussian_weights(2.0)
    taps = _taps(2.0, 64)
    stack = np.ascontiguousarray(rng.normal(size=(3, x4.size)))
    cols = None

    def im2col(k):
        return k.im2col(x4, 3, 3, 1, 1)

    def col2im(k):
        nonlocal cols
        if cols is None:
            cols = kernels.im2col(x4, 3, 3, 1, 1)
        return k.col2im(cols, 16, 64, 64, 3, 3, 1, 1)

    return {
        "im2col 4x16x64x64 k3": im2col,
        "col2im 4x16x64x64 k3": col2im,
        "maxpool2x2 fwd": lambda k: k.maxpool2x2_forward(x4),
        "select_similar (select one)": lambda k: k.select_similar(stack, False),
        "select_similar (closest pair)": lambda k: k.select_similar(stack, True),
        "blur rows sigma=2": lambda k: k.blur_last(x3, taps, w),
        "blur cols sigma=2": lambda k: k.blur_mid(x3, taps, w),
        "blur rows backward": lambda k: k.blur_last_backward(x3, taps, w),
        "blur cols backward": lambda k: k.blur_mid_backward(x3, taps, w),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    found = kernels.backends()
    names = sorted(found)
    print(f"backends: {', '.join(names)}")
    print(f"{'kernel':<32}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        row = []
        for n in names:
            row.append(min(timeit.repeat(lambda: fn(found[n]), number=1, repeat=args.repeat)))
        line = f"{label:<32}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row)
        if len(row) == 2:
            line += f"{row[1] / row[0]:>11.1f}x"  # python / cython
        print(line)

    if args.end_to_end:
        print("\ntraining step, depth 3, batch 4x1x64x64, 4 classes (best of %d)" % args.repeat)
        for force in ("0", "1"):
            env = dict(os.environ, MMISNET_PURE_PYTHON=force)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=args.repeat)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()
            print(f"  {out[0]:<8} {float(out[1]):.3f} s")


if __name__ == "__main__":
    main()
