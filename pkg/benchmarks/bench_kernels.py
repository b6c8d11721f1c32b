"""Compare the compiled and numpy conv kernels on the shapes the models use.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Also times one image-GAN training iteration and one projection step under
each backend (the backend is chosen at import, so those run in subprocesses).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fedring.kernels import _pykernels

try:
    from fedring.kernels import _ckernels
except ImportError:
    _ckernels = None

# (label, batch, c_in, c_out, size, stride)
CASES = [
    ("perceptual stage 1, batch 1", 1, 1, 8, 16, 1),
    ("perceptual stage 2, batch 32", 32, 8, 16, 16, 2),
    ("classifier conv 1, batch 32", 32, 1, 8, 16, 2),
    ("discriminator conv 2, batch 64", 64, 8, 16, 8, 2),
]

END_TO_END = r"""
import time, numpy as np
from fedring.kernels import BACKEND
from fedring.datagen import make_blobimg
from fedring.pp_gan import GanTrainConfig, train_gan
from fedring.audit import ProjectionConfig, project
x, y = make_blobimg(0, 32)[:2]
train_gan(x, y, GanTrainConfig(phase1_iters=5, phase2_iters=5), seed=0)
t = time.perf_counter(); r = train_gan(x, y, GanTrainConfig(phase1_iters=40, phase2_iters=0), seed=0); a = (time.perf_counter() - t) / 40
t = time.perf_counter(); train_gan(x, y, GanTrainConfig(phase1_iters=0, phase2_iters=20), seed=0); b = (time.perf_counter() - t) / 20
t = time.perf_counter(); project(r.g_spec, r.g_params, x[0], int(y[0]), ProjectionConfig(steps=100, restarts=1)); c = (time.perf_counter() - t) / 101
print(BACKEND, a * 1e3, b * 1e3, c * 1e3)
"""


def time_case(mod, b, cin, cout, size, stride, dtype, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, cin, size, size)).astype(dtype)
    w = rng.standard_normal((cout, cin, 3, 3)).astype(dtype)
    bias = rng.standard_normal(cout).astype(dtype)
    out = mod.conv3x3_forward(x, w, bias, stride)
    g = rng.standard_normal(out.shape).astype(dtype)
    fwd = min(timeit.repeat(lambda: mod.conv3x3_forward(x, w, bias, stride), number=repeat, repeat=3)) / repeat
    bwd = min(timeit.repeat(lambda: mod.conv3x3_backward(x, w, g, stride), number=repeat, repeat=3)) / repeat
    return fwd * 1e6, bwd * 1e6


def end_to_end(pure: bool) -> dict:
    env = dict(os.environ, FEDRING_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    backend, a, b, c = out.stdout.split()
    return {"backend": backend, "gan_iter_phase1_ms": float(a), "gan_iter_phase2_ms": float(b),
            "projection_step_ms": float(c)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", dest="json_path")
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
    rows = []
    print(f"{'case':34s} {'dtype':8s} {'numpy fwd/bwd (us)':>22s} {'cython fwd/bwd (us)':>22s} {'speedup':>8s}")
    for label, *shape in CASES:
        for dtype in (np.float32, np.float64):
            py = time_case(_pykernels, *shape, dtype, args.repeat)
            cy = time_case(_ckernels, *shape, dtype, args.repeat) if _ckernels else (float("nan"),) * 2
            speed = (py[0] + py[1]) / (cy[0] + cy[1])
            rows.append({"case": label, "dtype": np.dtype(dtype).name, "numpy_us": py, "cython_us": cy, "speedup": speed})
            print(f"{label:34s} {np.dtype(dtype).name:8s} {py[0]:10.1f} /{py[1]:10.1f} {cy[0]:10.1f} /{cy[1]:10.1f} {speed:7.2f}x")
    report = {"kernels": rows}
    if not args.skip_end_to_end:
        report["end_to_end"] = [end_to_end(pure=True)] + ([end_to_end(pure=False)] if _ckernels else [])
        for r in report["end_to_end"]:
            print(f"{r['backend']:7s} GAN iter phase1 {r['gan_iter_phase1_ms']:.2f} ms, "
                  f"phase2 {r['gan_iter_phase2_ms']:.2f} ms, projection step {r['projection_step_ms']:.3f} ms")
    if args.json_path:
        with open(args.json_path, "w") as fh:
            json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
