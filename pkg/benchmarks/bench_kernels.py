"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--patch 32] [--json out.json]

Each kernel runs on inputs sized like one training step (B=4 patch pairs,
64 bands, 32-dim embeddings). A full ``train_step`` is timed per backend by
swapping the functions that ``dgc.kernels`` exports.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import platform
import sys
import timeit

import numpy as np

from dgc import kernels
from dgc.data_io import HsiCube
from dgc.trainer import TrainConfig, init_state, sample_batch, train_step


@contextlib.contextmanager
def use_backend(impl):
    saved = {name: getattr(kernels, name) for name in kernels._NAMES}
    try:
        for name in kernels._NAMES:
            setattr(kernels, name, getattr(impl, name))
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def kernel_cases(patch: int, rng: np.random.Generator):
    n_img = 8  # two crops per pair
    n_pix = n_img * patch * patch
    h1 = rng.random((n_pix, 64, 1), dtype=np.float32)
    h2 = rng.random((n_pix, 30, 32), dtype=np.float32)
    x2 = rng.random((n_img, patch, patch, 32), dtype=np.float32)
    d2 = rng.random((n_pix, 9 * 32), dtype=np.float32)
    z = rng.standard_normal((patch * patch, 32)).astype(np.float32)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    m = rng.standard_normal((patch * patch, patch * patch)).astype(np.float32)
    dr = rng.standard_normal(patch * patch).astype(np.float32)
    k = 4
    p = rng.random((n_pix, k))
    order = np.argsort(-p.ravel(), kind="stable").astype(np.int64)
    d1 = rng.random((n_pix * 14, 9 * 32), dtype=np.float32)
    return {
        "conv1d_cols": lambda b: b.conv1d_cols(h1, 9, 2),
        "conv1d_cols (32 ch)": lambda b: b.conv1d_cols(h2, 9, 2),
        "conv1d_col2im": lambda b: b.conv1d_col2im(d1, n_pix, 36, 9, 2),
        "conv2d_cols": lambda b: b.conv2d_cols(x2),
        "conv2d_col2im": lambda b: b.conv2d_col2im(d2, n_img, patch, patch),
        "gaussian_affinity": lambda b: b.gaussian_affinity(z, 2.0),
        "affinity_grad": lambda b: b.affinity_grad(m.copy(), m, dr, 2.0),
        "balanced_assign": lambda b: b.balanced_assign(order, n_pix, k),
    }


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1000:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--patch", type=int, default=32, help="training patch side")
    ap.add_argument("--steps", type=int, default=3, help="train steps timed per backend")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    impls = kernels.implementations()
    if "compiled" not in impls:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    rng = np.random.default_rng(0)
    results: dict[str, dict[str, float]] = {}
    for name, case in kernel_cases(args.patch, rng).items():
        results[name] = {b: best_of(lambda: case(impl), args.repeat) for b, impl in impls.items()}

    cfg = TrainConfig(k=4, patch_size=args.patch, batch=4, bands=64, strides=(2, 2, 1))
    cube = HsiCube(rng.random((64, 96, 96), dtype=np.float32))
    state = init_state(cfg)
    pairs = sample_batch(cube, cfg, 1)
    step = {}
    for b, impl in impls.items():
        with use_backend(impl):
            train_step(state, pairs)  # warm-up
            step[b] = min(timeit.repeat(lambda: train_step(state, pairs), number=1, repeat=args.steps))
    results[f"train_step (P={args.patch})"] = step

    names = list(impls)
    print(f"{'kernel':<26}" + "".join(f"{n + ' ms':>14}" for n in names)
          + ("     speedup" if len(names) == 2 else ""))
    for name, times in results.items():
        row = f"{name:<26}" + "".join(f"{times[n] * 1e3:>14.3f}" for n in names)
        if len(names) == 2:
            row += f"{times['python'] / times['compiled']:>11.2f}x"
        print(row)
    if args.json:
        meta = {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()}
        with open(args.json, "w") as fh:
            json.dump({"meta": meta, "seconds": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
