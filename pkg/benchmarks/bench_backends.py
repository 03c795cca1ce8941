"""Benchmark the compiled kernel core against the numpy fallback.

Two views:
  * per-kernel microbenchmarks at the shapes the trainer actually hits,
    comparing the RAW implementations (everest._ckernels vs
    everest._kernels_py). This is the measurement behind the compiled
    backend's kernel table: fused single-pass C wins where numpy chains
    temporaries (layer norm, gelu), numpy wins where its SIMD exp or
    memory-bound array ops dominate (softmax, adamw) - so the 'c' backend
    adopts only the winners.
  * one full pre-training step, end to end, under each backend.

Dense matmuls go through BLAS in both backends by design, so the end-to-end
delta is bounded by the share of step time spent in the fused kernels.

Run: python benchmarks/bench_backends.py [--steps 30]
"""

import argparse
import time

import numpy as np

from everest import _kernels_py as pyk
from everest import backend

try:
    from everest import _ckernels as ck
except ImportError:
    ck = None


def best_of(fn, repeats=7, inner=20):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def kernel_cases(impl):
    rng = np.random.default_rng(0)
    rows, d = 8 * 51, 96  # a batch of encoder sequences at desk scale
    x = rng.standard_normal((rows, d)).astype(np.float32)
    g = rng.standard_normal((rows, d)).astype(np.float32)
    gamma = np.ones(d, dtype=np.float32)
    beta = np.zeros(d, dtype=np.float32)
    scores = rng.standard_normal((8 * 4 * 51, 51)).astype(np.float32)
    flat = rng.standard_normal(8 * 51 * 384).astype(np.float32)
    gflat = rng.standard_normal(flat.size).astype(np.float32)
    p = rng.standard_normal(500_000).astype(np.float32)
    pg = rng.standard_normal(p.size).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    _, mean, rstd = impl.layer_norm_fwd(x, gamma, beta, 1e-6)
    return [
        ("layer_norm_fwd (408x96)", lambda: impl.layer_norm_fwd(x, gamma, beta, 1e-6)),
        ("layer_norm_bwd (408x96)", lambda: impl.layer_norm_bwd(g, x, gamma, mean, rstd)),
        ("softmax_fwd (1632x51)", lambda: impl.softmax_fwd(scores)),
        ("gelu_fwd (156k)", lambda: impl.gelu_fwd(flat)),
        ("gelu_bwd (156k)", lambda: impl.gelu_bwd(gflat, flat)),
        ("adamw_update (500k)", lambda: impl.adamw_update(p, pg, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.05, 1)),
    ]


def bench_kernels():
    impls = [("c", ck), ("python", pyk)] if ck is not None else [("python", pyk)]
    named = {name: kernel_cases(impl) for name, impl in impls}
    adopted = set(backend._C_PREFERRED)
    header = f"{'kernel':<26}" + "".join(f"{n + ' (us)':>14}" for n, _ in impls)
    if len(impls) == 2:
        header += f"{'c/py':>8}  c-backend"
    print(header)
    for idx, (kname, _) in enumerate(named[impls[0][0]]):
        times = [best_of(named[n][idx][1]) * 1e6 for n, _ in impls]
        row = f"{kname:<26}" + "".join(f"{t:14.1f}" for t in times)
        if len(times) == 2:
            stem = kname.split(" ")[0]
            row += f"{times[0] / times[1]:7.2f}x  {'compiled' if stem in adopted else 'numpy'}"
        print(row)


def bench_end_to_end(steps, tmp):
    from everest import train
    from everest.config import RunConfig
    from everest.video import gen_motion_class_dataset

    manifest = gen_motion_class_dataset(16, tmp, seed=3, frames=16, height=32, width=32)
    cfg = RunConfig(total_steps=steps, warmup_steps=5, batch_size=8, seed=0, alpha=1.0,
                    train_manifest="in-memory").validate()
    print(f"\nfull pre-training step (32x32, batch 8, {steps} steps):")
    times = {}
    for b in backend.available():
        backend.use(b)
        train.pretrain(manifest, cfg)  # warm the clip cache and allocator
        t0 = time.perf_counter()
        train.pretrain(manifest, cfg)
        times[b] = (time.perf_counter() - t0) / steps
        print(f"  {b:<8} {times[b] * 1e3:8.1f} ms/step")
    if len(times) == 2:
        print(f"  compiled-backend speedup: {times['python'] / times['c']:.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--workdir", default="/tmp/everest_bench")
    args = ap.parse_args()
    if ck is None:
        print("compiled kernels not built; benchmarking the numpy fallback alone")
    print(f"backends available: {list(backend.available())}\n")
    bench_kernels()
    bench_end_to_end(args.steps, args.workdir)


if __name__ == "__main__":
    main()
