"""Compiled vs pure-numpy batched matmul, plus one training step per backend.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--skip-train]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from neuron_alloc import kernels

# (batch*heads, rows, inner, cols) typical of desk-scale attention and projections
SHAPES = [
    (32, 12, 16, 12),
    (32, 12, 12, 16),
    (1, 384, 64, 128),
    (1, 384, 128, 64),
    (1, 384, 64, 40),
]

STEP_SNIPPET = """
import time
from neuron_alloc.data import SyntheticTaskSpec, synthetic_corpora
from neuron_alloc.model import ModelConfig, build_model
from neuron_alloc.pipeline import TrainSchedule, pretrain, split
from neuron_alloc.kernels import BACKEND
vocab, corpora = synthetic_corpora(SyntheticTaskSpec(sizes=(("train", 300), ("dev", 10), ("test", 10))))
model = build_model(ModelConfig(vocab_size=len(vocab), language_pairs=tuple(sorted(corpora))), 0)
pretrain(model, split(corpora, "train"), TrainSchedule(total_steps=3, warmup_steps=10))
t = time.perf_counter()
pretrain(model, split(corpora, "train"), TrainSchedule(total_steps={steps}, warmup_steps=10))
print(BACKEND, (time.perf_counter() - t) / {steps})
"""


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_bmm(repeats: int) -> None:
    if kernels.BACKEND != "compiled":
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':<24}{'compiled ms':>13}{'python ms':>12}{'speedup':>10}  identical")
    for p, n, k, m in SHAPES:
        a = rng.standard_normal((p, n, k)).astype(np.float32)
        b = rng.standard_normal((p, k, m)).astype(np.float32)
        slow = best_of(lambda: kernels.bmm_python(a, b), repeats)
        if kernels.BACKEND == "compiled":
            fast = best_of(lambda: kernels.bmm_compiled(a, b), repeats)
            same = kernels.bmm_compiled(a, b).tobytes() == kernels.bmm_python(a, b).tobytes()
            print(f"{str((p, n, k, m)):<24}{fast * 1e3:>13.3f}{slow * 1e3:>12.3f}{slow / fast:>10.2f}  {same}")
        else:
            print(f"{str((p, n, k, m)):<24}{'-':>13}{slow * 1e3:>12.3f}{'-':>10}  -")


def bench_training(steps: int) -> None:
    print(f"\nseconds per training step (default model, {steps} steps)")
    for pure in ("0", "1"):
        env = dict(os.environ, NEURON_ALLOC_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<10}{float(seconds):.4f}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--steps", type=int, default=20)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args()
    bench_bmm(args.repeats)
    if not args.skip_train:
        bench_training(args.steps)


if __name__ == "__main__":
    main()
