"""Benchmark the hot kernels under both backends (numba vs pure numpy).

Run without arguments; the script re-executes itself once per backend in a
subprocess, because the backend is fixed at import time.

    python3 bench/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time


def bench_worker(repeat: int) -> dict:
    import numpy as np

    from toyharness import kernels

    rng = np.random.RandomState(0)
    n_stream = 500_000
    uniforms = rng.random_sample(n_stream)
    alternatives = rng.randint(0, 64, n_stream).astype(np.int64)
    logits = rng.standard_normal((4096, 64))
    targets = rng.randint(0, 64, 4096).astype(np.int64)
    positions = np.arange(64 * 128, dtype=np.int64).reshape(64, 128)

    def timeit(fn, *args):
        fn(*args)  # warm up (JIT compile under numba)
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn(*args)
            best = min(best, time.perf_counter() - t0)
        return best

    return {
        "backend": kernels.BACKEND,
        "gen_stream_500k": timeit(kernels.gen_stream, uniforms, alternatives, 0.8, 5, 1, 64),
        "softmax_xent_4096x64": timeit(kernels.softmax_xent, logits, targets),
        "build_mask_64x128": timeit(kernels.build_mask, positions, 64),
    }


def main() -> int:
    if len(sys.argv) > 1 and sys.argv[1] == "--worker":
        print(json.dumps(bench_worker(repeat=20)))
        return 0

    results = []
    for backend in ("numba", "numpy"):
        env = dict(os.environ, TOYHARNESS_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker"],
            env=env, capture_output=True, text=True, check=True,
        )
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    names = [k for k in results[0] if k != "backend"]
    print(f"{'kernel':<24} {'numba (ms)':>12} {'numpy (ms)':>12} {'speedup':>8}")
    for name in names:
        a, b = results[0][name], results[1][name]
        print(f"{name:<24} {a * 1e3:>12.3f} {b * 1e3:>12.3f} {b / a:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
