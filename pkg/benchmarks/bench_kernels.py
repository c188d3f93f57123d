"""Benchmark the compiled kernels against the pure-numpy fallback.

Runs each hot kernel (CTC forward, CTC occupancy, edit-distance counts) on
representative problem sizes in both backends and prints a timing table.
Select the backend per process with CDASR_KERNELS=numpy|numba; this script
re-executes itself once per backend and merges the results.

    python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def make_ctc_problem(rng, frames, vocab, labels):
    logits = rng.normal(size=(frames, vocab))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    seq = rng.integers(0, vocab - 1, size=labels)
    return np.ascontiguousarray(logp), seq.astype(np.int64)


def bench(fn, repeat=5):
    fn()  # warm-up (includes JIT compilation for the numba backend)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_backend():
    from cdasr import kernels

    rng = np.random.default_rng(0)
    results = {"backend": kernels.BACKEND, "timings": {}}

    logp, seq = make_ctc_problem(rng, frames=400, vocab=32, labels=60)
    ext = kernels.extend_with_blanks(seq, blank=31)
    results["timings"]["ctc_forward (T=400, V=32, L=60)"] = bench(
        lambda: kernels.ctc_forward(logp, ext)
    )
    results["timings"]["ctc_occupancy (T=400, V=32, L=60)"] = bench(
        lambda: kernels.ctc_occupancy(logp, ext)
    )

    ref = rng.integers(0, 50, size=500).astype(np.int64)
    hyp = ref.copy()
    hyp[::7] = (hyp[::7] + 1) % 50
    results["timings"]["edit_counts (n=m=500)"] = bench(
        lambda: kernels.edit_counts(ref, hyp)
    )
    print(json.dumps(results))


def main():
    rows = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, CDASR_KERNELS=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--worker"],
            env=env, capture_output=True, text=True, check=True,
        )
        data = json.loads(out.stdout.strip().splitlines()[-1])
        if data["backend"] != backend:
            print(f"note: {backend} backend unavailable, "
                  f"ran as {data['backend']}")
        rows[backend] = data["timings"]

    names = list(rows["numpy"])
    width = max(len(n) for n in names)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for n in names:
        a, b = rows["numpy"][n], rows["numba"][n]
        print(f"{n:<{width}}  {a * 1e3:>8.3f}ms  {b * 1e3:>8.3f}ms  "
              f"{a / b:>7.1f}x")


if __name__ == "__main__":
    if "--worker" in sys.argv:
        run_backend()
    else:
        main()
