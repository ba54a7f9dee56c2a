"""Benchmark the compiled suppression kernel against the pure-Python fallback.

Usage: python3 benchmarks/bench_nms.py [--sizes 100,500,2000] [--repeats 5]

Generates clustered random boxes (so suppression actually happens), checks the
two backends agree on every input, and reports per-call timings.
"""

from __future__ import annotations

import argparse
import random
import statistics
import time

from fullanno import _pykernels

try:
    from fullanno import _speedups
except ImportError:
    _speedups = None


def make_boxes(rng: random.Random, n: int) -> list[list[float]]:
    boxes = []
    for _ in range(n):
        cx = rng.uniform(0, 500)
        cy = rng.uniform(0, 500)
        w = rng.uniform(20, 80)
        h = rng.uniform(20, 80)
        boxes.append([cx + rng.gauss(0, 6), cy + rng.gauss(0, 6), w, h])
    return boxes


def time_backend(fn, boxes, iou_threshold, repeats):
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        kept = fn(boxes, iou_threshold)
        samples.append(time.perf_counter() - start)
    return kept, min(samples), statistics.median(samples)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="100,500,2000,5000")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--iou-threshold", type=float, default=0.75)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    if _speedups is None:
        print("compiled extension not available; benchmarking fallback only")

    rng = random.Random(args.seed)
    header = f"{'n':>6}  {'python (ms)':>12}  {'cython (ms)':>12}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n in (int(s) for s in args.sizes.split(",")):
        boxes = make_boxes(rng, n)
        py_kept, py_best, _ = time_backend(
            _pykernels.suppress, boxes, args.iou_threshold, args.repeats)
        if _speedups is None:
            print(f"{n:>6}  {py_best * 1e3:>12.3f}  {'-':>12}  {'-':>8}")
            continue
        cy_kept, cy_best, _ = time_backend(
            _speedups.suppress, boxes, args.iou_threshold, args.repeats)
        if list(py_kept) != list(cy_kept):
            print(f"BACKEND MISMATCH at n={n}")
            return 1
        print(f"{n:>6}  {py_best * 1e3:>12.3f}  {cy_best * 1e3:>12.3f}  "
              f"{py_best / cy_best:>7.1f}x")
    print("\nbackends agree on all inputs")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
