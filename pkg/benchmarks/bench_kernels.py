#!/usr/bin/env python3
"""Time each raster kernel with numba and with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--size S] [--masks M]

Outputs are checked for equality before timing; compilation happens in a
warm-up call and is reported separately.
"""
import argparse
import json
import time
import timeit

import numpy as np

from promptseg.kernels import IMPLEMENTATIONS


def make_inputs(size, n_masks, seed=0):
    rng = np.random.default_rng(seed)
    stack = np.zeros((n_masks, size * size), dtype=bool)
    for i in range(n_masks):
        r = np.zeros((size, size), dtype=bool)
        w, h = rng.integers(size // 8, size // 2, size=2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        r[y:y + h, x:x + w] = True
        stack[i] = r.ravel(order="F")
    flat = stack[0]
    counts = IMPLEMENTATIONS["rle_encode_flat"][0](flat)
    rank = rng.permutation(n_masks).astype(np.int64)
    rgb = rng.integers(0, 256, (size * size, 3)).astype(np.float64)
    colours = rng.integers(0, 256, (9, 3)).astype(np.float64)
    return {
        "rle_encode_flat": (flat,),
        "rle_decode_flat": (counts, flat.shape[0]),
        "pairwise_intersections": (stack,),
        "assign_owners": (stack, rank),
        "nearest_colour_counts": (rgb, colours),
    }


def bench(repeat, size, n_masks):
    inputs = make_inputs(size, n_masks)
    rows = []
    for name, (np_fn, nb_fn) in IMPLEMENTATIONS.items():
        args = inputs[name]
        t0 = time.perf_counter()
        expected = nb_fn(*args)
        compile_s = time.perf_counter() - t0
        if not np.array_equal(np.asarray(expected), np.asarray(np_fn(*args))):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*args), number=1, repeat=repeat))
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb,
                     "speedup": t_np / t_nb if t_nb > 0 else float("inf"), "first_call_s": compile_s})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=448, help="raster side in pixels")
    ap.add_argument("--masks", type=int, default=30, help="masks in the stack")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args()
    rows = bench(args.repeat, args.size, args.masks)
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'1st call s':>12}")
    for r in rows:
        print(f"{r['kernel']:<24}{r['numpy_ms']:>10.3f}{r['numba_ms']:>10.3f}{r['speedup']:>8.1f}x"
              f"{r['first_call_s']:>12.3f}")


if __name__ == "__main__":
    main()
