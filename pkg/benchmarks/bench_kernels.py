"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --pixels 2000000 --repeat 5
"""

import argparse
import json
import time

import numpy as np

from relictnet import kernels


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n_pixels, k, scene, seed=0):
    rng = np.random.default_rng(seed)
    X = np.ascontiguousarray(rng.normal(size=(n_pixels, 4)) * 200 + 1500)
    C = np.ascontiguousarray(X[rng.choice(n_pixels, k, replace=False)])
    labels = rng.integers(0, k, n_pixels).astype(np.int64)
    pred = (rng.random((scene, scene)) < 0.3).astype(np.uint8)
    truth = (rng.random((scene, scene)) < 0.3).astype(np.uint8)
    valid = np.ones((scene, scene), np.uint8)
    grid_labels = rng.integers(0, k, (scene, scene)).astype(np.int64)
    tiles = -(-scene // 32)
    return {
        "nearest_centroid": lambda m: m.nearest_centroid(X, C),
        "cluster_sums": lambda m: m.cluster_sums(X, labels, k),
        "confusion_counts": lambda m: m.confusion_counts(pred, truth, valid),
        "tile_positive_counts": lambda m: m.tile_positive_counts(pred, 32, tiles, tiles),
        "tile_modal_labels": lambda m: m.tile_modal_labels(grid_labels, valid, 32, tiles, tiles, k),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pixels", type=int, default=1_000_000, help="pixels for the k-means kernels")
    ap.add_argument("-k", type=int, default=12)
    ap.add_argument("--scene", type=int, default=2048, help="side of the square scene for map kernels")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print one JSON document instead of a table")
    args = ap.parse_args()

    impls = kernels.backends()
    if "compiled" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    results = {}
    for name, fn in cases(args.pixels, args.k, args.scene).items():
        results[name] = {b: _best(lambda: fn(mod), args.repeat) for b, mod in impls.items()}

    if args.json:
        print(json.dumps({"args": vars(args), "seconds": results}, indent=2))
        return
    print(f"{'kernel':<22}{'python (s)':>12}{'compiled (s)':>14}{'speedup':>10}")
    for name, t in results.items():
        py, cc = t["python"], t.get("compiled")
        row = f"{name:<22}{py:>12.4f}"
        row += f"{cc:>14.4f}{py / cc:>9.1f}x" if cc else f"{'-':>14}{'-':>10}"
        print(row)


if __name__ == "__main__":
    main()
