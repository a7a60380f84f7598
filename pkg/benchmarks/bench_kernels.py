"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Both backends are imported directly, so the environment switch does not
matter here.  Outputs are compared before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from labelguided.kernels import _fallback

try:
    from labelguided.kernels import _ckernels
except ImportError:
    _ckernels = None


def _boxes(rng, n):
    return np.concatenate([rng.uniform(0, 6, (n, 3)), rng.uniform(0.3, 1.5, (n, 3))], axis=1)


def cases(rng):
    pts = rng.uniform(0, 6, (600, 3))
    seeds = pts[rng.choice(600, 64, replace=False)]
    boxes = _boxes(rng, 64)
    scores = rng.uniform(size=64)
    order = np.argsort(-scores, kind="stable")
    few = _boxes(rng, 5)
    return {
        "knn (600 pts, 64 queries, k=16)": lambda m: m.knn_indices(pts, seeds, 16),
        "points_in_box (600 pts)": lambda m: m.points_in_box_mask(pts, few[0, :3], few[0, 3:]),
        "iou_matrix (64 x 64)": lambda m: m.iou_matrix(boxes, boxes),
        "nms (64 boxes)": lambda m: m.nms_order(boxes, order, 0.25),
        "assign_inside_nearest (64 seeds, 5 boxes)": lambda m: m.assign_inside_nearest(seeds, few),
        "assign_nearest_within (64 seeds, 5 centres)":
            lambda m: m.assign_nearest_within(seeds, few[:, :3], few[:, 3:].max(axis=1) / 2),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    results = []
    print(f"{'kernel':45s} {'cython us':>10s} {'python us':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        a, b = fn(_ckernels), fn(_fallback)
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        row = {"kernel": name}
        for label, mod in (("cython", _ckernels), ("python", _fallback)):
            t = min(timeit.repeat(lambda: fn(mod), number=10, repeat=args.repeat)) / 10
            row[f"{label}_us"] = t * 1e6
        row["speedup"] = row["python_us"] / row["cython_us"]
        results.append(row)
        print(f"{name:45s} {row['cython_us']:10.1f} {row['python_us']:10.1f} {row['speedup']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
