#!/usr/bin/env python3
"""Time the batch pipeline at several worker counts on ~100k-point synthetic trees.

    python scripts/throughput.py --n-trees 8 --workers 1,2,4
"""

import argparse
import json
import os
import tempfile
import time
from pathlib import Path

from whorlpose.detector import DetectorSpec
from whorlpose.pipeline import PipelineConfig, run_batch
from whorlpose.synthgen import generate_tree, random_tree_config, write_tree


def make_trees(directory, n, points, seed0=300):
    paths = []
    for seed in range(seed0, seed0 + n):
        probe, _ = generate_tree(random_tree_config(seed))
        dens = random_tree_config(seed).point_density_pts_per_m * points / len(probe.points)
        cloud, truth = generate_tree(random_tree_config(seed, point_density_pts_per_m=dens))
        paths.append(write_tree(cloud, truth, directory)[0])
    return paths


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-trees", type=int, default=8)
    ap.add_argument("--points", type=int, default=100_000, help="approximate points per tree")
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--out", type=Path, default=Path("runs/throughput.json"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        paths = make_trees(tmp, args.n_trees, args.points)
        spec = DetectorSpec("oracle", truth_dir=tmp)
        runs = []
        reference = None
        for w in (int(s) for s in args.workers.split(",")):
            t0 = time.perf_counter()
            batch = run_batch(paths, spec, PipelineConfig(workers=w))
            wall = time.perf_counter() - t0
            reference = reference or batch.whorls
            runs.append({"workers": w, "wall_s": wall, "mean_tree_ms": batch.manifest["mean_tree_ms"],
                         "identical_to_first": batch.whorls == reference})
            print(f"workers={w}: {wall:.2f} s total, {batch.manifest['mean_tree_ms'] / 1000:.2f} s/tree")

    base = runs[0]["wall_s"]
    for r in runs:
        r["speedup"] = base / r["wall_s"]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"cpu_count": os.cpu_count(), "n_trees": args.n_trees,
                                    "points_per_tree": args.points, "runs": runs}, indent=2) + "\n")
    print(f"cpu_count={os.cpu_count()}; results in {args.out}")


if __name__ == "__main__":
    main()
