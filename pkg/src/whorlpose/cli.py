"""
whorlpose command line.

    whorlpose synth      --output DIR [--n-trees N] [--seed S]
    whorlpose project    --input TREES --output DIR
    whorlpose detect     --input IMAGE_DIR --output predictions.json --detector ...
    whorlpose postprocess --input predictions.json --images IMAGE_DIR --output whorls.csv
    whorlpose eval       --input whorls.csv --truth DIR [--output report.json]
    whorlpose pipeline   --input TREES --output DIR --detector ... [--truth DIR]
    whorlpose overlay    --input image.png (--predictions F | --whorls F) --output out.png

Every option may also be set in a TOML file passed with --config, using the
flag name with underscores (e.g. min_whorl_dist_m = 0.3). Command line flags
win over the file. Exit codes: 0 ok, 1 some trees failed, 2 usage / no input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .detector import DecoderConfig, DetectorSpec, load_predictions_file, write_predictions_file
from .evaluation import EvalConfig, evaluate_batch
from .overlay import render_overlay
from .pipeline import PipelineConfig, find_inputs, run_batch, write_batch_outputs
from .postprocess import (FilterConfig, convert_to_real_world, filter_whorls, merge_views, read_whorls_csv,
                          write_whorls_csv)
from .projection import SlicingConfig, load_metadata_dir, load_section_image, process_point_cloud
from .synthgen import generate_batch, read_truth, truth_path

log = logging.getLogger("whorlpose")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "input": None,
    "output": None,
    "workers": 1,
    "detector": "oracle",
    "truth": None,
    "predictions": None,
    "model": None,
    "images": None,
    "whorls": None,
    "min_whorl_dist_m": 0.25,
    "match_tol_m": 0.20,
    "views": [0.0, 45.0, 90.0, 135.0],
    "seed": 0,
    "px": 1000,
    "slab_thickness_m": 1.0,
    "section_height_m": 10.0,
    "section_overlap_m": 1.0,
    "window_width_m": 10.0,
    "marker_radius_px": 0,
    "score_threshold": 0.25,
    "nms_iou_threshold": 0.7,
    "kp_score_threshold": 0.3,
    "noise_sigma_m": 0.0,
    "n_trees": 20,
    "point_noise_m": 0.005,
    "density": 1000.0,
    "random_azimuth": False,
    "save_images": False,
    "dump_candidates": False,
}


class UsageError(Exception):
    pass


def _views(s: str) -> list[float]:
    try:
        return [float(v) for v in s.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad view list {s!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--input", help="input file, directory or glob")
    g.add_argument("--output", help="output file or directory")
    g.add_argument("--config", help="TOML key/value file with defaults for any option")
    g.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    g.add_argument("--detector", choices=["fixture", "oracle", "onnx"], help="detection backend")
    g.add_argument("--truth", help="directory of <tree_id>.truth.json ground-truth files")
    g.add_argument("--min-whorl-dist-m", type=float, help="z suppression distance (default 0.25)")
    g.add_argument("--match-tol-m", type=float, help="evaluation z tolerance (default 0.20)")
    g.add_argument("--views", type=_views, help="view angles in degrees, e.g. '0,45,90,135'")
    g.add_argument("--seed", type=int, help="random seed")

    t = common.add_argument_group("detector / projection tuning")
    t.add_argument("--predictions", help="fixture backend: predictions JSON or raw tensor directory")
    t.add_argument("--model", help="onnx backend: exported model file")
    t.add_argument("--noise-sigma-m", type=float, help="oracle backend: keypoint noise (m)")
    t.add_argument("--px", type=int, help="image width in pixels (default 1000)")
    t.add_argument("--slab-thickness-m", type=float)
    t.add_argument("--section-height-m", type=float)
    t.add_argument("--section-overlap-m", type=float)
    t.add_argument("--window-width-m", type=float)
    t.add_argument("--marker-radius-px", type=int)
    t.add_argument("--score-threshold", type=float)
    t.add_argument("--nms-iou-threshold", type=float)
    t.add_argument("--kp-score-threshold", type=float)

    parser = argparse.ArgumentParser(prog="whorlpose", description="Tree whorl detection pipeline")
    parser.add_argument("--version", action="version", version=f"whorlpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic trees with ground truth")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--point-noise-m", type=float, help="point jitter of the generated clouds")
    p.add_argument("--density", type=float, help="points per metre of stem/branch")
    p.add_argument("--random-azimuth", action="store_true", default=None)

    p = sub.add_parser("project", parents=[common], help="point clouds -> section images + metadata")
    sub.add_parser("detect", parents=[common], help="section images -> predictions JSON")
    p = sub.add_parser("postprocess", parents=[common], help="predictions -> whorl CSV")
    p.add_argument("--images", help="directory holding the image metadata sidecars")
    p.add_argument("--dump-candidates", action="store_true", default=None)
    sub.add_parser("eval", parents=[common], help="whorl CSV + truth -> report")
    p = sub.add_parser("pipeline", parents=[common], help="end-to-end run over a batch of trees")
    p.add_argument("--save-images", action="store_true", default=None)
    p.add_argument("--dump-candidates", action="store_true", default=None)
    p = sub.add_parser("overlay", parents=[common], help="draw detections or whorls on an image")
    p.add_argument("--whorls", help="whorl CSV to draw instead of predictions")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """defaults < config file < command line."""
    opts = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, "rb") as f:
                doc = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        opts.update(doc)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            opts[k] = v
    if opts["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    return opts


def pipeline_config(o: dict) -> PipelineConfig:
    try:
        return PipelineConfig(
            slicing=SlicingConfig(
                view_angles_deg=[float(v) for v in o["views"]],
                slab_thickness_m=o["slab_thickness_m"],
                section_height_m=o["section_height_m"],
                section_overlap_m=o["section_overlap_m"],
                window_width_m=o["window_width_m"],
                marker_radius_px=o["marker_radius_px"],
            ),
            decoder=DecoderConfig(o["score_threshold"], o["nms_iou_threshold"], o["kp_score_threshold"]),
            filter=FilterConfig(o["min_whorl_dist_m"]),
            eval=EvalConfig(o["match_tol_m"]),
            px=o["px"],
            workers=o["workers"],
            save_images=bool(o["save_images"]),
            dump_candidates=bool(o["dump_candidates"]),
        )
    except ValueError as e:
        raise UsageError(str(e)) from e


def detector_spec(o: dict, cfg: PipelineConfig) -> DetectorSpec:
    kind = o["detector"]
    if kind == "oracle" and not o["truth"]:
        raise UsageError("--detector oracle needs --truth DIR")
    if kind == "fixture" and not o["predictions"]:
        raise UsageError("--detector fixture needs --predictions FILE|DIR")
    if kind == "onnx" and not o["model"]:
        raise UsageError("--detector onnx needs --model FILE")
    path = o["predictions"] if kind == "fixture" else o["model"]
    for p in (path, o["truth"] if kind == "oracle" else None):
        if p and not Path(p).exists():
            raise UsageError(f"path does not exist: {p}")
    return DetectorSpec(kind, path, o["truth"], o["noise_sigma_m"], o["seed"], cfg.decoder)


def _require(o: dict, *keys: str):
    for k in keys:
        if not o.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def load_truths(truth_dir, tree_ids) -> dict[str, list[float]]:
    out = {}
    for tid in tree_ids:
        p = truth_path(truth_dir, tid)
        if p.exists():
            out[tid] = read_truth(p).z
        else:
            log.warning("no ground truth for %s", tid)
    return out


# ------------------------------------------------------------- commands

def cmd_synth(o: dict) -> int:
    _require(o, "output")
    paths = generate_batch(o["output"], o["n_trees"], o["seed"], noise_sigma_m=o["point_noise_m"],
                           point_density_pts_per_m=o["density"], random_azimuth=bool(o["random_azimuth"]))
    print(f"wrote {len(paths)} synthetic trees to {o['output']}")
    return EXIT_OK


def _project_one(path, slicing, px, out_dir):
    try:
        _, images = process_point_cloud(path, slicing, px)
        for im in images:
            im.save(out_dir)
        return str(path), len(images), None
    except Exception as e:  # reported per tree
        return str(path), 0, f"{type(e).__name__}: {e}"


def cmd_project(o: dict) -> int:
    _require(o, "input", "output")
    paths = find_inputs(o["input"])
    if not paths:
        print("no input trees", file=sys.stderr)
        return EXIT_USAGE
    cfg = pipeline_config(o)
    out = Path(o["output"])
    out.mkdir(parents=True, exist_ok=True)
    n = len(paths)
    args = (paths, [cfg.slicing] * n, [cfg.px] * n, [out] * n)
    if cfg.workers == 1:
        results = list(map(_project_one, *args))
    else:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_project_one, *args))
    failed = 0
    for path, count, err in results:
        if err:
            failed += 1
            log.error("%s: %s", path, err)
        else:
            log.info("%s: %d images", path, count)
    print(f"projected {n - failed}/{n} trees into {out}")
    return EXIT_OK if failed == 0 else EXIT_PARTIAL


def cmd_detect(o: dict) -> int:
    _require(o, "input", "output")
    cfg = pipeline_config(o)
    detector = detector_spec(o, cfg).build()
    pngs = sorted(Path(o["input"]).glob("*.png"))
    if not pngs:
        print("no input images", file=sys.stderr)
        return EXIT_USAGE
    preds = {}
    for png in pngs:
        if not png.with_suffix(".json").exists():
            continue
        image = load_section_image(png)
        preds[image.name] = detector.detect(image)
    out = Path(o["output"])
    if out.is_dir():
        out = out / "predictions.json"
    write_predictions_file(preds, out)
    print(f"{sum(map(len, preds.values()))} detections on {len(preds)} images -> {out}")
    return EXIT_OK


def cmd_postprocess(o: dict) -> int:
    _require(o, "input", "output")
    cfg = pipeline_config(o)
    preds = load_predictions_file(o["input"])
    metas = load_metadata_dir(o["images"] or Path(o["input"]).parent)
    by_tree = defaultdict(list)
    missing = 0
    for name, dets in preds.items():
        meta = metas.get(name)
        if meta is None:
            missing += 1
            log.warning("no metadata sidecar for %s", name)
            continue
        by_tree[meta.tree_id].extend(convert_to_real_world(d, meta) for d in dets)
    # trees whose images carried no detections still appear with zero whorls
    for meta in metas.values():
        by_tree.setdefault(meta.tree_id, [])
    whorls = []
    for tid in sorted(by_tree):
        whorls.extend(filter_whorls(merge_views(by_tree[tid]), cfg.filter, cfg.decoder.kp_score_threshold))
    write_whorls_csv(whorls, o["output"])
    print(f"{len(whorls)} whorls for {len(by_tree)} trees -> {o['output']}")
    return EXIT_OK if missing == 0 else EXIT_PARTIAL


def cmd_eval(o: dict) -> int:
    _require(o, "input", "truth")
    whorls = read_whorls_csv(o["input"])
    preds = defaultdict(list)
    for w in whorls:
        preds[w.tree_id].append(w.z_m)
    truth_ids = [p.name.removesuffix(".truth.json") for p in Path(o["truth"]).glob("*.truth.json")]
    report = evaluate_batch(preds, load_truths(o["truth"], truth_ids), EvalConfig(o["match_tol_m"]))
    print(report.table())
    if o["output"]:
        Path(o["output"]).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_pipeline(o: dict) -> int:
    _require(o, "input", "output")
    paths = find_inputs(o["input"])
    if not paths:
        print("no input trees", file=sys.stderr)
        return EXIT_USAGE
    cfg = pipeline_config(o)
    spec = detector_spec(o, cfg)
    out = Path(o["output"])
    truths = load_truths(o["truth"], [p.stem for p in paths]) if o["truth"] else None
    batch = run_batch(paths, spec, cfg, out / "images" if cfg.save_images else None, truths)
    files = write_batch_outputs(batch, out, cfg.dump_candidates)
    if batch.report is not None:
        print(batch.report.table())
    print(f"{len(batch.whorls)} whorls from {len(batch.results)}/{len(paths)} trees -> {files['whorls']}")
    return EXIT_OK if batch.n_failed == 0 else EXIT_PARTIAL


def cmd_overlay(o: dict) -> int:
    _require(o, "input", "output")
    image = load_section_image(o["input"])
    dets, whorls = [], []
    if o["predictions"]:
        dets = load_predictions_file(o["predictions"]).get(image.name, [])
    if o["whorls"]:
        whorls = [w for w in read_whorls_csv(o["whorls"]) if w.tree_id == image.meta.tree_id]
    render_overlay(image, dets, whorls, o["kp_score_threshold"]).save(o["output"], format="PNG")
    print(f"overlay -> {o['output']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "detect": cmd_detect,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "overlay": cmd_overlay,
}


def main(argv=None) -> int:
    level = os.environ.get("WHORL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except (UsageError, ValueError, OSError) as e:
        print(f"whorlpose {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
