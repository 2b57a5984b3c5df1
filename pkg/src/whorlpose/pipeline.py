"""
End-to-end per-tree chain and the parallel batch runner.

Parallelism is per tree: a pool of worker processes, each holding its own
detector instance, consumes the input files. Images within a tree are
generated lazily and processed one at a time.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .detector import DecoderConfig, DetectorPort, DetectorSpec
from .evaluation import EvalConfig, EvalReport, evaluate_batch
from .pointcloud_io import CLOUD_SUFFIXES
from .postprocess import (FilterConfig, Whorl, WhorlCandidate, convert_to_real_world, filter_whorls,
                          merge_views, whorls_to_csv, write_candidates_json)
from .projection import SlicingConfig, iter_section_images, prepare_cloud

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    slicing: SlicingConfig = field(default_factory=SlicingConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    px: int = 1000
    workers: int = 1
    save_images: bool = False
    dump_candidates: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class TreeResult:
    tree_id: str
    whorls: list[Whorl]
    candidates: list[WhorlCandidate]
    n_images: int
    timings_ms: dict[str, float]
    z_offset: float = 0.0


def pose_detection_tree(cloud_path, detector: DetectorPort, cfg: PipelineConfig | None = None,
                        image_dir=None) -> TreeResult:
    """Point cloud file -> filtered whorls with geometry.

    Detector time is measured separately from the rest of the pipeline.
    """
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    cloud, axis = prepare_cloud(cloud_path)
    t_read = time.perf_counter()

    project_s = detect_s = 0.0
    cands: list[WhorlCandidate] = []
    n_images = 0
    images = iter_section_images(cloud, axis, cfg.slicing, cfg.px)
    while True:
        ta = time.perf_counter()
        image = next(images, None)
        tb = time.perf_counter()
        project_s += tb - ta
        if image is None:
            break
        n_images += 1
        if image_dir is not None:
            image.save(image_dir)
        dets = detector.detect(image)
        tc = time.perf_counter()
        detect_s += tc - tb
        cands.extend(convert_to_real_world(d, image.meta) for d in dets)

    tp = time.perf_counter()
    merged = merge_views(cands)
    whorls = filter_whorls(merged, cfg.filter, cfg.decoder.kp_score_threshold)
    t_end = time.perf_counter()
    timings = {
        "read_ms": (t_read - t0) * 1e3,
        "project_ms": project_s * 1e3,
        "detect_ms": detect_s * 1e3,
        "postprocess_ms": (t_end - tp) * 1e3,
        "total_ms": (t_end - t0) * 1e3,
    }
    timings["pipeline_ms"] = timings["total_ms"] - timings["detect_ms"]
    return TreeResult(cloud.tree_id, whorls, merged, n_images, timings, cloud.z_offset)


# ------------------------------------------------------------------ batch

def find_inputs(spec) -> list[Path]:
    """Point cloud files from a directory, a single file or a glob pattern."""
    p = Path(spec)
    if p.is_dir():
        files = [f for f in p.iterdir() if f.is_file() and f.suffix.lower() in CLOUD_SUFFIXES]
    elif p.is_file():
        files = [p]
    else:
        parent = p.parent if str(p.parent) else Path(".")
        files = [f for f in parent.glob(p.name) if f.is_file() and f.suffix.lower() in CLOUD_SUFFIXES]
    return sorted(files)


_worker_detector: DetectorPort | None = None


def _init_worker(spec: DetectorSpec, log_level: int):
    global _worker_detector
    logging.basicConfig(level=log_level)
    _worker_detector = spec.build()


def _run_one(path: Path, cfg: PipelineConfig, image_dir) -> dict:
    t0 = time.perf_counter()
    try:
        res = pose_detection_tree(path, _worker_detector, cfg, image_dir)
        return {"path": str(path), "status": "ok", "result": res, "pid": os.getpid()}
    except Exception as e:  # per-tree failures are reported, not fatal
        log.error("tree %s failed: %s", path, e)
        return {"path": str(path), "status": "error", "error": f"{type(e).__name__}: {e}",
                "total_ms": (time.perf_counter() - t0) * 1e3, "pid": os.getpid()}


@dataclass
class BatchResult:
    results: list[TreeResult]
    manifest: dict
    report: EvalReport | None = None

    @property
    def whorls(self) -> list[Whorl]:
        return [w for r in self.results for w in r.whorls]

    @property
    def n_failed(self) -> int:
        return sum(1 for t in self.manifest["trees"] if t["status"] != "ok")


def run_batch(paths: Sequence[Path], spec: DetectorSpec, cfg: PipelineConfig | None = None,
              image_dir=None, truths: dict[str, list[float]] | None = None) -> BatchResult:
    """Run pose_detection_tree over many trees with cfg.workers processes.

    Results come back in input order regardless of worker count.
    """
    global _worker_detector
    cfg = cfg or PipelineConfig()
    paths = [Path(p) for p in paths]
    if image_dir is not None:
        Path(image_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cfg.workers == 1:
        _worker_detector = spec.build()
        raw = [_run_one(p, cfg, image_dir) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker,
                                 initargs=(spec, logging.getLogger().level)) as pool:
            raw = list(pool.map(_run_one, paths, [cfg] * len(paths), [image_dir] * len(paths)))
    wall_ms = (time.perf_counter() - t0) * 1e3

    results = []
    entries = []
    for item in raw:
        entry = {"path": item["path"], "status": item["status"], "worker_pid": item["pid"]}
        if item["status"] == "ok":
            r: TreeResult = item["result"]
            results.append(r)
            entry.update(tree_id=r.tree_id, timings_ms=r.timings_ms, z_offset_m=r.z_offset,
                         counts={"images": r.n_images, "candidates": len(r.candidates),
                                 "whorls": len(r.whorls)})
        else:
            entry.update(tree_id=Path(item["path"]).stem, error=item["error"],
                         timings_ms={"total_ms": item["total_ms"]})
        entries.append(entry)

    ok_times = [e["timings_ms"]["total_ms"] for e in entries if e["status"] == "ok"]
    manifest = {
        "tool": "whorlpose",
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "workers": cfg.workers,
        "wall_time_ms": wall_ms,
        "mean_tree_ms": sum(ok_times) / len(ok_times) if ok_times else None,
        "detector": asdict(spec),
        "config": asdict(cfg),
        "trees": entries,
    }
    report = None
    if truths is not None:
        preds = {r.tree_id: [w.z_m for w in r.whorls] for r in results}
        report = evaluate_batch(preds, truths, cfg.eval)
    return BatchResult(results, manifest, report)


def write_batch_outputs(batch: BatchResult, out_dir, dump_candidates: bool = False) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    whorls = sorted(batch.whorls, key=lambda w: (w.tree_id, w.z_m))
    files = {"whorls": out_dir / "whorls.csv", "manifest": out_dir / "manifest.json"}
    files["whorls"].write_text(whorls_to_csv(whorls))
    files["manifest"].write_text(json.dumps(batch.manifest, indent=2, default=str) + "\n")
    if batch.report is not None:
        files["report"] = out_dir / "report.json"
        files["report"].write_text(batch.report.to_json() + "\n")
    if dump_candidates:
        cdir = out_dir / "candidates"
        cdir.mkdir(exist_ok=True)
        for r in batch.results:
            write_candidates_json(r.candidates, cdir / f"{r.tree_id}.json")
    return files
