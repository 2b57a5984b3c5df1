"""
Image space -> tree space.

Detections are back-projected through their image's world bounding box,
pooled across views and sections on the common z axis, thinned by a
confidence-ordered 1D suppression along z, and annotated with the branch
insertion angle and maximum branch length measured in the winning view.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .projection import ImageMeta

if TYPE_CHECKING:
    from .detector import RawDetection

Point2 = tuple[float, float]

CSV_FIELDS = ["tree_id", "z_m", "confidence", "insertion_angle_deg", "max_branch_length_m", "source_view_deg"]


@dataclass(frozen=True)
class FilterConfig:
    min_whorl_dist_m: float = 0.25

    def __post_init__(self):
        if not self.min_whorl_dist_m > 0:
            raise ValueError("min_whorl_dist_m must be > 0")


@dataclass(frozen=True)
class WhorlCandidate:
    tree_id: str
    view_angle_deg: float
    z_m: float
    confidence: float
    kp_world: tuple[Point2, Point2, Point2]  # (x_m, z_m) in the section plane
    kp_scores: tuple[float, float, float]
    section_index: int = 0


@dataclass(frozen=True)
class Whorl:
    tree_id: str
    z_m: float
    confidence: float
    insertion_angle_deg: float | None
    max_branch_len_m: float | None
    source_view_deg: float


def convert_to_real_world(det: "RawDetection", meta: ImageMeta) -> WhorlCandidate:
    """Back-project normalized keypoints through the image's world bbox."""
    sx = meta.x_max - meta.x_min
    sz = meta.z_max - meta.z_min
    kp = tuple((meta.x_min + x * sx, meta.z_max - y * sz) for x, y, _ in det.keypoints)
    return WhorlCandidate(
        tree_id=meta.tree_id,
        view_angle_deg=meta.view_angle_deg,
        z_m=kp[1][1],
        confidence=det.score,
        kp_world=kp,
        kp_scores=tuple(c for _, _, c in det.keypoints),
        section_index=meta.section_index,
    )


def merge_views(cands: Iterable[WhorlCandidate]) -> list[WhorlCandidate]:
    """Pool candidates of one tree on the common z axis (z asc, confidence desc)."""
    cands = list(cands)
    ids = {c.tree_id for c in cands}
    if len(ids) > 1:
        raise ValueError(f"merge_views got candidates from several trees: {sorted(ids)}")
    return sorted(cands, key=lambda c: (c.z_m, -c.confidence))


def calculate_angle_at_p2(p1: Point2, p2: Point2, p3: Point2) -> float | None:
    """Angle in degrees at vertex p2 between p1-p2 and p3-p2; None if degenerate."""
    v1 = (p1[0] - p2[0], p1[1] - p2[1])
    v2 = (p3[0] - p2[0], p3[1] - p2[1])
    if math.hypot(*v1) == 0.0 or math.hypot(*v2) == 0.0:
        return None
    # atan2 stays accurate near 0 and 180 degrees where acos of the cosine does not
    cross = v1[0] * v2[1] - v1[1] * v2[0]
    dot = v1[0] * v2[0] + v1[1] * v2[1]
    return math.degrees(math.atan2(abs(cross), dot))


def calculate_distance(p2: Point2, tips: tuple[Point2, Point2]) -> float:
    """Longest of the two center-to-tip distances."""
    return max(math.dist(p2, tips[0]), math.dist(p2, tips[1]))


def whorl_geometry(cand: WhorlCandidate, kp_score_threshold: float = 0.0) -> tuple[float | None, float | None]:
    """(insertion angle, max branch length) of a candidate, None when a keypoint is unreliable."""
    if min(cand.kp_scores) < kp_score_threshold:
        return None, None
    p1, p2, p3 = cand.kp_world
    angle = calculate_angle_at_p2(p1, p2, p3)
    length = calculate_distance(p2, (p1, p3))
    return angle, length


def selection_key(c: WhorlCandidate):
    return (-c.confidence, c.z_m, c.view_angle_deg, -min(c.kp_scores), c.section_index)


def filter_whorls(cands: Sequence[WhorlCandidate], cfg: FilterConfig | None = None,
                  kp_score_threshold: float = 0.0) -> list[Whorl]:
    """Greedy 1D suppression along z.

    Repeatedly keeps the most confident remaining candidate (ties: lower z,
    then lower view angle, then the more reliable weakest keypoint, then
    lower section index) and drops every candidate closer than
    min_whorl_dist_m in z. Output is sorted by z.
    """
    cfg = cfg or FilterConfig()
    order = sorted(cands, key=selection_key)
    kept: list[WhorlCandidate] = []
    for c in order:
        if all(abs(c.z_m - k.z_m) >= cfg.min_whorl_dist_m for k in kept):
            kept.append(c)
    kept.sort(key=lambda c: c.z_m)
    out = []
    for c in kept:
        angle, length = whorl_geometry(c, kp_score_threshold)
        out.append(Whorl(c.tree_id, c.z_m, c.confidence, angle, length, c.view_angle_deg))
    return out


def internodal_distances(whorls: Sequence[Whorl]) -> list[float]:
    return [b.z_m - a.z_m for a, b in zip(whorls, whorls[1:])]


# ----------------------------------------------------------------- output

def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def whorls_to_csv(whorls: Iterable[Whorl]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for wh in whorls:
        w.writerow([wh.tree_id, _fmt(wh.z_m), _fmt(wh.confidence), _fmt(wh.insertion_angle_deg),
                    _fmt(wh.max_branch_len_m), _fmt(wh.source_view_deg)])
    return buf.getvalue()


def write_whorls_csv(whorls: Iterable[Whorl], path) -> Path:
    path = Path(path)
    path.write_text(whorls_to_csv(whorls))
    return path


def read_whorls_csv(path) -> list[Whorl]:
    def opt(s: str):
        return float(s) if s != "" else None

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: whorl CSV missing columns {sorted(missing)}")
        return [Whorl(r["tree_id"], float(r["z_m"]), float(r["confidence"]), opt(r["insertion_angle_deg"]),
                      opt(r["max_branch_length_m"]), float(r["source_view_deg"])) for r in reader]


def write_candidates_json(cands: Iterable[WhorlCandidate], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([asdict(c) for c in cands], indent=1) + "\n")
    return path
