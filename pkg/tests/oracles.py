"""Independent reference implementations the tests compare the package against."""

import numpy as np

from whorlpose.detector import RawDetection


def encode(dets, meta):
    """Detections -> (14, N) pixel tensor, the layout an exported pose model emits."""
    out = np.zeros((14, len(dets)))
    for j, d in enumerate(dets):
        out[0:4, j] = [d.bbox_norm[0] * meta.width_px, d.bbox_norm[1] * meta.height_px,
                       d.bbox_norm[2] * meta.width_px, d.bbox_norm[3] * meta.height_px]
        out[4, j] = d.score
        for k, (x, y, c) in enumerate(d.keypoints):
            out[5 + 3 * k:8 + 3 * k, j] = [x * meta.width_px, y * meta.height_px, c]
    return out


def random_dets(rng, n, min_score=0.25):
    out = []
    for _ in range(n):
        xs = np.sort(rng.uniform(0, 1, 3))
        ys = rng.uniform(0, 1, 3)
        kps = tuple((float(x), float(y), float(c)) for x, y, c in zip(xs, ys, rng.uniform(0, 1, 3)))
        out.append(RawDetection(tuple(rng.uniform(0, 1, 4)), float(rng.uniform(min_score, 1.0)), kps))
    return out


def shapely_iou(a, b):
    from shapely.geometry import box
    ba = box(a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2)
    bb = box(b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)
    u = ba.union(bb).area
    return ba.intersection(bb).area / u if u > 0 else 0.0


def reference_nms(dets, thr):
    """Literal greedy: take the best remaining, delete its overlaps, repeat."""
    remaining = list(dets)
    keep = []
    while remaining:
        best = min(remaining, key=lambda d: (-d.score, d.bbox_norm[1], d.bbox_norm[0]))
        keep.append(best)
        remaining = [d for d in remaining if d is not best and shapely_iou(d.bbox_norm, best.bbox_norm) <= thr]
    return keep


def reference_filter(cands, d):
    """Restart-from-scratch formulation: scan the ranked list, take the first
    candidate compatible with everything taken so far, start over."""
    ranked = sorted(cands, key=lambda c: (-c.confidence, c.z_m, c.view_angle_deg, -min(c.kp_scores),
                                          c.section_index))
    kept = []
    while True:
        for c in ranked:
            if c not in kept and all(abs(c.z_m - k.z_m) >= d for k in kept):
                kept.append(c)
                break
        else:
            return sorted(kept, key=lambda c: c.z_m)


def brute_force_max_matching(pred, gt, tol):
    """Largest one-to-one matching by trying every assignment."""
    def best(i, used):
        if i == len(gt):
            return 0
        out = best(i + 1, used)  # leave gt[i] unmatched
        for j, p in enumerate(pred):
            if j not in used and abs(p - gt[i]) <= tol:
                out = max(out, 1 + best(i + 1, used | {j}))
        return out
    return best(0, frozenset())
