"""
Whorl detection scoring.

Predicted and reference whorls are matched one-to-one along z within a
tolerance. Unmatched predictions are commission errors (FP), unmatched
references omission errors (FN). Counts are pooled over trees before
computing precision, recall and F1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence


@dataclass(frozen=True)
class EvalConfig:
    match_tol_m: float = 0.20

    def __post_init__(self):
        if not self.match_tol_m > 0:
            raise ValueError("match_tol_m must be > 0")


@dataclass
class Matching:
    """Result of match_whorls. Indices refer to the sorted z arrays."""

    pred_z: list[float]
    gt_z: list[float]
    pairs: list[tuple[int, int]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def match_whorls(pred_z: Sequence[float], gt_z: Sequence[float], tol: float = 0.20) -> Matching:
    """Maximum one-to-one matching under |dz| <= tol.

    Both lists are sorted; each reference, in ascending order, takes the
    smallest still-unmatched prediction within tolerance. Feasible sets are
    intervals ordered like the references, so this greedy is optimal.
    """
    pred = sorted(float(z) for z in pred_z)
    gt = sorted(float(z) for z in gt_z)
    pairs = []
    matched = [False] * len(pred)
    start = 0
    for gi, g in enumerate(gt):
        # Every test uses the same rounded difference |p - g|, so the skip and
        # stop conditions agree with the tolerance check. Computing g - tol
        # separately can disagree by one ulp and drop a feasible pair.
        # Predictions too far below g cannot serve this or any later reference.
        while start < len(pred) and (matched[start] or (pred[start] < g and g - pred[start] > tol)):
            start += 1
        for pi in range(start, len(pred)):
            if pred[pi] > g and pred[pi] - g > tol:
                break
            if not matched[pi] and abs(pred[pi] - g) <= tol:
                matched[pi] = True
                pairs.append((pi, gi))
                break
    got = {gi for _, gi in pairs}
    return Matching(pred, gt, pairs,
                    [i for i, m in enumerate(matched) if not m],
                    [i for i in range(len(gt)) if i not in got])


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def internode_errors(matching: Matching) -> list[float]:
    """Predicted minus true internodal distance for each pair of adjacent
    references whose matched predictions are also adjacent."""
    by_gt = {gi: pi for pi, gi in matching.pairs}
    errs = []
    for gi in range(len(matching.gt_z) - 1):
        if gi in by_gt and gi + 1 in by_gt and by_gt[gi + 1] == by_gt[gi] + 1:
            p0, p1 = by_gt[gi], by_gt[gi + 1]
            d_pred = matching.pred_z[p1] - matching.pred_z[p0]
            d_true = matching.gt_z[gi + 1] - matching.gt_z[gi]
            errs.append(d_pred - d_true)
    return errs


def rmse_internodal(pred_z: Sequence[float], gt_z: Sequence[float],
                    matching: Matching | None = None, tol: float = 0.20) -> float | None:
    """RMSE of internodal distances over consecutive matched internodes.

    None when fewer than two pairs are matched or no internode qualifies.
    """
    m = matching if matching is not None else match_whorls(pred_z, gt_z, tol)
    if m.tp < 2:
        return None
    errs = internode_errors(m)
    if not errs:
        return None
    return math.sqrt(sum(e * e for e in errs) / len(errs))


@dataclass
class TreeScore:
    tree_id: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    rmse_internodal_m: float | None
    n_internodes: int
    missing_truth: bool = False


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    rmse_internodal_m: float | None
    trees: list[TreeScore] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float]:
        """Unweighted means of the per-tree metrics."""
        scored = [t for t in self.trees if not t.missing_truth]
        if not scored:
            return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
        n = len(scored)
        return {k: sum(getattr(t, k) for t in scored) / n for k in ("precision", "recall", "f1")}

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "rmse_internodal_m": self.rmse_internodal_m,
            "macro": self.macro,
            "trees": [vars(t).copy() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("", "Precision", "Recall", "F1-score", "TP", "FP", "FN", "RMSE_internode_m")]
        for t in self.trees:
            rows.append((t.tree_id, f"{t.precision:.2f}", f"{t.recall:.2f}", f"{t.f1:.2f}",
                         str(t.tp), str(t.fp), str(t.fn),
                         "-" if t.rmse_internodal_m is None else f"{t.rmse_internodal_m:.3f}"))
        rows.append(("ALL (micro)", f"{self.precision:.2f}", f"{self.recall:.2f}", f"{self.f1:.2f}",
                     str(self.tp), str(self.fp), str(self.fn),
                     "-" if self.rmse_internodal_m is None else f"{self.rmse_internodal_m:.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in
                                   enumerate(zip(r, widths))) for r in rows)


def evaluate_tree(tree_id: str, pred_z: Sequence[float], gt_z: Sequence[float] | None,
                  cfg: EvalConfig | None = None) -> tuple[TreeScore, list[float]]:
    cfg = cfg or EvalConfig()
    missing = gt_z is None
    m = match_whorls(pred_z, gt_z or [], cfg.match_tol_m)
    errs = internode_errors(m) if m.tp >= 2 else []
    p, r = precision(m.tp, m.fp), recall(m.tp, m.fn)
    rmse = math.sqrt(sum(e * e for e in errs) / len(errs)) if errs else None
    return TreeScore(tree_id, m.tp, m.fp, m.fn, p, r, f1(p, r), rmse, len(errs), missing), errs


def evaluate_batch(predictions: Mapping[str, Sequence[float]], truths: Mapping[str, Sequence[float]],
                   cfg: EvalConfig | None = None) -> EvalReport:
    """Micro-averaged report over trees.

    Trees without predictions count all references as FN; trees without a
    reference count every prediction as FP and are flagged missing_truth.
    The pooled RMSE runs over every qualifying internode of every tree.
    """
    cfg = cfg or EvalConfig()
    trees = []
    all_errs: list[float] = []
    for tid in sorted(set(predictions) | set(truths)):
        score, errs = evaluate_tree(tid, predictions.get(tid, []), truths.get(tid), cfg)
        trees.append(score)
        all_errs.extend(errs)
    tp = sum(t.tp for t in trees)
    fp = sum(t.fp for t in trees)
    fn = sum(t.fn for t in trees)
    p, r = precision(tp, fp), recall(tp, fn)
    rmse = math.sqrt(sum(e * e for e in all_errs) / len(all_errs)) if all_errs else None
    return EvalReport(tp, fp, fn, p, r, f1(p, r), rmse, trees)
