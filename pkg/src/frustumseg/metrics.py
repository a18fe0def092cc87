"""Segmentation metrics, robustness scores, and the KNN smoothing baseline.

Accuracy is computed exactly as printed in the source convention,
TP / (TP + FP), which is the precision form; per-class scores with a zero
denominator are excluded from the means rather than scored zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DataError, FormatError
from .geometry import FrustumIndex
from .scan_io import PointCloud


class ConfusionMatrix:
    """C x C counts[gt][pred]; ignore-labeled ground truth is skipped."""

    def __init__(self, num_classes: int, ignore_label: int = 255):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise DataError("pred and gt lengths differ")
        keep = gt != self.ignore_label
        pred, gt = pred[keep], gt[keep]
        if gt.size and (gt.min() < 0 or gt.max() >= self.num_classes):
            raise DataError("ground-truth class outside [0, C)")
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise DataError("predicted class outside [0, C)")
        flat = gt * self.num_classes + pred
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge differently sized matrices")
        self.counts += other.counts
        return self


@dataclass(frozen=True)
class MetricReport:
    iou: np.ndarray   # per class, NaN where undefined
    acc: np.ndarray   # per class, NaN where undefined
    miou: float
    macc: float


def iou_acc(cm: ConfusionMatrix) -> MetricReport:
    """Per-class IoU = TP/(TP+FP+FN) and Acc = TP/(TP+FP), plus the means."""
    counts = cm.counts
    if counts.sum() == 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    iou = np.full(cm.num_classes, np.nan)
    acc = np.full(cm.num_classes, np.nan)
    iou_den = tp + fp + fn
    acc_den = tp + fp
    iou[iou_den > 0] = tp[iou_den > 0] / iou_den[iou_den > 0]
    acc[acc_den > 0] = tp[acc_den > 0] / acc_den[acc_den > 0]
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    macc = float(np.nanmean(acc)) if np.isfinite(acc).any() else float("nan")
    return MetricReport(iou=iou, acc=acc, miou=miou, macc=macc)


LEVELS = 3


@dataclass(frozen=True)
class CorruptionTable:
    """Per corruption: three severity-level IoUs for model and baseline."""

    clean_iou: float
    model: Dict[str, Tuple[float, float, float]]
    baseline: Dict[str, Tuple[float, float, float]]

    def __post_init__(self):
        if set(self.model) != set(self.baseline):
            raise DataError("model and baseline corruption sets differ")
        values = [self.clean_iou]
        for table in (self.model, self.baseline):
            for levels in table.values():
                if len(levels) != LEVELS:
                    raise DataError("each corruption needs exactly 3 levels")
                values.extend(levels)
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise DataError("IoU values must lie in [0, 1]")


def read_corruption_table(path: str | Path) -> CorruptionTable:
    """Parse `<name>.level<l>`, `<name>.base.level<l>`, and `clean` keys."""
    clean: Optional[float] = None
    model: Dict[str, Dict[int, float]] = {}
    base: Dict[str, Dict[int, float]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in body.split("=", 1))
        try:
            val = float(value)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad value '{value}'") from exc
        if key == "clean":
            clean = val
            continue
        parts = key.split(".")
        if len(parts) == 2 and parts[1].startswith("level"):
            target, name, level_tok = model, parts[0], parts[1]
        elif len(parts) == 3 and parts[1] == "base" and parts[2].startswith("level"):
            target, name, level_tok = base, parts[0], parts[2]
        else:
            raise FormatError(f"{path}:{lineno}: unrecognized key '{key}'")
        try:
            level = int(level_tok[len("level"):])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad level in '{key}'") from exc
        if level not in (1, 2, 3):
            raise FormatError(f"{path}:{lineno}: level must be 1..3")
        target.setdefault(name, {})[level] = val
    if clean is None:
        raise FormatError(f"{path}: missing 'clean' key")
    for name in sorted(set(model) | set(base)):
        for table, kind in ((model, "model"), (base, "base")):
            got = sorted(table.get(name, {}))
            if got != [1, 2, 3]:
                raise FormatError(f"{path}: corruption '{name}' ({kind}) has "
                                  f"levels {got}, needs [1, 2, 3]")
    return CorruptionTable(
        clean_iou=clean,
        model={n: tuple(model[n][l] for l in (1, 2, 3)) for n in model},
        baseline={n: tuple(base[n][l] for l in (1, 2, 3)) for n in base},
    )


@dataclass(frozen=True)
class CorruptionScores:
    ce: Dict[str, float]  # percent
    rr: Dict[str, float]  # percent
    mce: float
    mrr: float


def corruption_scores(table: CorruptionTable) -> CorruptionScores:
    """Corruption Error and Resilience Rate per corruption, plus their means.

    CE = sum(1 - IoU_l) / sum(1 - IoU_base_l); RR = sum(IoU_l) / (3 * clean),
    both in percent; means average over corruption types.
    """
    if table.clean_iou <= 0.0:
        raise DataError("clean IoU must be positive for RR")
    ce: Dict[str, float] = {}
    rr: Dict[str, float] = {}
    for name, levels in table.model.items():
        base = table.baseline[name]
        denom = sum(1.0 - v for v in base)
        if denom == 0.0:
            raise DataError(f"CE undefined for '{name}': perfect baseline")
        ce[name] = 100.0 * sum(1.0 - v for v in levels) / denom
        rr[name] = 100.0 * sum(levels) / (LEVELS * table.clean_iou)
    mce = float(np.mean(list(ce.values()))) if ce else float("nan")
    mrr = float(np.mean(list(rr.values()))) if rr else float("nan")
    return CorruptionScores(ce=ce, rr=rr, mce=mce, mrr=mrr)


def knn_postprocess(range_pred: np.ndarray, cloud: PointCloud,
                    index: FrustumIndex, k: int = 5, window: int = 5,
                    range_cutoff: float = 1.0) -> np.ndarray:
    """Project 2D predictions back to points via depth-ranked window voting.

    For each point, valid pixels inside the window around its own pixel are
    ranked by |point depth - pixel representative depth| (ties by window
    scan order). Candidates beyond the cutoff are dropped unless none
    survive, in which case the nearest is kept. The k nearest vote; vote
    ties go to the class whose candidate ranks nearest.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    if window < 1 or window % 2 == 0:
        raise DataError("window must be odd and positive")
    h, w = index.height, index.width
    if range_pred.shape != (h, w):
        raise DataError(f"prediction grid {range_pred.shape} vs index {h}x{w}")

    depth = cloud.depth
    rep_depth = np.zeros((h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    for (pv, pu), pts in index.members.items():
        best = pts[0]
        for i in pts[1:]:
            if depth[i] < depth[best]:
                best = i
        rep_depth[pv, pu] = depth[best]
        valid[pv, pu] = True

    half = window // 2
    out = np.empty(len(cloud), dtype=np.int64)
    for i in range(len(cloud)):
        v0, u0 = int(index.v[i]), int(index.u[i])
        candidates: List[Tuple[float, int, int]] = []  # (gap, scan order, label)
        order = 0
        for dv in range(-half, half + 1):
            v = v0 + dv
            if v < 0 or v >= h:
                order += window
                continue
            for du in range(-half, half + 1):
                u = (u0 + du) % w
                if valid[v, u]:
                    candidates.append((abs(depth[i] - rep_depth[v, u]), order,
                                       int(range_pred[v, u])))
                order += 1
        candidates.sort()
        near = [c for c in candidates if c[0] <= range_cutoff]
        if not near:
            near = candidates[:1]
        near = near[:k]
        votes: Dict[int, int] = {}
        first_seen: Dict[int, int] = {}
        for pos, (_, _, label) in enumerate(near):
            votes[label] = votes.get(label, 0) + 1
            first_seen.setdefault(label, pos)
        out[i] = max(votes, key=lambda lbl: (votes[lbl], -first_seen[lbl]))
    return out
