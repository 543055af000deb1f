"""Per-class Dice score, absolute volume difference and detection AUC."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ShapeError, UndefinedAUCError

CSV_HEADER = ["class", "ds", "avd_mm3", "avd_norm", "auc"]


def _masks(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _masks(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def avd(pred, gt, voxel_volume: float) -> float:
    """Absolute volume difference in mm^3."""
    if not voxel_volume > 0:
        raise ValueError("voxel_volume must be positive")
    p, g = _masks(pred, gt)
    return abs(int(p.sum()) - int(g.sum())) * float(voxel_volume)


def avd_normalized(pred, gt) -> float:
    """Absolute volume difference as a fraction of the whole image volume."""
    p, g = _masks(pred, gt)
    return abs(int(p.sum()) - int(g.sum())) / p.size


def detection_auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ordered correctly, ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative volume")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class ClassResult:
    index: int
    name: str
    ds: float
    avd_mm3: float
    avd_norm: float
    auc: float
    n_volumes: int
    per_volume: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.index}:{self.name}"


@dataclass
class EvalReport:
    classes: list

    def _mean(self, attr):
        vals = [getattr(c, attr) for c in self.classes if not math.isnan(getattr(c, attr))]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_ds(self):
        return self._mean("ds")

    @property
    def mean_avd_mm3(self):
        return self._mean("avd_mm3")

    @property
    def mean_avd_norm(self):
        return self._mean("avd_norm")

    @property
    def mean_auc(self):
        return self._mean("auc")

    def by_index(self, g: int) -> ClassResult:
        for c in self.classes:
            if c.index == g:
                return c
        raise KeyError(g)

    def rows(self):
        for c in self.classes:
            yield [c.label, c.ds, c.avd_mm3, c.avd_norm, c.auc]
        yield ["mean", self.mean_ds, self.mean_avd_mm3, self.mean_avd_norm, self.mean_auc]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def binarize(prob: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground where probability strictly exceeds ``threshold``."""
    return prob > threshold


def evaluate_records(predict: Callable, records: list, space, threshold: float = 0.5,
                     use_truth: bool = False, classes=None) -> EvalReport:
    """Metrics for each class over the volumes that carry ground truth for it.

    ``predict`` maps a (S, 1, H, W) float batch to (S, C, H, W) probabilities.
    Without ``use_truth`` a class is scored only on volumes of the dataset
    that annotates it; with it, on every volume whose sidecar covers it.
    """
    classes = range(1, space.num_classes + 1) if classes is None else classes
    probs = [predict(r.image[:, None]) for r in records]
    results = []
    for g in classes:
        ch = g - 1
        ds_list, avd_list, norm_list, scores, present, per_volume = [], [], [], [], [], []
        for r, prob in zip(records, probs):
            if use_truth:
                if r.truth_mask is None or not r.truth_mask[ch]:
                    continue
                gt = r.truth[:, ch] > 0.5
            else:
                if not r.mask[ch]:
                    continue
                gt = r.onehot[:, ch] > 0.5
            pm = binarize(prob[:, ch], threshold)
            d = dice_score(pm, gt)
            a = avd(pm, gt, r.voxel_volume)
            n = avd_normalized(pm, gt)
            ds_list.append(d)
            avd_list.append(a)
            norm_list.append(n)
            scores.append(float(pm.sum()))
            present.append(bool(gt.any()))
            per_volume.append({"dataset": r.dataset_id, "volume": r.index, "ds": d,
                               "avd_mm3": a, "avd_norm": n, "score": float(pm.sum()),
                               "present": bool(gt.any())})
        if not ds_list:
            continue
        try:
            auc = detection_auc(scores, present)
        except UndefinedAUCError:
            auc = float("nan")
        results.append(ClassResult(g, space.name(g), float(np.mean(ds_list)),
                                   float(np.mean(avd_list)), float(np.mean(norm_list)), auc,
                                   len(ds_list), per_volume))
    return EvalReport(results)


def read_report(path) -> list:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))
