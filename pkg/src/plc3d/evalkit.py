"""Open-vocabulary inference and base/novel segmentation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidInput
from .geom import IGNORE


@dataclass
class PartitionSpec:
    categories: list[str]
    base: list[int]
    novel: list[int]
    foreground_excluded: list[int] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.categories)
        self.base = sorted(int(i) for i in self.base)
        self.novel = sorted(int(i) for i in self.novel)
        self.foreground_excluded = sorted(int(i) for i in self.foreground_excluded)
        b, n = set(self.base), set(self.novel)
        if b & n:
            raise InvalidConfig(f"base and novel overlap: {sorted(b & n)}")
        if b | n != set(range(k)):
            raise InvalidConfig("base and novel must cover every category index")
        if not set(self.foreground_excluded) <= set(range(k)):
            raise InvalidConfig("foreground_excluded has out-of-range indices")

    @classmethod
    def from_names(cls, categories, novel, excluded=("wall", "floor", "ceiling")):
        novel_idx = [categories.index(n) for n in novel]
        base_idx = [i for i in range(len(categories)) if i not in novel_idx]
        excl = [categories.index(n) for n in excluded if n in categories]
        return cls(list(categories), base_idx, novel_idx, excl)

    def base_label_map(self):
        """Global label -> index among base classes (IGNORE for novel)."""
        m = np.full(len(self.categories), IGNORE, dtype=np.int64)
        m[self.base] = np.arange(len(self.base))
        return m

    def to_json(self):
        return {
            "categories": self.categories,
            "base": self.base,
            "novel": self.novel,
            "foreground_excluded": self.foreground_excluded,
        }


@dataclass
class MetricReport:
    per_class_iou: list[float | None]
    miou_base: float
    miou_novel: float
    hiou: float
    miou_fg: float
    macc_fg: float
    categories: list[str] = field(default_factory=list)

    def to_json(self):
        return {
            "hiou": self.hiou,
            "miou_base": self.miou_base,
            "miou_novel": self.miou_novel,
            "miou_fg": self.miou_fg,
            "macc_fg": self.macc_fg,
            "per_class_iou": dict(zip(self.categories, self.per_class_iou))
            if self.categories
            else self.per_class_iou,
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def table(self):
        """Aligned plain-text rendering, headline ordered hIoU / mIoU^B / mIoU^N."""
        lines = [
            f"{'hIoU / mIoU^B / mIoU^N':<24} {self.hiou:5.1f} / {self.miou_base:5.1f} / {self.miou_novel:5.1f}",
            f"{'mIoU_fg (mAcc_fg)':<24} {self.miou_fg:5.1f} ({self.macc_fg:5.1f})",
            "",
            f"{'class':<16} {'IoU':>6}",
        ]
        names = self.categories or [str(i) for i in range(len(self.per_class_iou))]
        for name, iou in zip(names, self.per_class_iou):
            lines.append(f"{name:<16} {'-' if iou is None else format(iou, '6.1f'):>6}")
        return "\n".join(lines) + "\n"


def infer_scores(point_features, category_embeddings, scale):
    """Row-softmax of ``scale * f @ E.T``: per-point class probabilities."""
    f = np.asarray(point_features, dtype=np.float64)
    e = np.asarray(category_embeddings, dtype=np.float64)
    if f.ndim != 2 or e.ndim != 2 or f.shape[1] != e.shape[1]:
        raise InvalidInput(f"dimension mismatch: features {f.shape}, embeddings {e.shape}")
    if not scale > 0:
        raise InvalidInput("scale must be positive")
    z = scale * f @ e.T
    z -= z.max(axis=1, keepdims=True)
    s = np.exp(z)
    return s / s.sum(axis=1, keepdims=True)


def predict_labels(scores):
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(scores, axis=1)


def confusion_matrix(pred, gt, num_classes, ignore=IGNORE):
    """``conf[g, p]`` counts points with ground truth g predicted as p."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise InvalidInput("pred and gt lengths differ")
    keep = gt != ignore
    g, p = gt[keep], pred[keep]
    if ((g < 0) | (g >= num_classes)).any() or ((p < 0) | (p >= num_classes)).any():
        raise InvalidInput("label out of range")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def _mean_defined(values, idx):
    vals = [values[i] for i in idx if not math.isnan(values[i])]
    return float(np.mean(vals)) if vals else 0.0


def harmonic_mean(a, b):
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def compute_metrics(conf, partition):
    conf = np.asarray(conf, dtype=np.float64)
    k = len(partition.categories)
    if conf.shape != (k, k):
        raise InvalidInput(f"confusion matrix {conf.shape} does not match {k} categories")
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    denom = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan) * 100.0
        recall = np.where(gt_count > 0, tp / gt_count, np.nan) * 100.0
    iou_l = iou.tolist()
    fg = [i for i in range(k) if i not in set(partition.foreground_excluded)]
    miou_b = _mean_defined(iou_l, partition.base)
    miou_n = _mean_defined(iou_l, partition.novel)
    return MetricReport(
        per_class_iou=[None if math.isnan(v) else v for v in iou_l],
        miou_base=miou_b,
        miou_novel=miou_n,
        hiou=harmonic_mean(miou_b, miou_n),
        miou_fg=_mean_defined(iou_l, fg),
        macc_fg=_mean_defined(recall.tolist(), fg),
        categories=list(partition.categories),
    )


def load_partition(path):
    with open(path, encoding="utf-8") as fh:
        return PartitionSpec(**json.load(fh))
