"""Segmentation evaluation: confusion matrices, IoU, and step trajectories.

One global confusion matrix is accumulated over the whole evaluation set
(the Cityscapes convention), in integer arithmetic until the final
division. Classes never seen in ground truth or prediction have undefined
IoU and are excluded from means rather than counted as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import IGNORE_INDEX
from .errors import DataError, EvaluationError


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise DataError(f"counts must be {self.num_classes}x{self.num_classes}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Accumulation is associative: partial matrices just add."""
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge matrices of different sizes")
        self.counts += other.counts
        return self


def _first_bad_pixel(labels: np.ndarray, bad: np.ndarray) -> tuple[int, ...]:
    return tuple(int(v) for v in np.argwhere(bad)[0])


def accumulate(matrix: ConfusionMatrix, prediction: np.ndarray,
               ground_truth: np.ndarray) -> ConfusionMatrix:
    """Add per-pixel counts for one label-map pair (or a batch of them).

    Ignore-index pixels contribute nothing; any other id must be below the
    matrix size.
    """
    pred = np.asarray(prediction)
    gt = np.asarray(ground_truth)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = matrix.num_classes
    valid = gt != IGNORE_INDEX
    bad_gt = valid & (gt >= k)
    if bad_gt.any():
        pixel = _first_bad_pixel(gt, bad_gt)
        raise DataError(f"ground-truth id {int(gt[pixel])} at pixel {pixel} exceeds K={k}")
    bad_pred = valid & ((pred >= k) | (pred < 0))
    if bad_pred.any():
        pixel = _first_bad_pixel(pred, bad_pred)
        raise DataError(f"predicted id {int(pred[pixel])} at pixel {pixel} exceeds K={k}")
    flat = gt[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
    matrix.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return matrix


def iou_per_class(matrix: ConfusionMatrix) -> dict[int, float | None]:
    """IoU_c = TP / (TP + FP + FN); None where the class never occurs."""
    counts = matrix.counts
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    result: dict[int, float | None] = {}
    for c in range(matrix.num_classes):
        result[c] = float(tp[c]) / float(denom[c]) if denom[c] > 0 else None
    return result


def subset_miou(matrix: ConfusionMatrix, class_subset: Iterable[int]) -> float:
    """Mean of defined IoUs over the subset.

    Built from the full matrix, so pixels of a subset class predicted as any
    other class, novel ones included, still count as false negatives.
    """
    subset = sorted(set(int(c) for c in class_subset))
    if not subset:
        raise EvaluationError("class subset must be non-empty")
    ious = iou_per_class(matrix)
    defined = [ious[c] for c in subset if c in ious and ious[c] is not None]
    if not defined:
        raise EvaluationError(f"IoU undefined for every class in {subset}")
    return float(np.mean(defined))


@dataclass
class MetricsReport:
    """Per-step evaluation summary feeding the trajectory tables."""

    step_index: int
    num_classes_evaluated: int
    per_class_iou: dict[int, float | None]
    overall_miou: float
    base_miou: float
    novel_miou: float | None

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "num_classes_evaluated": self.num_classes_evaluated,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "overall_miou": self.overall_miou,
            "base_miou": self.base_miou,
            "novel_miou": self.novel_miou,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            step_index=int(data["step_index"]),
            num_classes_evaluated=int(data["num_classes_evaluated"]),
            per_class_iou={int(k): v for k, v in data["per_class_iou"].items()},
            overall_miou=float(data["overall_miou"]),
            base_miou=float(data["base_miou"]),
            novel_miou=None if data["novel_miou"] is None else float(data["novel_miou"]),
        )


def build_report(matrix: ConfusionMatrix, base_classes: Sequence[int],
                 novel_classes: Sequence[int], step_index: int) -> MetricsReport:
    """Summarize a confusion matrix as overall / base / novel means."""
    ious = iou_per_class(matrix)
    defined = [v for v in ious.values() if v is not None]
    if not defined:
        raise EvaluationError("IoU undefined for every class; nothing was evaluated")
    novel_defined = [ious[c] for c in novel_classes if ious.get(c) is not None]
    return MetricsReport(
        step_index=step_index,
        num_classes_evaluated=len(base_classes) + len(novel_classes),
        per_class_iou=ious,
        overall_miou=float(np.mean(defined)),
        base_miou=subset_miou(matrix, base_classes),
        novel_miou=float(np.mean(novel_defined)) if novel_defined else None,
    )


def metrics_records(report: MetricsReport) -> list[str]:
    """One metric per line: ``step scope class_or_mean value``."""
    lines = []
    for c in sorted(report.per_class_iou):
        value = report.per_class_iou[c]
        if value is not None:
            lines.append(f"{report.step_index} per_class {c} {value:.6f}")
    lines.append(f"{report.step_index} overall mean {report.overall_miou:.6f}")
    lines.append(f"{report.step_index} base mean {report.base_miou:.6f}")
    if report.novel_miou is not None:
        lines.append(f"{report.step_index} novel mean {report.novel_miou:.6f}")
    return lines


def trajectory_report(reports: Sequence[MetricsReport]) -> dict:
    """Curve data across steps: overall, base-stability, and novel series.

    The retention ratio is the final base mIoU over the step-0 base mIoU;
    1.0 means no measurable forgetting.
    """
    if not reports:
        raise EvaluationError("need at least one step report")
    ordered = sorted(reports, key=lambda r: r.step_index)
    base_series = [r.base_miou for r in ordered]
    return {
        "step_indices": [r.step_index for r in ordered],
        "num_classes": [r.num_classes_evaluated for r in ordered],
        "overall_miou": [r.overall_miou for r in ordered],
        "base_miou": base_series,
        "novel_miou": [r.novel_miou for r in ordered],
        "retention_ratio": base_series[-1] / base_series[0] if base_series[0] else float("nan"),
    }
