"""End-to-end evaluation: run models over a dataset and build reports."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import IGNORE_INDEX, SegmentationDataset, restrict_labels
from .metrics import ConfusionMatrix, MetricsReport, accumulate, build_report
from .model import IncrementalUnit, SegmentationModel, forward_base, forward_incremental
from .routing import HeadPrediction, RoutedPrediction, RoutingConfig, route


def head_predictions(model: SegmentationModel, units: Sequence[IncrementalUnit],
                     image: np.ndarray) -> list[HeadPrediction]:
    return [
        HeadPrediction(unit.step_index, unit.novel_class_ids,
                       forward_incremental(model, unit, image))
        for unit in units
    ]


def predict_routed(model: SegmentationModel, units: Sequence[IncrementalUnit],
                   images: np.ndarray, config: RoutingConfig) -> np.ndarray:
    """Routed label maps for a batch; (N, H, W) int64."""
    out = np.empty(images.shape[:3], dtype=np.int64)
    for i in range(len(images)):
        logits, _ = forward_base(model, images[i])
        routed = route(logits, head_predictions(model, units, images[i]), config)
        out[i] = routed.label_map
    return out


def route_single(model: SegmentationModel, units: Sequence[IncrementalUnit],
                 image: np.ndarray, config: RoutingConfig) -> RoutedPrediction:
    logits, _ = forward_base(model, image)
    return route(logits, head_predictions(model, units, image), config)


def predict_argmax(model: SegmentationModel, images: np.ndarray) -> np.ndarray:
    """Plain per-pixel argmax over the model's own head (baseline models)."""
    out = np.empty(images.shape[:3], dtype=np.int64)
    for i in range(len(images)):
        logits, _ = forward_base(model, images[i])
        out[i] = logits.argmax(axis=0)
    return out


def _report_from_predictions(predictions: np.ndarray, dataset: SegmentationDataset,
                             base_classes: Sequence[int], novel_classes: Sequence[int],
                             step_index: int) -> MetricsReport:
    known = tuple(base_classes) + tuple(novel_classes)
    gt = restrict_labels(dataset, known)
    matrix = ConfusionMatrix(max(known) + 1)
    accumulate(matrix, predictions, gt.labels)
    return build_report(matrix, base_classes, novel_classes, step_index)


def evaluate_routed(model: SegmentationModel, units: Sequence[IncrementalUnit],
                    dataset: SegmentationDataset, base_classes: Sequence[int],
                    novel_classes: Sequence[int], step_index: int,
                    config: RoutingConfig) -> MetricsReport:
    """Evaluate base + units with confidence routing against the classes
    known at ``step_index``; future classes appear as background in gt."""
    preds = predict_routed(model, units, dataset.images, config)
    return _report_from_predictions(preds, dataset, base_classes, novel_classes, step_index)


def evaluate_argmax(model: SegmentationModel, dataset: SegmentationDataset,
                    base_classes: Sequence[int], novel_classes: Sequence[int],
                    step_index: int) -> MetricsReport:
    preds = predict_argmax(model, dataset.images)
    return _report_from_predictions(preds, dataset, base_classes, novel_classes, step_index)


def novel_class_scores(model: SegmentationModel, unit: IncrementalUnit,
                       dataset: SegmentationDataset,
                       class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a unit's confidence for one class with binary ground truth.

    Returns ``(scores, gt)`` over the whole dataset, gt in {0, 1, ignore};
    inputs for threshold sweeps and ROC analysis.
    """
    channel = unit.novel_class_ids.index(class_id)
    scores = np.empty(dataset.labels.shape, dtype=np.float64)
    for i in range(len(dataset)):
        scores[i] = forward_incremental(model, unit, dataset.images[i])[channel]
    gt = np.where(dataset.labels == IGNORE_INDEX, np.uint8(IGNORE_INDEX),
                  (dataset.labels == class_id).astype(np.uint8))
    return scores, gt
