"""Confidence-threshold routing between novel-class heads and the base head.

A pixel is claimed by a novel class only when some head's confidence
strictly exceeds tau; every other pixel falls back to the frozen base
prediction. Routing masks base decisions but never alters them, so base
quality is preserved wherever no head fires.

Also hosts the threshold diagnostics: sweeping tau over a metric grid and
ROC/AUC analysis of a head's scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import IGNORE_INDEX
from .errors import ConfigurationError, DimensionError, EmptySupervisionError, UndefinedROCError

ARBITRATION_MODES = ("max_confidence", "latest_step_first")


@dataclass(frozen=True)
class RoutingConfig:
    tau: float = 0.75
    arbitration: str = "max_confidence"

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must be in [0, 1], got {self.tau}")
        if self.arbitration not in ARBITRATION_MODES:
            raise ConfigurationError(
                f"arbitration must be one of {ARBITRATION_MODES}, got {self.arbitration!r}")


@dataclass(frozen=True)
class HeadPrediction:
    """One step's head output: confidence per novel class, in [0, 1]."""

    step_index: int
    novel_class_ids: tuple[int, ...]
    probabilities: np.ndarray  # (len(novel_class_ids), H, W)


@dataclass
class RoutedPrediction:
    label_map: np.ndarray  # (H, W) class ids
    source_map: np.ndarray  # (H, W); 0 = base, t = claimed by step t
    confidence_map: np.ndarray  # winning head confidence, else max base softmax

    BASE_SOURCE = 0


def _softmax_max(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return (exp.max(axis=0) / exp.sum(axis=0)).astype(np.float64)


def route(base_logits: np.ndarray, head_maps: Sequence[HeadPrediction],
          config: RoutingConfig) -> RoutedPrediction:
    """Merge base logits and novel-head confidences into one label map.

    ``max_confidence`` arbitration lets the most confident head win (ties to
    the higher step, then the lower class id); ``latest_step_first`` gives
    newer steps priority regardless of magnitude. An empty head list yields
    the pure base argmax.
    """
    config.validate()
    base = np.asarray(base_logits, dtype=np.float64)
    if base.ndim != 3:
        raise DimensionError(f"base_logits must be (C, H, W), got {base.shape}")
    spatial = base.shape[1:]
    # np.argmax resolves ties toward the lowest class id
    labels = base.argmax(axis=0).astype(np.int64)
    source = np.zeros(spatial, dtype=np.int64)
    confidence = _softmax_max(base)

    candidates: list[tuple[int, int, np.ndarray]] = []
    for head in head_maps:
        probs = np.asarray(head.probabilities, dtype=np.float64)
        if probs.shape != (len(head.novel_class_ids), *spatial):
            raise DimensionError(
                f"head for step {head.step_index} has shape {probs.shape}, "
                f"expected {(len(head.novel_class_ids), *spatial)}")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ConfigurationError("head probabilities must lie in [0, 1]")
        for channel, class_id in enumerate(head.novel_class_ids):
            candidates.append((head.step_index, int(class_id), probs[channel]))
    if not candidates:
        return RoutedPrediction(labels, source, confidence)

    if config.arbitration == "max_confidence":
        # order so the first argmax hit realizes the tie-break preference
        candidates.sort(key=lambda c: (-c[0], c[1]))
        stack = np.stack([c[2] for c in candidates])
        exceed = stack > config.tau
        masked = np.where(exceed, stack, -np.inf)
        winner = masked.argmax(axis=0)
        claimed = exceed.any(axis=0)
        ids = np.asarray([c[1] for c in candidates], dtype=np.int64)
        steps = np.asarray([c[0] for c in candidates], dtype=np.int64)
        winning = np.take_along_axis(stack, winner[None], axis=0)[0]
        labels = np.where(claimed, ids[winner], labels)
        source = np.where(claimed, steps[winner], source)
        confidence = np.where(claimed, winning, confidence)
    else:  # latest_step_first
        claimed = np.zeros(spatial, dtype=bool)
        candidates.sort(key=lambda c: (-c[0], c[1]))
        step_order = sorted({c[0] for c in candidates}, reverse=True)
        for step in step_order:
            group = [c for c in candidates if c[0] == step]
            stack = np.stack([c[2] for c in group])
            exceed = stack > config.tau
            fires = exceed.any(axis=0) & ~claimed
            if not fires.any():
                continue
            masked = np.where(exceed, stack, -np.inf)
            winner = masked.argmax(axis=0)
            ids = np.asarray([c[1] for c in group], dtype=np.int64)
            winning = np.take_along_axis(stack, winner[None], axis=0)[0]
            labels = np.where(fires, ids[winner], labels)
            source = np.where(fires, step, source)
            confidence = np.where(fires, winning, confidence)
            claimed |= fires
    return RoutedPrediction(labels, source, confidence)


@dataclass(frozen=True)
class SweepPoint:
    tau: float
    iou: float
    precision: float
    recall: float
    f1: float


def _binary_counts(probabilities: np.ndarray, ground_truth: np.ndarray,
                   tau: float) -> tuple[int, int, int]:
    valid = ground_truth != IGNORE_INDEX
    pred = (probabilities > tau) & valid
    positive = (ground_truth == 1) & valid
    tp = int(np.count_nonzero(pred & positive))
    fp = int(np.count_nonzero(pred & ~positive))
    fn = int(np.count_nonzero(~pred & positive))
    return tp, fp, fn


def sweep_threshold(probabilities: np.ndarray, ground_truth: np.ndarray,
                    tau_grid: Sequence[float]) -> tuple[list[SweepPoint], float]:
    """Binary metrics of ``prob > tau`` at each grid point, plus tau*.

    tau* maximizes IoU; ties break toward the lower threshold. Ground truth
    uses 1 for the novel class, 0 otherwise, 255 for ignore.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    gt = np.asarray(ground_truth)
    if probs.shape != gt.shape:
        raise DimensionError(f"probabilities {probs.shape} and ground truth {gt.shape} differ")
    grid = [float(t) for t in tau_grid]
    if not grid or any(not 0.0 <= t <= 1.0 for t in grid):
        raise ConfigurationError("tau grid values must lie in [0, 1]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigurationError("tau grid must be strictly increasing")
    if not (gt != IGNORE_INDEX).any():
        raise EmptySupervisionError("ground truth is entirely ignore-index")

    points = []
    for tau in grid:
        tp, fp, fn = _binary_counts(probs, gt, tau)
        iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        points.append(SweepPoint(tau, iou, precision, recall, f1))
    best = int(np.argmax([p.iou for p in points]))  # first max -> lowest tau
    return points, points[best].tau


def roc_and_auc(probabilities: np.ndarray,
                ground_truth: np.ndarray) -> tuple[list[tuple[float, float]], float]:
    """ROC over all distinct score thresholds; AUC by trapezoidal rule.

    Tied scores are grouped into a single ROC vertex, which makes the
    trapezoidal area coincide with the pairwise-comparison statistic
    P(score+ > score-) + 0.5 P(equal).
    """
    probs = np.asarray(probabilities, dtype=np.float64).ravel()
    gt = np.asarray(ground_truth).ravel()
    if probs.shape != gt.shape:
        raise DimensionError("probabilities and ground truth must match in size")
    valid = gt != IGNORE_INDEX
    scores = probs[valid]
    labels = (gt[valid] == 1).astype(np.int64)
    num_pos = int(labels.sum())
    num_neg = int(labels.size - num_pos)
    if num_pos == 0 or num_neg == 0:
        raise UndefinedROCError(
            f"need at least one positive and one negative pixel, got {num_pos}/{num_neg}")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp_cum = np.cumsum(sorted_labels)
    fp_cum = np.cumsum(1 - sorted_labels)
    # keep only the last index of each tie group
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tpr = np.concatenate([[0.0], tp_cum[distinct] / num_pos])
    fpr = np.concatenate([[0.0], fp_cum[distinct] / num_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


# 8-bit export of routed predictions, with a sidecar palette for rendering.

_COLOR_TABLE = (
    (115, 115, 115), (191, 77, 77), (77, 179, 89), (77, 102, 204),
    (217, 204, 64), (64, 199, 204), (204, 77, 191), (230, 140, 51),
    (128, 64, 64), (64, 128, 64), (64, 64, 128), (160, 160, 64),
    (64, 160, 160), (160, 64, 160), (200, 100, 100), (100, 200, 100),
    (100, 100, 200), (220, 220, 120), (120, 220, 220), (220, 120, 220),
)


def palette_for(class_ids: Sequence[int]) -> dict[int, tuple[int, int, int]]:
    return {int(c): _COLOR_TABLE[i % len(_COLOR_TABLE)] for i, c in enumerate(sorted(class_ids))}


def save_label_image(label_map: np.ndarray, path: str | Path,
                     palette_path: str | Path | None = None,
                     class_ids: Sequence[int] | None = None) -> Path:
    """Write an 8-bit single-channel id image; optionally a palette sidecar.

    The sidecar holds one ``id r g b`` line per class so external viewers
    can colorize the raw ids.
    """
    path = Path(path)
    labels = np.asarray(label_map)
    if labels.min() < 0 or labels.max() > 255:
        raise ConfigurationError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
    if palette_path is not None:
        ids = class_ids if class_ids is not None else sorted(
            int(v) for v in np.unique(labels) if v != IGNORE_INDEX)
        lines = [f"{c} {r} {g} {b}" for c, (r, g, b) in sorted(palette_for(ids).items())]
        Path(palette_path).write_text("\n".join(lines) + "\n")
    return path
