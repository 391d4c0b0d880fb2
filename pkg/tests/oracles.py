"""Brute-force reference implementations used only by tests.

These deliberately share no code with the package: plain loops and the
literal per-pixel rules, quadratic or worse, run only on small instances.
"""

from __future__ import annotations

import numpy as np

IGNORE = 255


def oracle_confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    flat_pred = np.asarray(pred).reshape(-1)
    flat_gt = np.asarray(gt).reshape(-1)
    for p, g in zip(flat_pred, flat_gt):
        if g == IGNORE:
            continue
        counts[int(g), int(p)] += 1
    return counts


def oracle_iou(counts: np.ndarray) -> dict[int, float | None]:
    k = counts.shape[0]
    out: dict[int, float | None] = {}
    for c in range(k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        out[c] = tp / (tp + fp + fn) if tp + fp + fn else None
    return out


def oracle_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("need both positives and negatives")
    wins = 0.0
    for sp in positives:
        for sn in negatives:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(positives) * len(negatives))


def oracle_route(base_argmax: np.ndarray, heads, tau: float,
                 arbitration: str = "max_confidence") -> np.ndarray:
    """Literal per-pixel rule: heads is a list of (step, ids, probs (C,H,W))."""
    h, w = base_argmax.shape
    out = np.array(base_argmax, dtype=np.int64, copy=True)
    for y in range(h):
        for x in range(w):
            candidates = []  # (prob, step, class_id)
            for step, ids, probs in heads:
                for channel, class_id in enumerate(ids):
                    p = float(probs[channel, y, x])
                    if p > tau:
                        candidates.append((p, step, int(class_id)))
            if not candidates:
                continue
            if arbitration == "max_confidence":
                # highest prob; ties -> higher step, then lower class id
                best = max(candidates, key=lambda c: (c[0], c[1], -c[2]))
            else:  # latest_step_first
                latest = max(c[1] for c in candidates)
                at_latest = [c for c in candidates if c[1] == latest]
                best = max(at_latest, key=lambda c: (c[0], -c[2]))
            out[y, x] = best[2]
    return out


def oracle_binary_counts(probs: np.ndarray, gt: np.ndarray, tau: float):
    tp = fp = fn = tn = 0
    flat_p = np.asarray(probs, dtype=np.float64).reshape(-1)
    flat_g = np.asarray(gt).reshape(-1)
    for p, g in zip(flat_p, flat_g):
        if g == IGNORE:
            continue
        predicted = p > tau
        actual = g == 1
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
