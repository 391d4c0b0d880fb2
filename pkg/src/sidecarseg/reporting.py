"""Rendering: trajectory tables, threshold/ROC plots, and mask exports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .errors import EvaluationError  # noqa: E402
from .evaluation import route_single  # noqa: E402
from .routing import RoutingConfig, save_label_image  # noqa: E402


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def two_part_table(trajectories: dict[str, dict]) -> str:
    """Overall performance on top, base-class stability below, one row per
    method and one column per step."""
    if not trajectories:
        raise EvaluationError("no trajectories to tabulate")
    reference = next(iter(trajectories.values()))
    headers = [f"Step {s} ({n} cls)"
               for s, n in zip(reference["step_indices"], reference["num_classes"])]
    name_width = max(12, *(len(m) for m in trajectories))
    col_width = max(14, *(len(h) for h in headers))

    def row(name: str, values: Sequence) -> str:
        cells = [f"{_fmt(v):>{col_width}}" for v in values]
        return f"{name:<{name_width}} | " + " | ".join(cells)

    lines = [f"{'Method':<{name_width}} | " + " | ".join(f"{h:>{col_width}}" for h in headers)]
    lines.append("-" * len(lines[0]))
    lines.append("Part I: Overall Performance (mIoU on All Classes)")
    for method, traj in trajectories.items():
        lines.append(row(method, traj["overall_miou"]))
    lines.append("Part II: Base Class Stability (mIoU on Base Classes Only)")
    for method, traj in trajectories.items():
        lines.append(row(method, traj["base_miou"]))
    lines.append("")
    for method, traj in trajectories.items():
        lines.append(f"{method}: base-class retention at final step = "
                     f"{traj['retention_ratio']:.4f}")
    return "\n".join(lines) + "\n"


def sweep_table(summary: dict) -> str:
    lines = [f"{'tau':>6} {'iou':>8} {'precision':>10} {'recall':>8} {'f1':>8}"]
    for tau, iou, prec, rec, f1 in zip(summary["grid"], summary["iou"],
                                       summary["precision"], summary["recall"],
                                       summary["f1"]):
        lines.append(f"{tau:>6.2f} {iou:>8.4f} {prec:>10.4f} {rec:>8.4f} {f1:>8.4f}")
    lines.append(f"tau* = {summary['tau_star']:.2f} (argmax IoU), "
                 f"recorded tau = {summary['chosen_tau']:.2f}, AUC = {summary['auc']:.4f}")
    return "\n".join(lines) + "\n"


def ablation_table(rows: list[dict]) -> str:
    header = (f"{'Connection':<12} | {'Baseline mIoU':>14} | "
              f"{'Base mIoU':>10} | {'Overall mIoU':>13}")
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['connection_point']:<12} | {row['baseline_miou']:>14.4f} | "
                     f"{row['base_miou']:>10.4f} | {row['overall_miou']:>13.4f}")
    return "\n".join(lines) + "\n"


def plot_trajectory(trajectories: dict[str, dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, traj in trajectories.items():
        ax.plot(traj["num_classes"], traj["overall_miou"], marker="o", label=method)
    ax.set_xlabel("number of classes")
    ax.set_ylabel("overall mIoU")
    ax.set_title("Continual learning trajectory")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(summary["grid"], summary["iou"], marker="o", label="IoU")
    ax.plot(summary["grid"], summary["precision"], marker="s", label="precision")
    ax.plot(summary["grid"], summary["recall"], marker="^", label="recall")
    ax.axvline(summary["tau_star"], color="gray", linestyle="--",
               label=f"tau*={summary['tau_star']:.2f}")
    ax.set_xlabel("decision threshold tau")
    ax.set_ylabel("metric value")
    ax.set_title(f"Threshold sweep (class {summary['class_id']})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    roc = np.asarray(summary["roc"])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(roc[:, 0], roc[:, 1], label=f"AUC = {summary['auc']:.4f}")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("Novel-class head ROC")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def export_masks(model, units, images: np.ndarray, config: RoutingConfig,
                 out_dir: str | Path, count: int = 4,
                 class_ids: Sequence[int] | None = None) -> list[Path]:
    """Write routed predictions for a sample batch as id PNGs + palette."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    palette = out_dir / "palette.txt"
    for i in range(min(count, len(images))):
        routed = route_single(model, units, images[i], config)
        written.append(save_label_image(routed.label_map, out_dir / f"mask_{i:03d}.png",
                                        palette_path=palette, class_ids=class_ids))
    return written
