"""Base training, incremental sidecar optimization, and reference baselines.

Incremental training follows a strict freeze discipline: the backbone,
original head, and all earlier units are frozen and digest-snapshotted
before the first update; only the current unit's branch and head receive
gradients. The digest is re-verified during and after training, and any
bitwise change in a frozen parameter aborts the run.

Optimizer everywhere is SGD with momentum and polynomial learning-rate
decay. Batch order is drawn from per-(seed, epoch) derived streams so
interrupted runs resume bit-identically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .data import BACKGROUND_ID, IGNORE_INDEX, SegmentationDataset
from .determinism import derive_seed
from .errors import (
    ConfigurationError,
    DataError,
    EmptySupervisionError,
    FrozenViolationError,
    ScheduleError,
    TrainingDivergenceError,
)
from .freezing import freeze_base, max_frozen_gradient, snapshot_frozen, verify_frozen
from .model import (
    IncrementalUnit,
    SegmentationModel,
    init_parameters,
    replace_head_classifier,
)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 8
    poly_power: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.poly_power < 0:
            raise ConfigurationError(f"poly_power must be >= 0, got {self.poly_power}")

    def epoch_lr(self, epoch: int) -> float:
        return self.learning_rate * (1.0 - epoch / self.epochs) ** self.poly_power

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "poly_power": self.poly_power,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(
            learning_rate=float(data["learning_rate"]),
            momentum=float(data["momentum"]),
            epochs=int(data["epochs"]),
            batch_size=int(data["batch_size"]),
            poly_power=float(data["poly_power"]),
            seed=int(data["seed"]),
        )


@dataclass
class StepRecord:
    """Outcome of one training phase, persisted into the run manifest."""

    step_index: int
    classes_added: tuple[int, ...]
    initial_loss: float
    final_loss: float
    num_batches: int
    max_frozen_grad: float
    wall_time: float
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "classes_added": list(self.classes_added),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "num_batches": self.num_batches,
            "max_frozen_grad": self.max_frozen_grad,
            "wall_time": self.wall_time,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StepRecord":
        return cls(
            step_index=int(data["step_index"]),
            classes_added=tuple(data["classes_added"]),
            initial_loss=float(data["initial_loss"]),
            final_loss=float(data["final_loss"]),
            num_batches=int(data["num_batches"]),
            max_frozen_grad=float(data["max_frozen_grad"]),
            wall_time=float(data["wall_time"]),
            checkpoint=data.get("checkpoint"),
        )


def dataset_tensors(dataset: SegmentationDataset) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.ascontiguousarray(dataset.images.transpose(0, 3, 1, 2)))
    labels = torch.from_numpy(dataset.labels.astype(np.int64))
    return images, labels


def incremental_loss(probabilities, label_map, novel_class_ids,
                     eps: float = PROB_EPS):
    """Mean binary cross-entropy between novel-class membership and confidence.

    Every non-ignore pixel contributes: positives (label equal to a novel id)
    push that channel's probability up, all other valid pixels push it down.
    Probabilities are clamped to [eps, 1 - eps] before the log. Accepts
    ``(C, H, W)`` or batched ``(N, C, H, W)`` maps (single-channel maps may
    drop the C axis); returns a float for numpy inputs, a differentiable
    scalar for torch inputs.
    """
    ids = tuple(int(c) for c in novel_class_ids)
    if not ids:
        raise ScheduleError("novel_class_ids must be non-empty")
    torch_in = isinstance(probabilities, torch.Tensor)
    probs = probabilities if torch_in else torch.as_tensor(
        np.asarray(probabilities, dtype=np.float64))
    labels = label_map if isinstance(label_map, torch.Tensor) else torch.as_tensor(
        np.asarray(label_map, dtype=np.int64))

    if probs.dim() == labels.dim():  # channel axis omitted for a single class
        if len(ids) != 1:
            raise DataError("channel-less probability map requires exactly one novel class")
        probs = probs.unsqueeze(-3)
    channel_axis = probs.dim() - 3
    if probs.shape[channel_axis] != len(ids):
        raise DataError(
            f"expected {len(ids)} probability channels, got {probs.shape[channel_axis]}")
    if probs.shape[-2:] != labels.shape[-2:]:
        raise DataError(f"spatial dims differ: {tuple(probs.shape)} vs {tuple(labels.shape)}")

    valid = labels != IGNORE_INDEX
    num_valid = int(valid.sum())
    if num_valid == 0:
        raise EmptySupervisionError("label map has no valid (non-ignore) pixels")
    targets = torch.stack([(labels == c) for c in ids], dim=channel_axis).to(probs.dtype)
    clamped = probs.clamp(eps, 1.0 - eps)
    bce = -(targets * torch.log(clamped) + (1.0 - targets) * torch.log1p(-clamped))
    masked = bce * valid.unsqueeze(channel_axis).to(probs.dtype)
    loss = masked.sum() / num_valid
    return loss if torch_in else float(loss)


def _check_finite(loss_value: float, epoch: int) -> None:
    if not math.isfinite(loss_value):
        raise TrainingDivergenceError(f"loss became {loss_value} at epoch {epoch}", epoch=epoch)


def _log_epoch(log_path: Path | None, epoch: int, loss: float, lr: float) -> None:
    if log_path is None:
        return
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a") as fh:
        fh.write(json.dumps({"epoch": epoch, "loss": loss, "lr": lr}) + "\n")


def _run_sgd(
    parameters: list[torch.nn.Parameter],
    batch_loss: Callable[[torch.Tensor], torch.Tensor],
    num_examples: int,
    config: TrainConfig,
    seed_salt: int,
    log_path: Path | None = None,
    on_batch: Callable[[], None] | None = None,
    on_epoch_end: Callable[[int], None] | None = None,
) -> int:
    optimizer = torch.optim.SGD(parameters, lr=config.learning_rate, momentum=config.momentum)
    batches_run = 0
    for epoch in range(config.epochs):
        lr = config.epoch_lr(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, seed_salt, epoch)))
        order = rng.permutation(num_examples)
        epoch_losses = []
        for start in range(0, num_examples, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size].copy())
            optimizer.zero_grad()
            loss = batch_loss(idx)
            loss.backward()
            if on_batch is not None:
                on_batch()
            optimizer.step()
            value = float(loss.detach())
            _check_finite(value, epoch)
            epoch_losses.append(value)
            batches_run += 1
        _log_epoch(log_path, epoch, float(np.mean(epoch_losses)), lr)
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return batches_run


def _mean_ce_loss(model: SegmentationModel, images: torch.Tensor,
                  labels: torch.Tensor, batch_size: int) -> float:
    was_training = model.training
    model.eval()
    losses, weights = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = model(images[start:start + batch_size])
            target = labels[start:start + batch_size]
            losses.append(float(F.cross_entropy(logits, target, ignore_index=IGNORE_INDEX)))
            weights.append(len(target))
    model.train(was_training)
    return float(np.average(losses, weights=weights))


def _check_labels_within(dataset: SegmentationDataset, allowed: set[int], context: str) -> None:
    present = set(int(v) for v in np.unique(dataset.labels))
    extra = present - allowed - {IGNORE_INDEX}
    if extra:
        raise DataError(f"{context}: labels {sorted(extra)} outside expected set")


def train_base(model: SegmentationModel, dataset: SegmentationDataset,
               config: TrainConfig, checkpoint_path: str | Path | None = None,
               log_path: str | Path | None = None) -> StepRecord:
    """Supervised base-phase training of the whole backbone and head."""
    config.validate()
    _check_labels_within(dataset, set(range(model.num_classes)), "base dataset")
    images, labels = dataset_tensors(dataset)
    start_time = time.perf_counter()
    initial = _mean_ce_loss(model, images, labels, config.batch_size)

    model.train()
    for param in model.parameters():
        param.requires_grad_(True)

    def batch_loss(idx: torch.Tensor) -> torch.Tensor:
        logits, _ = model(images[idx])
        return F.cross_entropy(logits, labels[idx], ignore_index=IGNORE_INDEX)

    batches = _run_sgd(list(model.parameters()), batch_loss, len(dataset), config,
                       seed_salt=11, log_path=Path(log_path) if log_path else None)
    model.eval()
    final = _mean_ce_loss(model, images, labels, config.batch_size)
    record = StepRecord(
        step_index=0,
        classes_added=tuple(range(model.num_classes)),
        initial_loss=initial,
        final_loss=final,
        num_batches=batches,
        max_frozen_grad=0.0,
        wall_time=time.perf_counter() - start_time,
    )
    if checkpoint_path is not None:
        record.checkpoint = str(save_checkpoint(checkpoint_path, model, (), seed=config.seed))
    return record


def train_incremental(
    model: SegmentationModel,
    unit: IncrementalUnit,
    dataset: SegmentationDataset,
    config: TrainConfig,
    prior_units: Sequence[IncrementalUnit] = (),
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    digest_path: str | Path | None = None,
    grad_observer: Callable[[float], None] | None = None,
) -> StepRecord:
    """One incremental step: optimize only the current unit's parameters.

    The step dataset must carry the unit's step tag (replay-free by
    construction) and label pixels only as the unit's novel classes, the
    not-novel target, or ignore. Frozen parameters are digest-verified at
    every epoch boundary and after training; any change aborts with a
    :class:`FrozenViolationError` naming the parameter.
    """
    config.validate()
    if dataset.step_tag != unit.step_index:
        raise ScheduleError(
            f"dataset is tagged for step {dataset.step_tag}, unit trains step {unit.step_index}")
    _check_labels_within(dataset, {BACKGROUND_ID, *unit.novel_class_ids}, "step dataset")

    units = (*tuple(prior_units), unit)
    partition = freeze_base(model, units)
    digest = snapshot_frozen(model, units, partition)
    if digest_path is not None:
        digest_path = Path(digest_path)
        digest_path.parent.mkdir(parents=True, exist_ok=True)
        digest_path.write_text(digest.to_manifest())
    images, labels = dataset_tensors(dataset)
    start_time = time.perf_counter()

    def eval_loss() -> float:
        was_training = unit.training
        unit.eval()
        losses, weights = [], []
        with torch.no_grad():
            for start in range(0, len(images), config.batch_size):
                probs = unit(model.stem(images[start:start + config.batch_size]))
                target = labels[start:start + config.batch_size]
                losses.append(float(incremental_loss(probs, target, unit.novel_class_ids)))
                weights.append(len(target))
        unit.train(was_training)
        return float(np.average(losses, weights=weights))

    initial = eval_loss()
    model.eval()
    unit.train()
    observed_max_grad = 0.0

    def batch_loss(idx: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():  # frozen stem: features are constants to the unit
            feats = model.stem(images[idx])
        probs = unit(feats)
        return incremental_loss(probs, labels[idx], unit.novel_class_ids)

    def on_batch() -> None:
        nonlocal observed_max_grad
        frozen_grad = max_frozen_gradient(model, units, partition)
        observed_max_grad = max(observed_max_grad, frozen_grad)
        if grad_observer is not None:
            grad_observer(frozen_grad)

    def on_epoch_end(epoch: int) -> None:
        ok, mismatch = verify_frozen(model, units, partition, digest)
        if not ok:
            raise FrozenViolationError(
                f"frozen parameter {mismatch} changed during epoch {epoch}", parameter=mismatch)

    trainable = [p for p in unit.parameters() if p.requires_grad]
    batches = _run_sgd(trainable, batch_loss, len(dataset), config,
                       seed_salt=13 + unit.step_index,
                       log_path=Path(log_path) if log_path else None,
                       on_batch=on_batch, on_epoch_end=on_epoch_end)
    unit.eval()
    final = eval_loss()

    ok, mismatch = verify_frozen(model, units, partition, digest)
    if not ok:
        raise FrozenViolationError(f"frozen parameter {mismatch} changed during training",
                                   parameter=mismatch)
    record = StepRecord(
        step_index=unit.step_index,
        classes_added=unit.novel_class_ids,
        initial_loss=initial,
        final_loss=final,
        num_batches=batches,
        max_frozen_grad=observed_max_grad,
        wall_time=time.perf_counter() - start_time,
    )
    if checkpoint_path is not None:
        record.checkpoint = str(save_checkpoint(checkpoint_path, model, units, seed=config.seed))
    return record


def widen_head(model: SegmentationModel, num_total_classes: int, seed: int) -> SegmentationModel:
    """Append output channels for new classes, keeping learned channels.

    New rows are initialized with the same fan-in scheme used at build time.
    """
    if num_total_classes <= model.num_classes:
        raise ConfigurationError(
            f"cannot widen head from {model.num_classes} to {num_total_classes} channels")
    old = model.head.classify
    new = replace_head_classifier(model, num_total_classes)
    generator = torch.Generator().manual_seed(derive_seed(seed, 303, num_total_classes))
    with torch.no_grad():
        fan_in = new.weight[0].numel()
        new.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
        new.bias.zero_()
        new.weight[: old.out_channels].copy_(old.weight)
        new.bias[: old.out_channels].copy_(old.bias)
    return model


def train_finetune_baseline(
    model: SegmentationModel,
    dataset: SegmentationDataset,
    config: TrainConfig,
    novel_class_ids: Sequence[int],
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> StepRecord:
    """Naive sequential fine-tuning: widen the head, then update everything.

    The loss is plain cross-entropy restricted to pixels labeled with the
    step's novel classes; nothing anchors old knowledge, which is the point
    of the lower-bound baseline.
    """
    config.validate()
    ids = tuple(sorted(int(c) for c in novel_class_ids))
    if not ids:
        raise ScheduleError("novel_class_ids must be non-empty")
    if dataset.step_tag is None:
        raise ScheduleError("fine-tuning consumes a step-filtered dataset")
    needed = max(ids) + 1
    if needed > model.num_classes:
        widen_head(model, needed, config.seed)
    images, labels = dataset_tensors(dataset)
    # supervise only the novel pixels; everything else is ignored
    novel_mask = torch.zeros_like(labels, dtype=torch.bool)
    for class_id in ids:
        novel_mask |= labels == class_id
    if not bool(novel_mask.any()):
        raise EmptySupervisionError(f"step dataset has no pixels of classes {ids}")
    targets = torch.where(novel_mask, labels, torch.as_tensor(IGNORE_INDEX, dtype=labels.dtype))

    start_time = time.perf_counter()
    initial = _mean_ce_loss(model, images, targets, config.batch_size)
    model.train()
    for param in model.parameters():
        param.requires_grad_(True)

    def batch_loss(idx: torch.Tensor) -> torch.Tensor:
        logits, _ = model(images[idx])
        return F.cross_entropy(logits, targets[idx], ignore_index=IGNORE_INDEX)

    batches = _run_sgd(list(model.parameters()), batch_loss, len(dataset), config,
                       seed_salt=17 + int(dataset.step_tag),
                       log_path=Path(log_path) if log_path else None)
    model.eval()
    final = _mean_ce_loss(model, images, targets, config.batch_size)
    record = StepRecord(
        step_index=int(dataset.step_tag),
        classes_added=ids,
        initial_loss=initial,
        final_loss=final,
        num_batches=batches,
        max_frozen_grad=0.0,
        wall_time=time.perf_counter() - start_time,
    )
    if checkpoint_path is not None:
        record.checkpoint = str(save_checkpoint(checkpoint_path, model, (), seed=config.seed))
    return record


def train_joint_baseline(
    model_config,
    datasets: Sequence[SegmentationDataset],
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[SegmentationModel, StepRecord]:
    """Retrain from scratch on the union of all step datasets (upper bound)."""
    from .model import build_model  # deferred to keep module import order simple

    config.validate()
    if not datasets:
        raise ConfigurationError("joint training needs at least one dataset")
    images = np.concatenate([d.images for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    union = SegmentationDataset(images, labels, datasets[0].class_ids)
    class_ids = sorted(int(v) for v in np.unique(labels) if v != IGNORE_INDEX)
    num_classes = max(class_ids) + 1
    joint_config = replace(model_config, num_base_classes=num_classes)
    model = build_model(joint_config, config.seed)
    record = train_base(model, union, config, checkpoint_path=checkpoint_path,
                        log_path=log_path)
    return model, record


def reinitialize(model: SegmentationModel, seed: int) -> SegmentationModel:
    """Reset parameters to the build-time initialization for the given seed."""
    init_parameters(model, derive_seed(seed, 0))
    return model
