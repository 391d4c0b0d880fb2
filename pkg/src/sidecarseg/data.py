"""Synthetic scene benchmark, task schedules, and label-map dataset IO.

The generator renders desk-scale scenes over an 8-class universe: a noisy
background, three textured region families (striped or checkered patches
that need surrounding context), and four geometric shape families (disk,
square, triangle, ring) whose identity is carried by crisp boundaries.
Region classes make natural base classes; shape classes make natural
incremental ones.

Datasets round-trip through a directory layout of ``images/<stem>.png``
plus single-channel id label images ``labels/<stem>.png`` (ignore = 255).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .determinism import derive_seed
from .errors import (
    ConfigurationError,
    DataError,
    EmptyStepError,
    IngestionError,
    ScheduleError,
)

IGNORE_INDEX = 255
BACKGROUND_ID = 0

# (family name, kind, RGB color); painted in list order, shapes over regions
CLASS_FAMILIES = (
    ("background", "background", (0.45, 0.45, 0.45)),
    ("stripes_h", "region", (0.75, 0.30, 0.30)),
    ("stripes_v", "region", (0.30, 0.70, 0.35)),
    ("checker", "region", (0.30, 0.40, 0.80)),
    ("disk", "shape", (0.85, 0.80, 0.25)),
    ("square", "shape", (0.25, 0.78, 0.80)),
    ("triangle", "shape", (0.80, 0.30, 0.75)),
    ("ring", "shape", (0.90, 0.55, 0.20)),
)
NUM_SYNTHETIC_CLASSES = len(CLASS_FAMILIES)


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for the synthetic scene generator."""

    height: int = 48
    width: int = 48
    min_objects: int = 2
    max_objects: int = 4
    region_probability: float = 0.65
    noise_level: float = 0.03
    background_class_id: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigurationError("scene dims must be at least 16x16")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError(
                f"need 0 <= min_objects <= max_objects, got {self.min_objects}..{self.max_objects}")
        if not 0.0 <= self.region_probability <= 1.0:
            raise ConfigurationError("region_probability must be in [0, 1]")
        if self.background_class_id == IGNORE_INDEX or not 0 <= self.background_class_id < IGNORE_INDEX:
            raise ConfigurationError(
                f"background class id {self.background_class_id} collides with reserved ids")

    def class_ids(self) -> tuple[int, ...]:
        """Universe ids: background at its configured id, families at the rest."""
        others = [i for i in range(NUM_SYNTHETIC_CLASSES + 1) if i != self.background_class_id]
        ids = [self.background_class_id] + others[: NUM_SYNTHETIC_CLASSES - 1]
        return tuple(sorted(ids))

    def family_ids(self) -> dict[str, int]:
        others = [i for i in range(NUM_SYNTHETIC_CLASSES + 1) if i != self.background_class_id]
        mapping = {"background": self.background_class_id}
        for (name, _, _), class_id in zip(CLASS_FAMILIES[1:], others):
            mapping[name] = class_id
        return mapping


@dataclass
class SegmentationDataset:
    """In-memory image/label pairs; ``step_tag`` marks a filtered step dataset."""

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N, H, W) uint8, ids + IGNORE_INDEX
    class_ids: tuple[int, ...]
    step_tag: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 3 or len(self.images) != len(self.labels):
            raise DataError(
                f"inconsistent dataset arrays: images {self.images.shape}, labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices: Sequence[int]) -> "SegmentationDataset":
        idx = np.asarray(indices)
        return SegmentationDataset(self.images[idx], self.labels[idx],
                                   self.class_ids, self.step_tag)


def quantize_to_8bit(images: np.ndarray) -> np.ndarray:
    """Snap floats in [0, 1] onto the 256-level grid, exactly as PNG IO does.

    Generation and loading share this expression so an export/import
    round-trip is bitwise identical.
    """
    levels = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.astype(np.float32) / np.float32(255.0)


def _paint_region(img, labels, family, class_id, color, rng):
    h, w = labels.shape
    rh = int(rng.integers(h // 3, int(h * 0.55) + 1))
    rw = int(rng.integers(w // 3, int(w * 0.55) + 1))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    yy, xx = np.mgrid[r0:r0 + rh, c0:c0 + rw]
    if family == "stripes_h":
        phase = (yy // 3) % 2
    elif family == "stripes_v":
        phase = (xx // 3) % 2
    else:  # checker
        phase = ((yy // 3) + (xx // 3)) % 2
    tone = np.where(phase == 0, 0.12, -0.12)[..., None]
    img[r0:r0 + rh, c0:c0 + rw] = np.asarray(color) + tone
    labels[r0:r0 + rh, c0:c0 + rw] = class_id


def _shape_mask(family, h, w, rng) -> np.ndarray:
    radius = int(rng.integers(max(3, h // 9), max(4, h // 5) + 1))
    cy = int(rng.integers(radius, h - radius))
    cx = int(rng.integers(radius, w - radius))
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if family == "disk":
        return dy * dy + dx * dx <= radius * radius
    if family == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius
    if family == "triangle":
        top = cy - radius
        return (yy >= top) & (yy <= cy + radius) & (np.abs(dx) <= (yy - top) * 0.5)
    if family == "ring":
        dist2 = dy * dy + dx * dx
        inner = max(1, int(radius * 0.55))
        return (dist2 <= radius * radius) & (dist2 >= inner * inner)
    raise ConfigurationError(f"unknown shape family {family!r}")


def _render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    ids = spec.family_ids()
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = CLASS_FAMILIES[0][2]
    labels = np.full((h, w), ids["background"], dtype=np.uint8)

    for name, kind, color in CLASS_FAMILIES[1:4]:
        if rng.random() < spec.region_probability:
            _paint_region(img, labels, name, ids[name], color, rng)

    shape_families = [f for f in CLASS_FAMILIES if f[1] == "shape"]
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        name, _, color = shape_families[int(rng.integers(0, len(shape_families)))]
        mask = _shape_mask(name, h, w, rng)
        img[mask] = color
        labels[mask] = ids[name]

    img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return quantize_to_8bit(img), labels


def generate_dataset(spec: SceneSpec, count: int) -> SegmentationDataset:
    """Render ``count`` scenes; per-image seeds derive from (spec.seed, index)."""
    spec.validate()
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    images = np.empty((count, spec.height, spec.width, 3), dtype=np.float32)
    labels = np.empty((count, spec.height, spec.width), dtype=np.uint8)
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(derive_seed(spec.seed, 7_000, i)))
        images[i], labels[i] = _render_scene(spec, rng)
    return SegmentationDataset(images, labels, spec.class_ids())


@dataclass(frozen=True)
class TaskSchedule:
    """Base class set plus ordered per-step novel class sets."""

    base_classes: tuple[int, ...]
    steps: tuple[tuple[int, tuple[int, ...]], ...]  # (step_index, novel ids)
    protocol_name: str

    @property
    def num_tasks(self) -> int:
        return 1 + len(self.steps)

    def novel_ids(self, step: int) -> tuple[int, ...]:
        for index, ids in self.steps:
            if index == step:
                return ids
        raise ScheduleError(f"schedule {self.protocol_name!r} has no step {step}")

    def classes_through(self, step: int) -> tuple[int, ...]:
        """C_0 union C_1..C_step, ascending."""
        ids = set(self.base_classes)
        for index, novel in self.steps:
            if index <= step:
                ids.update(novel)
        return tuple(sorted(ids))

    def to_dict(self) -> dict:
        return {
            "base_classes": list(self.base_classes),
            "steps": [{"step": t, "novel_ids": list(ids)} for t, ids in self.steps],
            "protocol_name": self.protocol_name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSchedule":
        return cls(
            base_classes=tuple(data["base_classes"]),
            steps=tuple((int(s["step"]), tuple(s["novel_ids"])) for s in data["steps"]),
            protocol_name=str(data["protocol_name"]),
        )


_PROTOCOL_RE = re.compile(r"^(\d+)-(\d+)(?:x(\d+))?$")


def build_schedule(universe: Iterable[int], protocol: str) -> TaskSchedule:
    """Parse a ``B-N`` or ``B-NxS`` curriculum over an ordered class universe.

    The lowest B ids form the base set; remaining ids are added N per step
    in ascending order. Without an explicit step count the universe must be
    exhausted; with one, B + N*S must cover it exactly.
    """
    ids = sorted(int(c) for c in universe)
    if len(set(ids)) != len(ids):
        raise ScheduleError("universe contains duplicate ids")
    if IGNORE_INDEX in ids:
        raise ScheduleError(f"universe must not contain the ignore index {IGNORE_INDEX}")
    match = _PROTOCOL_RE.match(protocol.strip())
    if not match:
        raise ScheduleError(f"malformed protocol {protocol!r}; expected B-N or B-NxS")
    base_count, per_step, explicit_steps = (int(match.group(1)), int(match.group(2)),
                                            match.group(3))
    if base_count < 1 or base_count > len(ids):
        raise ScheduleError(f"base class count {base_count} out of range for |universe|={len(ids)}")
    remaining = len(ids) - base_count
    if per_step == 0:
        if explicit_steps not in (None, "0") or remaining != 0:
            raise ScheduleError(f"protocol {protocol!r} leaves {remaining} classes unscheduled")
        num_steps = 0
    elif explicit_steps is not None:
        num_steps = int(explicit_steps)
        if base_count + per_step * num_steps != len(ids):
            raise ScheduleError(
                f"protocol {protocol!r} covers {base_count + per_step * num_steps} "
                f"classes but the universe has {len(ids)}")
    else:
        if remaining % per_step:
            raise ScheduleError(
                f"protocol {protocol!r} cannot evenly add {remaining} classes {per_step} at a time")
        num_steps = remaining // per_step

    base = tuple(ids[:base_count])
    steps = tuple(
        (t, tuple(ids[base_count + (t - 1) * per_step: base_count + t * per_step]))
        for t in range(1, num_steps + 1)
    )
    return TaskSchedule(base, steps, protocol)


def restrict_labels(dataset: SegmentationDataset,
                    class_ids: Iterable[int]) -> SegmentationDataset:
    """Relabel pixels of classes outside ``class_ids`` to background.

    This is the background-shift view of a dataset: classes not yet (or no
    longer) annotated simply look like background. Ignore pixels persist.
    """
    keep = np.zeros(256, dtype=bool)
    for class_id in class_ids:
        keep[class_id] = True
    keep[IGNORE_INDEX] = True
    labels = np.where(keep[dataset.labels], dataset.labels, np.uint8(BACKGROUND_ID))
    return SegmentationDataset(dataset.images, labels.astype(np.uint8),
                               dataset.class_ids, dataset.step_tag)


def filter_for_step(dataset: SegmentationDataset, schedule: TaskSchedule,
                    step: int) -> SegmentationDataset:
    """Build the step dataset: images containing the step's novel classes,
    with every other non-ignore pixel relabeled to the not-novel target.

    The result carries ``step_tag=step``; trainers check the tag so no other
    step's data can reach an incremental update.
    """
    if not 1 <= step <= len(schedule.steps):
        raise ScheduleError(f"step {step} outside schedule with {len(schedule.steps)} steps")
    novel = schedule.novel_ids(step)
    novel_mask = np.isin(dataset.labels, novel)
    present = novel_mask.any(axis=(1, 2))
    if not present.any():
        raise EmptyStepError(f"no image contains any of classes {novel}")
    labels = np.where(novel_mask | (dataset.labels == IGNORE_INDEX),
                      dataset.labels, np.uint8(BACKGROUND_ID))
    return SegmentationDataset(dataset.images[present], labels[present].astype(np.uint8),
                               dataset.class_ids, step_tag=step)


def save_labelmap_dataset(dataset: SegmentationDataset, directory: str | Path) -> Path:
    """Export as ``images/<stem>.png`` + ``labels/<stem>.png`` id maps."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        stem = f"scene_{i:05d}"
        rgb = np.round(dataset.images[i] * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(directory / "images" / f"{stem}.png")
        Image.fromarray(dataset.labels[i], mode="L").save(directory / "labels" / f"{stem}.png")
    return directory


def load_labelmap_dataset(directory: str | Path,
                          universe: Iterable[int] | None = None) -> SegmentationDataset:
    """Load an exported dataset, validating pairing and label ids."""
    directory = Path(directory)
    image_dir, label_dir = directory / "images", directory / "labels"
    if not image_dir.is_dir() or not label_dir.is_dir():
        raise IngestionError(f"{directory} must contain images/ and labels/ subdirectories")
    image_files = {p.stem: p for p in sorted(image_dir.iterdir()) if p.is_file()}
    label_files = {p.stem: p for p in sorted(label_dir.glob("*.png"))}
    unpaired = sorted(set(image_files) ^ set(label_files))
    if unpaired:
        raise IngestionError(f"unpaired stems: {unpaired[:5]}")
    if not image_files:
        raise IngestionError(f"{directory} holds no image/label pairs")

    allowed = None
    if universe is not None:
        allowed = np.zeros(256, dtype=bool)
        for class_id in universe:
            allowed[class_id] = True
        allowed[IGNORE_INDEX] = True

    images, labels = [], []
    for stem in sorted(image_files):
        rgb = np.asarray(Image.open(image_files[stem]).convert("RGB"), dtype=np.uint8)
        label = np.asarray(Image.open(label_files[stem]), dtype=np.uint8)
        if label.ndim != 2 or label.shape != rgb.shape[:2]:
            raise IngestionError(f"label for {stem!r} is not a single-channel map of image size")
        if allowed is not None and not allowed[label].all():
            bad = sorted(int(v) for v in np.unique(label[~allowed[label]]))
            raise DataError(f"label ids {bad} in {stem!r} fall outside the universe")
        images.append(rgb.astype(np.float32) / np.float32(255.0))
        labels.append(label)
    universe_ids = tuple(universe) if universe is not None else tuple(
        sorted(int(v) for v in np.unique(np.stack(labels)) if v != IGNORE_INDEX))
    return SegmentationDataset(np.stack(images), np.stack(labels), universe_ids)


def evaluation_spec(spec: SceneSpec) -> SceneSpec:
    """Same generator knobs, disjoint seed stream: a held-out split."""
    return replace(spec, seed=derive_seed(spec.seed, 90_001))
