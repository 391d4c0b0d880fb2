"""Desk-scale multi-branch segmentation backbone and incremental sidecar units.

The backbone shares a strided convolutional stem, then splits into three
branches: ``detail`` (full stem resolution, semantic detail), ``context``
(extra downsampling for context aggregation), and ``boundary`` (narrow,
high-frequency edges). Branch outputs are fused and decoded by the original
head into base-class logits at input resolution.

Each incremental step attaches an :class:`IncrementalUnit`: a structural
clone of one backbone branch plus a dedicated head that emits per-pixel
confidence maps for that step's novel classes. Normalization everywhere is
GroupNorm: no running statistics, so a frozen module is bitwise constant
no matter what trains next to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .determinism import derive_seed
from .errors import ConfigurationError, DimensionError, ScheduleError

BRANCH_NAMES = ("detail", "context", "boundary")

# stem reduces resolution by 2x; the context branch adds one more 2x stage
STEM_FACTOR = 2
DOWNSAMPLE_FACTOR = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the parameter set is a pure function of these."""

    input_channels: int = 3
    stem_width: int = 16
    branch_widths: tuple[int, int, int] = (24, 24, 12)  # (detail, context, boundary)
    num_blocks_per_branch: int = 2
    num_base_classes: int = 6
    connection_point: str = "boundary"

    def validate(self) -> None:
        widths = (self.input_channels, self.stem_width, *self.branch_widths,
                  self.num_blocks_per_branch)
        if len(self.branch_widths) != 3:
            raise ConfigurationError("branch_widths must name (detail, context, boundary)")
        if any(int(w) < 1 for w in widths):
            raise ConfigurationError(f"all widths and block counts must be >= 1, got {widths}")
        if self.num_base_classes < 2:
            raise ConfigurationError(
                f"num_base_classes must be >= 2, got {self.num_base_classes}")
        if self.connection_point not in BRANCH_NAMES:
            raise ConfigurationError(
                f"connection_point must be one of {BRANCH_NAMES}, got {self.connection_point!r}")

    def branch_width(self, name: str) -> int:
        if name not in BRANCH_NAMES:
            raise ConfigurationError(f"unknown branch {name!r}")
        return self.branch_widths[BRANCH_NAMES.index(name)]

    @property
    def fused_width(self) -> int:
        return 2 * self.stem_width

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "stem_width": self.stem_width,
            "branch_widths": list(self.branch_widths),
            "num_blocks_per_branch": self.num_blocks_per_branch,
            "num_base_classes": self.num_base_classes,
            "connection_point": self.connection_point,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            input_channels=int(data["input_channels"]),
            stem_width=int(data["stem_width"]),
            branch_widths=tuple(int(w) for w in data["branch_widths"]),
            num_blocks_per_branch=int(data["num_blocks_per_branch"]),
            num_base_classes=int(data["num_base_classes"]),
            connection_point=str(data["connection_point"]),
        )


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(1, channels)


class ConvBlock(nn.Module):
    """3x3 conv + GroupNorm + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3,
                              stride=stride, padding=1, bias=False)
        self.norm = _norm(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.norm2 = _norm(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + x)


class Branch(nn.Module):
    """A stack of residual blocks, optionally run at half resolution.

    The context branch downsamples on entry and bilinearly upsamples its
    output back to stem resolution so all branches fuse on the same grid.
    """

    def __init__(self, in_channels: int, width: int, num_blocks: int, downsamples: bool):
        super().__init__()
        self.downsamples = downsamples
        self.entry = ConvBlock(in_channels, width, stride=2 if downsamples else 1)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(num_blocks)])

    def forward(self, x):
        out = self.blocks(self.entry(x))
        if self.downsamples:
            out = F.interpolate(out, scale_factor=2, mode="bilinear", align_corners=False)
        return out


class Head(nn.Module):
    """3x3 refinement followed by a 1x1 classifier."""

    def __init__(self, in_channels: int, hidden: int, num_outputs: int):
        super().__init__()
        self.project = ConvBlock(in_channels, hidden)
        self.classify = nn.Conv2d(hidden, num_outputs, kernel_size=1)

    def forward(self, x):
        return self.classify(self.project(x))


def _build_branch(config: ModelConfig, name: str) -> Branch:
    return Branch(
        in_channels=config.stem_width,
        width=config.branch_width(name),
        num_blocks=config.num_blocks_per_branch,
        downsamples=(name == "context"),
    )


class SegmentationModel(nn.Module):
    """Three-branch backbone plus the original segmentation head.

    ``forward`` returns base-class logits at input resolution together with
    the feature map of the configured connection-point branch, which is the
    tap that incremental units structurally mirror.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        super().__init__()
        self.config = config
        self.num_classes = config.num_base_classes
        self.stem = nn.Sequential(
            ConvBlock(config.input_channels, config.stem_width, stride=2),
            ConvBlock(config.stem_width, config.stem_width, stride=1),
        )
        self.detail = _build_branch(config, "detail")
        self.context = _build_branch(config, "context")
        self.boundary = _build_branch(config, "boundary")
        self.fuse = ConvBlock(sum(config.branch_widths), config.fused_width)
        self.head = Head(config.fused_width, config.fused_width, self.num_classes)

    def branch(self, name: str) -> Branch:
        if name not in BRANCH_NAMES:
            raise ConfigurationError(f"unknown branch {name!r}")
        return getattr(self, name)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.stem(x)
        outs = {name: self.branch(name)(feats) for name in BRANCH_NAMES}
        fused = self.fuse(torch.cat([outs[name] for name in BRANCH_NAMES], dim=1))
        logits = F.interpolate(self.head(fused), scale_factor=STEM_FACTOR,
                               mode="bilinear", align_corners=False)
        return logits, outs[self.config.connection_point]


class IncrementalUnit(nn.Module):
    """One step's trainable sidecar: a branch clone plus a novel-class head.

    Consumes frozen stem features and emits one sigmoid confidence channel
    per novel class, upsampled to input resolution. Sigmoid rather than a
    softmax keeps heads from different steps independent, so they compose
    without renormalization.
    """

    def __init__(self, config: ModelConfig, novel_class_ids: tuple[int, ...], step_index: int):
        config.validate()
        super().__init__()
        self.config = config
        self.novel_class_ids = tuple(sorted(int(c) for c in novel_class_ids))
        self.step_index = int(step_index)
        width = config.branch_width(config.connection_point)
        self.branch = _build_branch(config, config.connection_point)
        self.head = Head(width, width, len(self.novel_class_ids))

    def forward(self, stem_features: torch.Tensor) -> torch.Tensor:
        logits = self.head(self.branch(stem_features))
        logits = F.interpolate(logits, scale_factor=STEM_FACTOR,
                               mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically initialize: Kaiming fan-in for conv kernels, ones for
    norm scales, zeros for biases. Same (module structure, seed) -> same values."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.dim() >= 2:
                fan_in = param[0].numel()
                param.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.fill_(1.0)


def build_model(config: ModelConfig, seed: int) -> SegmentationModel:
    """Instantiate the backbone with seed-deterministic parameters."""
    model = SegmentationModel(config)
    init_parameters(model, derive_seed(seed, 0))
    model.eval()
    return model


def build_incremental_unit(
    config: ModelConfig,
    novel_class_ids,
    step_index: int,
    seed: int,
    existing_units: tuple["IncrementalUnit", ...] = (),
) -> IncrementalUnit:
    """Create the trainable sidecar for one incremental step.

    Novel ids must be non-empty and disjoint from the base ids (lowest ids
    by convention) and from every earlier unit's ids.
    """
    ids = tuple(sorted({int(c) for c in novel_class_ids}))
    if not ids:
        raise ScheduleError("novel_class_ids must be non-empty")
    if len(ids) != len(tuple(novel_class_ids)):
        raise ScheduleError(f"duplicate ids in novel_class_ids: {tuple(novel_class_ids)}")
    if step_index < 1:
        raise ScheduleError(f"step_index must be >= 1, got {step_index}")
    base_ids = set(range(config.num_base_classes))
    claimed = base_ids.union(*[set(u.novel_class_ids) for u in existing_units]) if existing_units else base_ids
    overlap = claimed.intersection(ids)
    if overlap:
        raise ScheduleError(f"novel ids {sorted(overlap)} already assigned to an earlier task")
    unit = IncrementalUnit(config, ids, step_index)
    init_parameters(unit, derive_seed(seed, 101, step_index))
    unit.train()
    return unit


def _to_batch_tensor(images: np.ndarray, channels: int) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != channels:
        raise DimensionError(
            f"expected images of shape (H, W, {channels}) or (N, H, W, {channels}), got {arr.shape}")
    h, w = arr.shape[1:3]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise DimensionError(
            f"image dims must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
    tensor = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return tensor, single


def forward_base(model: SegmentationModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference pass through the backbone.

    Returns pre-softmax base logits ``(num_classes, H, W)`` and the frozen
    connection-point feature map, batched iff the input is batched.
    """
    tensor, single = _to_batch_tensor(images, model.config.input_channels)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits, tapped = model(tensor)
    model.train(was_training)
    logits_np, tapped_np = logits.numpy(), tapped.numpy()
    if single:
        return logits_np[0], tapped_np[0]
    return logits_np, tapped_np


def forward_incremental(model: SegmentationModel, unit: IncrementalUnit,
                        images: np.ndarray) -> np.ndarray:
    """Confidence maps in [0, 1] for the unit's novel classes.

    The unit taps the backbone's frozen stem, so the owning model is part
    of the call; shape is ``(len(novel_class_ids), H, W)`` per image.
    """
    tensor, single = _to_batch_tensor(images, model.config.input_channels)
    was_training = unit.training
    unit.eval()
    with torch.no_grad():
        probs = unit(model.stem(tensor))
    unit.train(was_training)
    probs_np = probs.numpy()
    return probs_np[0] if single else probs_np


def parameter_shape_multiset(module: nn.Module) -> list[tuple[int, ...]]:
    """Sorted parameter shapes; equality means structural mirroring."""
    return sorted(tuple(p.shape) for p in module.parameters())


def replace_head_classifier(model: SegmentationModel, num_outputs: int) -> nn.Conv2d:
    """Swap the head's 1x1 classifier for one with ``num_outputs`` channels.

    Weights are left uninitialized; callers copy or init them. Used when
    widening a head to cover added classes and when loading such models.
    """
    if num_outputs < 1:
        raise ConfigurationError(f"num_outputs must be >= 1, got {num_outputs}")
    old = model.head.classify
    model.head.classify = nn.Conv2d(old.in_channels, num_outputs, kernel_size=1)
    model.num_classes = num_outputs
    return model.head.classify
