"""Freeze discipline: partition parameters into frozen and trainable sets.

After base training the backbone and original head are permanently frozen;
each incremental step trains exactly one sidecar unit while every earlier
unit joins the frozen set. Digests make "frozen" an assertable property:
a content hash per parameter, compared bitwise before and after training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import torch
from torch import nn

from .errors import VerificationError
from .model import IncrementalUnit, SegmentationModel

GLOBAL_KEY = "__global__"


def composite_named_parameters(
    model: SegmentationModel, units: Sequence[IncrementalUnit]
) -> Iterator[tuple[str, nn.Parameter]]:
    """All parameters of the composite, with stable path-style names."""
    for name, param in model.named_parameters():
        yield f"base.{name}", param
    for unit in units:
        for name, param in unit.named_parameters():
            yield f"step{unit.step_index}.{name}", param


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint frozen/trainable name sets covering the whole composite."""

    frozen_names: frozenset[str]
    trainable_names: frozenset[str]

    def validate_against(self, named_params: Iterable[tuple[str, nn.Parameter]]) -> None:
        overlap = self.frozen_names & self.trainable_names
        if overlap:
            raise VerificationError(f"parameters in both sets: {sorted(overlap)[:3]}")
        all_names = {name for name, _ in named_params}
        covered = self.frozen_names | self.trainable_names
        if covered != all_names:
            missing = sorted(all_names - covered)[:3]
            extra = sorted(covered - all_names)[:3]
            raise VerificationError(f"partition mismatch: missing={missing} extra={extra}")


def freeze_base(model: SegmentationModel,
                units: Sequence[IncrementalUnit]) -> ParameterPartition:
    """Freeze the backbone, head, and all but the most recent unit.

    With no units the trainable set is empty. The returned partition is
    validated for completeness against the composite it describes.
    """
    frozen, trainable = set(), set()
    for name, param in model.named_parameters():
        param.requires_grad_(False)
        param.grad = None  # drop stale buffers from earlier training phases
        frozen.add(f"base.{name}")
    for i, unit in enumerate(units):
        is_current = i == len(units) - 1
        for name, param in unit.named_parameters():
            param.requires_grad_(is_current)
            if not is_current:
                param.grad = None
            (trainable if is_current else frozen).add(f"step{unit.step_index}.{name}")
    partition = ParameterPartition(frozenset(frozen), frozenset(trainable))
    partition.validate_against(composite_named_parameters(model, units))
    return partition


def _tensor_hash(param: torch.Tensor) -> str:
    data = param.detach().cpu().contiguous().numpy().tobytes()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class FrozenDigest:
    """Per-parameter content hashes plus a global hash, path-canonicalized."""

    hashes: tuple[tuple[str, str], ...]  # sorted by parameter path
    global_hash: str

    @classmethod
    def from_hashes(cls, hashes: dict[str, str]) -> "FrozenDigest":
        ordered = tuple(sorted(hashes.items()))
        blob = "\n".join(f"{name} {digest}" for name, digest in ordered)
        return cls(ordered, hashlib.sha256(blob.encode()).hexdigest())

    def as_dict(self) -> dict[str, str]:
        return dict(self.hashes)

    def to_manifest(self) -> str:
        lines = [f"{name} {digest}" for name, digest in self.hashes]
        lines.append(f"{GLOBAL_KEY} {self.global_hash}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "FrozenDigest":
        hashes: dict[str, str] = {}
        global_hash = None
        for line in text.strip().splitlines():
            name, _, digest = line.strip().partition(" ")
            if name == GLOBAL_KEY:
                global_hash = digest
            else:
                hashes[name] = digest
        digest = cls.from_hashes(hashes)
        if global_hash is not None and global_hash != digest.global_hash:
            raise VerificationError("manifest global hash does not match its entries")
        return digest


def snapshot_frozen(model: SegmentationModel, units: Sequence[IncrementalUnit],
                    partition: ParameterPartition) -> FrozenDigest:
    """Hash exactly the frozen parameters of the composite."""
    params = dict(composite_named_parameters(model, units))
    missing = sorted(partition.frozen_names - params.keys())
    if missing:
        raise VerificationError(f"frozen names not present in composite: {missing[:3]}")
    return FrozenDigest.from_hashes(
        {name: _tensor_hash(params[name]) for name in partition.frozen_names})


def verify_frozen(model: SegmentationModel, units: Sequence[IncrementalUnit],
                  partition: ParameterPartition,
                  digest: FrozenDigest) -> tuple[bool, str | None]:
    """Check every frozen parameter is bitwise unchanged since the snapshot.

    Returns ``(True, None)`` on success, else ``(False, <first mismatched
    parameter path>)``. Name disagreements between digest and partition are
    a verification error, not a mismatch.
    """
    recorded = digest.as_dict()
    if set(recorded) != set(partition.frozen_names):
        raise VerificationError("digest and partition cover different parameter sets")
    params = dict(composite_named_parameters(model, units))
    for name in sorted(partition.frozen_names):
        if _tensor_hash(params[name]) != recorded[name]:
            return False, name
    return True, None


def max_frozen_gradient(model: SegmentationModel, units: Sequence[IncrementalUnit],
                        partition: ParameterPartition) -> float:
    """Max absolute gradient over frozen parameters; absent buffers count as 0."""
    worst = 0.0
    for name, param in composite_named_parameters(model, units):
        if name in partition.frozen_names and param.grad is not None:
            worst = max(worst, float(param.grad.abs().max()))
    return worst
