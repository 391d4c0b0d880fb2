"""Run directories: manifests, locks, and artifact layout.

Each run id owns one directory holding an append-only ``manifest.json``,
per-step checkpoints, frozen-parameter digests, and training logs. Every
number a report prints is recoverable from the manifest alone, and every
referenced checkpoint is hash-verified before reuse.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__ as _tool_version
from .checkpoint import file_sha256
from .errors import ConfigurationError, VerificationError

OUTPUT_ROOT_ENV = "SIDECARSEG_OUTPUT_ROOT"


def output_root(override: str | None = None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.rename(path)


class RunLock:
    """Exclusive ownership of a run directory while a command mutates it."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(
                f"run is locked by another process ({self.path}); remove the lock if stale")
        with os.fdopen(fd, "w") as fh:
            fh.write(f"pid={os.getpid()}\n")
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)


@dataclass
class RunManifest:
    """Append-only record of a run: config, schedule, and per-step results."""

    run_id: str
    method: str
    config: dict
    schedule: dict
    created: float = field(default_factory=time.time)
    tool_version: str = _tool_version
    routing_tau: float | None = None
    steps: list[dict] = field(default_factory=list)
    sweeps: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "method": self.method,
            "config": self.config,
            "schedule": self.schedule,
            "created": self.created,
            "tool_version": self.tool_version,
            "routing_tau": self.routing_tau,
            "steps": self.steps,
            "sweeps": self.sweeps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(
            run_id=data["run_id"],
            method=data["method"],
            config=data["config"],
            schedule=data["schedule"],
            created=data["created"],
            tool_version=data["tool_version"],
            routing_tau=data.get("routing_tau"),
            steps=list(data.get("steps", [])),
            sweeps=dict(data.get("sweeps", {})),
        )

    def completed_steps(self) -> list[int]:
        return sorted(s["record"]["step_index"] for s in self.steps)

    def step_entry(self, step_index: int) -> dict:
        for entry in self.steps:
            if entry["record"]["step_index"] == step_index:
                return entry
        raise ConfigurationError(f"run {self.run_id} has no completed step {step_index}")

    def append_step(self, record: dict, metrics: dict, checkpoint: str | None,
                    checkpoint_sha256: str | None, digest_path: str | None = None) -> None:
        step = record["step_index"]
        if any(s["record"]["step_index"] == step for s in self.steps):
            raise ConfigurationError(f"run {self.run_id} already recorded step {step}")
        self.steps.append({
            "record": record,
            "metrics": metrics,
            "checkpoint": checkpoint,
            "checkpoint_sha256": checkpoint_sha256,
            "frozen_digest": digest_path,
        })


@dataclass
class RunPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def checkpoint(self, step: int) -> Path:
        return self.root / "checkpoints" / f"step_{step}.ckpt"

    def log(self, step: int) -> Path:
        return self.root / "logs" / f"step_{step}.jsonl"

    def digest(self, step: int) -> Path:
        return self.root / "digests" / f"step_{step}_frozen.txt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def save_manifest(paths: RunPaths, manifest: RunManifest) -> None:
    atomic_write_text(paths.manifest, json.dumps(manifest.to_dict(), indent=2, sort_keys=True))


def load_manifest(paths: RunPaths) -> RunManifest:
    if not paths.manifest.is_file():
        raise ConfigurationError(f"no manifest at {paths.manifest}")
    return RunManifest.from_dict(json.loads(paths.manifest.read_text()))


def resolve_run(run: str, root_override: str | None = None) -> RunPaths:
    """Accept either a run id under the output root or a run directory path."""
    candidate = Path(run)
    if candidate.is_dir() and (candidate / "manifest.json").is_file():
        return RunPaths(candidate)
    return RunPaths(output_root(root_override) / run)


def verify_checkpoint_reference(paths: RunPaths, entry: dict) -> Path:
    """Hash-verify a manifest-referenced checkpoint before trusting it."""
    if not entry.get("checkpoint"):
        raise ConfigurationError("manifest step has no checkpoint reference")
    ckpt = Path(entry["checkpoint"])
    if not ckpt.is_absolute():
        ckpt = paths.root / ckpt
    if not ckpt.is_file():
        raise VerificationError(f"checkpoint {ckpt} referenced by manifest is missing")
    actual = file_sha256(ckpt)
    if actual != entry["checkpoint_sha256"]:
        raise VerificationError(
            f"checkpoint {ckpt} hash mismatch: manifest {entry['checkpoint_sha256'][:12]}.., "
            f"file {actual[:12]}..")
    return ckpt


VOLATILE_RECORD_KEYS = ("wall_time",)


def normalized_manifest(manifest: RunManifest) -> dict:
    """Manifest content with volatile fields (times, hashes of paths) dropped.

    Two runs of the same config and seed in deterministic mode must agree on
    this view exactly.
    """
    data = manifest.to_dict()
    data.pop("created", None)
    data.pop("run_id", None)
    for step in data["steps"]:
        step.pop("checkpoint", None)
        step.pop("frozen_digest", None)
        for key in VOLATILE_RECORD_KEYS:
            step["record"].pop(key, None)
    return data
