"""Checkpoint archive: config, seed, and every parameter tensor by path.

Layout: an 8-byte magic, a little-endian uint32 format version, a uint64
header length, a canonical JSON header (sorted keys), then raw tensor bytes
concatenated in header order. Everything is a pure function of the stored
content, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .freezing import composite_named_parameters
from .model import IncrementalUnit, ModelConfig, SegmentationModel, replace_head_classifier

MAGIC = b"SSEGCKPT"
FORMAT_VERSION = 1


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, model: SegmentationModel,
                    units: list[IncrementalUnit] | tuple[IncrementalUnit, ...] = (),
                    seed: int = 0) -> Path:
    """Write the composite atomically (tmp file + rename)."""
    path = Path(path)
    named = sorted(composite_named_parameters(model, tuple(units)))
    tensors = []
    blobs = []
    for name, param in named:
        array = param.detach().cpu().contiguous().numpy()
        tensors.append({"name": name, "dtype": str(array.dtype), "shape": list(array.shape)})
        blobs.append(array.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "config": model.config.to_dict(),
        "num_classes": int(model.num_classes),
        "units": [
            {"step_index": u.step_index, "novel_class_ids": list(u.novel_class_ids)}
            for u in units
        ],
        "tensors": tensors,
    }
    encoded = _header_bytes(header)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.rename(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[SegmentationModel, list[IncrementalUnit], int]:
    """Rebuild the composite from an archive; inverse of :func:`save_checkpoint`."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint archive")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()

    config = ModelConfig.from_dict(header["config"])
    model = SegmentationModel(config)
    if header["num_classes"] != config.num_base_classes:
        replace_head_classifier(model, header["num_classes"])
    units = [
        IncrementalUnit(config, tuple(u["novel_class_ids"]), u["step_index"])
        for u in header["units"]
    ]
    params = {name: p for name, p in composite_named_parameters(model, units)}
    expected = {t["name"] for t in header["tensors"]}
    if expected != set(params):
        raise ConfigurationError("checkpoint tensor names do not match the rebuilt architecture")

    offset = 0
    with torch.no_grad():
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            array = np.frombuffer(payload, dtype=dtype, count=max(1, int(np.prod(shape, dtype=np.int64))),
                                  offset=offset).reshape(shape)
            params[entry["name"]].copy_(torch.from_numpy(array.copy()))
            offset += nbytes
    model.eval()
    for unit in units:
        unit.eval()
    return model, units, int(header["seed"])


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
