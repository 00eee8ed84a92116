"""Single-file checkpoints: JSON manifest plus raw little-endian arrays.

Layout: 8-byte little-endian header length, the UTF-8 JSON header, then the
concatenated array bytes. The header records the format version, the config
(and its hash), per-array name/shape/dtype/offset, and free-form extras.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1


def config_hash(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_dict(cfg) -> dict:
    """A dataclass config as a JSON-safe dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return value
    return value.detach().cpu().numpy()


def save_checkpoint(path, arrays: Mapping[str, Any], config: Mapping[str, Any],
                    extra: Mapping[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = np.ascontiguousarray(_to_numpy(value))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "config": dict(config),
        "config_hash": config_hash(config),
        "extra": dict(extra or {}),
        "entries": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    config_hash: str
    extra: dict

    def select(self, prefix: str, strip: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.arrays.items():
            if name.startswith(prefix):
                out[name[len(prefix):] if strip else name] = arr
        return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported checkpoint version {header.get('version')}"
            )
        blob = fh.read()
    arrays = {}
    for entry in header["entries"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
    return Checkpoint(arrays, header["config"], header["config_hash"], header["extra"])


def load_arrays_into(module, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy named arrays into a module's parameters, validating shapes."""
    import torch

    params = dict(module.named_parameters())
    missing = [n for n in params if n not in arrays]
    unexpected = [n for n in arrays if n not in params]
    if missing or unexpected:
        raise ValidationError(
            f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
        )
    with torch.no_grad():
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)} "
                    f"vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
