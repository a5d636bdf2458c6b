"""Checkpoint directory: ``manifest.json`` plus one little-endian f64 blob."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from chime.numerics.optim import ParamStore

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the requested model."""


def save_params(store: ParamStore, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "f64",
        "byte_order": "little",
        "params": entries,
        "total_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    tmp = directory / "params.bin.tmp"
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, directory / "params.bin")
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint into ``{name: array}`` in manifest order."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {directory}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION or manifest.get("dtype") != "f64":
        raise CheckpointError(
            f"unsupported checkpoint schema {manifest.get('schema_version')!r}/{manifest.get('dtype')!r}")
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(f"params.bin has {len(blob)} bytes, manifest says {manifest.get('total_bytes')}")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, manifest


def restore_into(store: ParamStore, directory) -> dict:
    arrays, manifest = load_params(directory)
    missing = [n for n in store if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    try:
        store.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return manifest
