"""Checkpoint directories for a ParamStore and its model sidecar.

Layout (format ``sleepnet-ckpt@1``)::

    <name>.ckpt/
      manifest.json          format, Adam step, per-tensor name/shape/dtype/sha256/bytes,
                             sidecar sha256
      tensors/<key>.f64      flat little-endian float64, C order
      model.json             NetworkConfig, schema hash, standardization stats, fold

Tensor keys are ``param.<name>``, ``adam_m.<name>`` and ``adam_v.<name>``
so a loaded store resumes training exactly where it stopped.

Disk is truth: loading re-hashes every blob and the sidecar against the
manifest and refuses any mismatch. A checkpoint whose bytes were touched
never yields parameters. The checkpoint id is derived from the manifest
bytes and never stored inside them.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from sleepnet_core.errors import SleepnetError
from sleepnet_core.ids import canonicalize, checkpoint_id, sha256_hex
from sleepnet_core.protocol import (
    CHECKPOINT_FORMAT,
    MANIFEST_NAME,
    SIDECAR_NAME,
    TENSOR_DTYPE,
    TENSOR_SUFFIX,
)
from sleepnet.autodiff import ParamStore

_KINDS = ("param", "adam_m", "adam_v")


class CheckpointError(SleepnetError):
    """The checkpoint is missing, malformed, or its bytes disagree with its manifest."""


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    checkpoint_id: str
    store: ParamStore
    sidecar: Mapping[str, Any]


def _fdatasync_write(path: Path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)
        f.flush()
        if hasattr(os, "fdatasync"):
            os.fdatasync(f.fileno())
        else:  # pragma: no cover - non-POSIX fallback
            os.fsync(f.fileno())


def _tensor_key(kind: str, name: str) -> str:
    return f"{kind}.{name}"


def save_checkpoint(store: ParamStore, path: Path | str,
                    sidecar: Mapping[str, Any]) -> Checkpoint:
    """Write ``store`` and ``sidecar`` under ``path``. Returns the loaded view."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)

    tensors = []
    for name in store.names():
        for kind, source in zip(_KINDS, (store.params, store.m, store.v)):
            arr = np.ascontiguousarray(source[name], dtype=TENSOR_DTYPE)
            blob = arr.tobytes(order="C")
            key = _tensor_key(kind, name)
            _fdatasync_write(path / "tensors" / f"{key}{TENSOR_SUFFIX}", blob)
            tensors.append({
                "key": key,
                "shape": list(arr.shape),
                "dtype": TENSOR_DTYPE,
                "bytes": len(blob),
                "sha256": sha256_hex(blob),
            })

    sidecar_bytes = json.dumps(dict(sidecar), sort_keys=True, indent=1).encode("utf-8") + b"\n"
    _fdatasync_write(path / SIDECAR_NAME, sidecar_bytes)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "adam_step": int(store.step),
        "tensors": tensors,
        "sidecar_sha256": sha256_hex(sidecar_bytes),
    }
    manifest_bytes = canonicalize(manifest)
    _fdatasync_write(path / MANIFEST_NAME, manifest_bytes)
    return Checkpoint(path, checkpoint_id(manifest_bytes), store.copy(), dict(sidecar))


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Verify every byte against the manifest, then rebuild the store."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"{path}: no {MANIFEST_NAME}; not a checkpoint directory")
    manifest_bytes = manifest_path.read_bytes()
    try:
        manifest = json.loads(manifest_bytes)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )

    sidecar_bytes = (path / SIDECAR_NAME).read_bytes() if (path / SIDECAR_NAME).is_file() else b""
    if sha256_hex(sidecar_bytes) != manifest["sidecar_sha256"]:
        raise CheckpointError(f"{path}: {SIDECAR_NAME} does not match the manifest hash")

    buckets: dict[str, dict[str, np.ndarray]] = {k: {} for k in _KINDS}
    for entry in manifest["tensors"]:
        blob_path = path / "tensors" / f"{entry['key']}{TENSOR_SUFFIX}"
        if not blob_path.is_file():
            raise CheckpointError(f"{path}: missing tensor blob {blob_path.name}")
        blob = blob_path.read_bytes()
        if len(blob) != entry["bytes"] or sha256_hex(blob) != entry["sha256"]:
            raise CheckpointError(f"{path}: tensor {entry['key']!r} fails its sha256 check")
        if entry["dtype"] != TENSOR_DTYPE:
            raise CheckpointError(f"{path}: tensor {entry['key']!r} has dtype {entry['dtype']}")
        kind, _, name = entry["key"].partition(".")
        if kind not in buckets:
            raise CheckpointError(f"{path}: unknown tensor kind in key {entry['key']!r}")
        arr = np.frombuffer(blob, dtype=TENSOR_DTYPE).reshape(entry["shape"])
        buckets[kind][name] = arr.astype(np.float64)

    if not (buckets["param"].keys() == buckets["adam_m"].keys() == buckets["adam_v"].keys()):
        raise CheckpointError(f"{path}: parameter and Adam moment sets differ")

    store = ParamStore(buckets["param"], buckets["adam_m"], buckets["adam_v"],
                       int(manifest["adam_step"]))
    return Checkpoint(path, checkpoint_id(manifest_bytes), store, json.loads(sidecar_bytes))
