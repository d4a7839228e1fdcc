"""
sleepnet/src/sleepnet_core/ids.py

Content identity for runs, schemas and checkpoints.

Every identity is a truncated SHA-256 over canonical bytes, base32
encoded with a short type prefix. The algorithm is frozen: changing it
orphans every sidecar that pinned a schema hash.
"""
from __future__ import annotations

import base64
import hashlib
import json
from typing import Any


def canonicalize(obj: Any) -> bytes:
    """Canonical JSON bytes: sorted keys, no whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")


def _hash(b: bytes, prefix: str) -> str:
    h = hashlib.sha256(b).digest()[:15]
    return prefix + base64.b32encode(h).decode("ascii").lower().rstrip("=")


def schema_hash(feature_names: list[str] | tuple[str, ...]) -> str:
    """Identity of an encoded feature layout (names, in order)."""
    return _hash(canonicalize(list(feature_names)), "fs_")


def checkpoint_id(manifest_bytes: bytes) -> str:
    """ck1_ identity of a checkpoint: derived from the manifest, never stored in it."""
    return _hash(manifest_bytes, "ck1_")


def sha256_hex(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()
