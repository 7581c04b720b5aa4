"""Portable hashing primitives.

64-bit FNV-1a is the single hash used for token buckets, segment slots,
record splits, and state digests. It is bit-exact across platforms and
trivial to reimplement, which keeps every hashed quantity oracle-checkable.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def fnv1a64_str(text: str) -> int:
    return fnv1a64(text.encode("utf-8"))


def canonical_json(obj: Any) -> str:
    """Deterministic JSON used for digests: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_digest(obj: Any, length: int = 16) -> str:
    """Short hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]
