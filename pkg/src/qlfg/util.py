"""Small shared helpers: stable seeding and canonical JSON."""

from __future__ import annotations

import hashlib
import json


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary parts, stable across runs and platforms.

    Built on sha256 rather than hash() so results do not depend on
    PYTHONHASHSEED. Used for counter-based RNG streams (dropout masks,
    per-source sampling) keyed on (global seed, counter, name).
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
