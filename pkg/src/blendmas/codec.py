"""Canonical byte encoding used for every signed or hashed structure.

Layout rule (documented byte-exactly in docs/wire-format.md): a structure's
canonical form is the concatenation of its fields in declared order, where

  * unsigned integers are fixed-width big-endian (u64 everywhere here),
  * fixed-size byte fields (20-byte addresses, 32-byte hashes) are raw,
  * variable-length byte strings carry a u32 big-endian length prefix,
  * strings are UTF-8 encoded then treated as variable-length bytes,
  * lists carry a u32 big-endian element count before the elements.

Encoding is one-way: structures travel as JSON on the wire and on disk; the
canonical bytes exist so signatures and hashes agree across nodes.
"""

from __future__ import annotations

import json
import struct
from typing import Any, Iterable

U64_MAX = 2**64 - 1


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"u64 out of range: {value}")
    return struct.pack(">Q", value)


def varbytes(data: bytes) -> bytes:
    return u32(len(data)) + data


def string(text: str) -> bytes:
    return varbytes(text.encode("utf-8"))


def bytes_list(items: Iterable[bytes]) -> bytes:
    """Encode a list of variable-length byte strings."""
    items = list(items)
    return u32(len(items)) + b"".join(varbytes(b) for b in items)


def canonical_json(obj: Any) -> bytes:
    """Stable JSON bytes: sorted keys, no whitespace, ASCII-only.

    The same object always serializes to the same bytes, so SHA-256 over the
    result is reproducible across nodes and process restarts.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
