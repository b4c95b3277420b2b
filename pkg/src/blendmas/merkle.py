"""Merkle root over an ordered list of byte strings.

Hashing rules:
  leaf      = SHA-256(0x00 || leaf bytes)
  interior  = SHA-256(0x01 || left || right)
  an odd node at any level (including a single leaf) is paired with itself
  empty list -> 32 zero bytes

The 0x00/0x01 domain prefixes keep leaves and interior nodes from colliding.
"""

from __future__ import annotations

from typing import Sequence

from .crypto import ZERO_HASH, sha256

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"


def leaf_hash(data: bytes) -> bytes:
    return sha256(LEAF_PREFIX + data)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(NODE_PREFIX + left + right)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        return ZERO_HASH
    level = [leaf_hash(leaf) for leaf in leaves]
    while True:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]
