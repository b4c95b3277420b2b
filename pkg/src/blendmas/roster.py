"""The oracle-signed roster of certified participants (static nodes file).

The canonical serialization signed by the oracle covers (epoch, records) in
declared field order. On disk the roster is stored twice: the canonical
bytes with the signature appended (static-nodes.bin) and a human-readable
JSON mirror (static-nodes.json).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional

from .codec import string, u32, u64, varbytes
from .consensus import ValidatorSet
from .crypto import Account, derive_address, verify

ROLES = ("miner", "service", "client")

BIN_FILENAME = "static-nodes.bin"
JSON_FILENAME = "static-nodes.json"


@dataclass(frozen=True)
class NodeRecord:
    address: bytes
    public_key: bytes
    host: str
    port: int
    role: str
    enrolled_at: int

    def canonical_bytes(self) -> bytes:
        return (
            self.address
            + varbytes(self.public_key)
            + string(self.host)
            + u64(self.port)
            + string(self.role)
            + u64(self.enrolled_at)
        )

    def to_json_obj(self) -> dict:
        return {
            "address": "0x" + self.address.hex(),
            "public_key": self.public_key.hex(),
            "host": self.host,
            "port": self.port,
            "role": self.role,
            "enrolled_at": self.enrolled_at,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "NodeRecord":
        return cls(
            address=bytes.fromhex(obj["address"][2:]),
            public_key=bytes.fromhex(obj["public_key"]),
            host=obj["host"],
            port=int(obj["port"]),
            role=obj["role"],
            enrolled_at=int(obj["enrolled_at"]),
        )


def roster_signing_bytes(epoch: int, records: Iterable[NodeRecord]) -> bytes:
    records = list(records)
    return u64(epoch) + u32(len(records)) + b"".join(r.canonical_bytes() for r in records)


@dataclass(frozen=True)
class StaticNodesFile:
    epoch: int
    records: tuple
    oracle_signature: bytes

    @classmethod
    def signed(cls, epoch: int, records: Iterable[NodeRecord], oracle: Account) -> "StaticNodesFile":
        records = tuple(records)
        return cls(
            epoch=epoch,
            records=records,
            oracle_signature=oracle.sign(roster_signing_bytes(epoch, records)),
        )

    def verify(self, oracle_public_key: bytes) -> bool:
        return verify(
            oracle_public_key,
            roster_signing_bytes(self.epoch, self.records),
            self.oracle_signature,
        )

    def canonical_bytes(self) -> bytes:
        return roster_signing_bytes(self.epoch, self.records) + varbytes(self.oracle_signature)

    def get(self, address: bytes) -> Optional[NodeRecord]:
        for record in self.records:
            if record.address == address:
                return record
        return None

    def key_directory(self, oracle_public_key: Optional[bytes] = None) -> dict:
        """address -> public key map for signature checks; includes the
        oracle's well-known key when given."""
        keys = {r.address: r.public_key for r in self.records}
        if oracle_public_key is not None:
            keys[derive_address(oracle_public_key)] = oracle_public_key
        return keys

    def miner_addresses(self) -> list:
        return [r.address for r in self.records if r.role == "miner"]

    def validator_set(self) -> ValidatorSet:
        return ValidatorSet.from_members(self.miner_addresses(), epoch=self.epoch)

    def to_json_obj(self) -> dict:
        return {
            "epoch": self.epoch,
            "records": [r.to_json_obj() for r in self.records],
            "oracle_signature": self.oracle_signature.hex(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "StaticNodesFile":
        return cls(
            epoch=int(obj["epoch"]),
            records=tuple(NodeRecord.from_json_obj(r) for r in obj["records"]),
            oracle_signature=bytes.fromhex(obj["oracle_signature"]),
        )

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, BIN_FILENAME), "wb") as fh:
            fh.write(self.canonical_bytes())
        with open(os.path.join(directory, JSON_FILENAME), "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, directory: str) -> "StaticNodesFile":
        with open(os.path.join(directory, JSON_FILENAME), "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))
