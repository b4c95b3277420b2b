"""Accounts, Ed25519 signatures, and address derivation.

Ed25519 is the one signature scheme used everywhere (accounts, block
proposers, the oracle, wire messages). It is deterministic, so identical
content always re-serializes to identical signed bytes — a property the
replay-determinism checks rely on.

An address is the last 20 bytes of SHA-256(public key); its text form is
"0x" + 40 lowercase hex chars.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import InvalidKeyError

ADDRESS_LEN = 20
PUBLIC_KEY_LEN = 32
ZERO_ADDRESS = b"\x00" * ADDRESS_LEN
ZERO_HASH = b"\x00" * 32


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_address(public_key: bytes) -> bytes:
    """Last 20 bytes of SHA-256 over the raw 32-byte public key."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_LEN:
        raise InvalidKeyError(
            f"public key must be {PUBLIC_KEY_LEN} bytes, got {len(public_key) if isinstance(public_key, (bytes, bytearray)) else type(public_key)}"
        )
    return sha256(bytes(public_key))[-ADDRESS_LEN:]


def address_to_hex(address: bytes) -> str:
    if len(address) != ADDRESS_LEN:
        raise ValueError(f"address must be {ADDRESS_LEN} bytes")
    return "0x" + address.hex()


def address_from_hex(text: str) -> bytes:
    if not text.startswith("0x") or len(text) != 2 + 2 * ADDRESS_LEN:
        raise ValueError(f"malformed address text: {text!r}")
    return bytes.fromhex(text[2:])


@dataclass(frozen=True)
class Account:
    """A signing identity: Ed25519 seed, raw public key, derived address."""

    private_key: bytes
    public_key: bytes
    address: bytes

    @classmethod
    def generate(cls) -> "Account":
        key = Ed25519PrivateKey.generate()
        return cls.from_seed(key.private_bytes_raw())

    @classmethod
    def from_seed(cls, seed: bytes) -> "Account":
        if len(seed) != 32:
            raise InvalidKeyError("Ed25519 seed must be 32 bytes")
        key = Ed25519PrivateKey.from_private_bytes(seed)
        public = key.public_key().public_bytes_raw()
        return cls(private_key=seed, public_key=public, address=derive_address(public))

    def sign(self, payload: bytes) -> bytes:
        key = Ed25519PrivateKey.from_private_bytes(self.private_key)
        return key.sign(payload)


def sign(account: Account, payload: bytes) -> bytes:
    return account.sign(payload)


def verify(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    """True iff `signature` is a valid Ed25519 signature by `public_key`."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def save_key_file(path, account: Account) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(account.private_key.hex() + "\n")


def load_key_file(path) -> Account:
    with open(path, "r", encoding="utf-8") as fh:
        seed = bytes.fromhex(fh.read().strip())
    return Account.from_seed(seed)
