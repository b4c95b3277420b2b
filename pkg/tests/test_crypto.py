"""Address derivation and Ed25519 signing."""

import hashlib
import random

import pytest

from blendmas.crypto import (
    Account,
    address_from_hex,
    address_to_hex,
    derive_address,
    sign,
    verify,
)
from blendmas.errors import InvalidKeyError

# last 20 bytes of SHA-256 over 32 zero bytes, computed independently with
# hashlib before the implementation existed
ZERO_KEY_ADDRESS = bytes.fromhex("8e9f8e20089714856ee233b3902a591d0d5f2925")


def test_derive_address_deterministic():
    pk = Account.generate().public_key
    assert derive_address(pk) == derive_address(pk)


def test_derive_address_zero_key_frozen_value():
    assert derive_address(b"\x00" * 32) == ZERO_KEY_ADDRESS


def test_derive_address_matches_straight_line_sha256():
    pk = Account.generate().public_key
    assert derive_address(pk) == hashlib.sha256(pk).digest()[-20:]


def test_derive_address_rejects_malformed_key():
    for bad in (b"", b"\x00" * 31, b"\x00" * 33, b"\x00" * 64):
        with pytest.raises(InvalidKeyError):
            derive_address(bad)


def test_distinct_keys_distinct_addresses_sampling():
    rng = random.Random(0xBEEF)
    seen = set()
    for _ in range(10_000):
        pk = rng.randbytes(32)
        seen.add(derive_address(pk))
    assert len(seen) == 10_000


def test_address_hex_round_trip():
    addr = Account.generate().address
    text = address_to_hex(addr)
    assert text.startswith("0x") and len(text) == 42 and text == text.lower()
    assert address_from_hex(text) == addr


def test_address_from_hex_rejects_garbage():
    with pytest.raises(ValueError):
        address_from_hex("8e9f8e20089714856ee233b3902a591d0d5f2925")
    with pytest.raises(ValueError):
        address_from_hex("0x1234")


def test_sign_verify_round_trip():
    account = Account.generate()
    payload = b"feature frame 42"
    sig = sign(account, payload)
    assert verify(account.public_key, payload, sig)


def test_verify_wrong_key_fails():
    a, b = Account.generate(), Account.generate()
    sig = sign(a, b"payload")
    assert not verify(b.public_key, b"payload", sig)


def test_verify_rejects_every_single_byte_flip():
    # exhaustive over a 16-byte payload: flip each bit of each byte
    account = Account.generate()
    payload = bytearray(b"0123456789abcdef")
    sig = sign(account, bytes(payload))
    for i in range(len(payload)):
        for bit in range(8):
            mutated = bytearray(payload)
            mutated[i] ^= 1 << bit
            assert not verify(account.public_key, bytes(mutated), sig)


def test_signatures_are_deterministic():
    account = Account.generate()
    assert sign(account, b"same payload") == sign(account, b"same payload")


def test_account_invariant_address_matches_key():
    for _ in range(20):
        account = Account.generate()
        assert account.address == derive_address(account.public_key)


def test_key_file_round_trip(tmp_path):
    from blendmas.crypto import load_key_file, save_key_file

    account = Account.generate()
    path = tmp_path / "node.key"
    save_key_file(path, account)
    loaded = load_key_file(path)
    assert loaded == account
