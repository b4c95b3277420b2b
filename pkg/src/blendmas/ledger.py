"""Transactions, blocks, world state, and the deterministic state transition.

World-state mutation is single-writer by convention: exactly one consensus
loop applies blocks; everything else reads committed snapshots. All types
here are plain values that are safe to hand between threads once built.

The state root is SHA-256 over a canonical sorted-key JSON serialization of
the world state, so identical transaction histories always produce identical
roots on every node.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from . import contracts
from .codec import bytes_list, canonical_json, string, u64, varbytes
from .contracts import ContractAccount
from .crypto import Account, ZERO_ADDRESS, ZERO_HASH, sha256, verify
from .errors import InvalidBlockError, Violation
from .merkle import merkle_root

# address -> raw ed25519 public key, derived from the installed roster
PublicKeyDirectory = Mapping[bytes, bytes]


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    nonce: int
    target: bytes
    function: str
    args: tuple = ()
    timestamp: int = 0
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (
            self.sender
            + u64(self.nonce)
            + self.target
            + string(self.function)
            + bytes_list(self.args)
            + u64(self.timestamp)
        )

    def canonical_bytes(self) -> bytes:
        return self.signing_bytes() + varbytes(self.signature)

    def tx_hash(self) -> bytes:
        return sha256(self.canonical_bytes())

    def signed_by(self, account: Account) -> "Transaction":
        return replace(self, signature=account.sign(self.signing_bytes()))

    def to_json_obj(self) -> dict:
        return {
            "sender": "0x" + self.sender.hex(),
            "nonce": self.nonce,
            "target": "0x" + self.target.hex(),
            "function": self.function,
            "args": [a.hex() for a in self.args],
            "timestamp": self.timestamp,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Transaction":
        return cls(
            sender=bytes.fromhex(obj["sender"][2:]),
            nonce=int(obj["nonce"]),
            target=bytes.fromhex(obj["target"][2:]),
            function=obj["function"],
            args=tuple(bytes.fromhex(a) for a in obj["args"]),
            timestamp=int(obj["timestamp"]),
            signature=bytes.fromhex(obj["signature"]),
        )


def make_transaction(
    account: Account,
    nonce: int,
    target: bytes,
    function: str,
    args: Sequence[bytes] = (),
    timestamp: Optional[int] = None,
) -> Transaction:
    tx = Transaction(
        sender=account.address,
        nonce=nonce,
        target=target,
        function=function,
        args=tuple(args),
        timestamp=int(time.time()) if timestamp is None else timestamp,
    )
    return tx.signed_by(account)


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent_hash: bytes
    tx_root: bytes
    state_root: bytes
    proposer: bytes
    timestamp: int
    proposer_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (
            u64(self.height)
            + self.parent_hash
            + self.tx_root
            + self.state_root
            + self.proposer
            + u64(self.timestamp)
        )

    def canonical_bytes(self) -> bytes:
        return self.signing_bytes() + varbytes(self.proposer_signature)

    def header_hash(self) -> bytes:
        return sha256(self.canonical_bytes())

    def to_json_obj(self) -> dict:
        return {
            "height": self.height,
            "parent_hash": self.parent_hash.hex(),
            "tx_root": self.tx_root.hex(),
            "state_root": self.state_root.hex(),
            "proposer": "0x" + self.proposer.hex(),
            "timestamp": self.timestamp,
            "proposer_signature": self.proposer_signature.hex(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BlockHeader":
        return cls(
            height=int(obj["height"]),
            parent_hash=bytes.fromhex(obj["parent_hash"]),
            tx_root=bytes.fromhex(obj["tx_root"]),
            state_root=bytes.fromhex(obj["state_root"]),
            proposer=bytes.fromhex(obj["proposer"][2:]),
            timestamp=int(obj["timestamp"]),
            proposer_signature=bytes.fromhex(obj["proposer_signature"]),
        )


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple = ()

    def block_hash(self) -> bytes:
        return self.header.header_hash()

    def to_json_obj(self) -> dict:
        return {
            "header": self.header.to_json_obj(),
            "transactions": [tx.to_json_obj() for tx in self.transactions],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Block":
        return cls(
            header=BlockHeader.from_json_obj(obj["header"]),
            transactions=tuple(Transaction.from_json_obj(t) for t in obj["transactions"]),
        )


def compute_tx_root(transactions: Iterable[Transaction]) -> bytes:
    return merkle_root([tx.canonical_bytes() for tx in transactions])


@dataclass
class WorldState:
    nonces: dict = field(default_factory=dict)
    contracts: dict = field(default_factory=dict)
    height: int = 0

    def nonce_of(self, address: bytes) -> int:
        return self.nonces.get(address, 0)

    def copy(self) -> "WorldState":
        return WorldState(
            nonces=dict(self.nonces),
            contracts={addr: c.clone() for addr, c in self.contracts.items()},
            height=self.height,
        )

    def to_state_obj(self) -> dict:
        return {
            "height": self.height,
            "nonces": {"0x" + addr.hex(): n for addr, n in self.nonces.items()},
            "contracts": {"0x" + addr.hex(): c.to_state_obj() for addr, c in self.contracts.items()},
        }


def state_root(state: WorldState) -> bytes:
    """SHA-256 of the canonical sorted-key serialization of the state."""
    return sha256(canonical_json(state.to_state_obj()))


def empty_state() -> WorldState:
    return WorldState()


GENESIS_STATE_ROOT = state_root(empty_state())


def genesis_block(genesis_time: int) -> Block:
    """The height-0 block every node constructs identically from the shared
    network start time; it carries no transactions and no proposer."""
    header = BlockHeader(
        height=0,
        parent_hash=ZERO_HASH,
        tx_root=merkle_root([]),
        state_root=GENESIS_STATE_ROOT,
        proposer=ZERO_ADDRESS,
        timestamp=genesis_time,
        proposer_signature=b"",
    )
    return Block(header=header, transactions=())


def validate_transaction(
    state: WorldState, tx: Transaction, keys: PublicKeyDirectory
) -> Optional[Violation]:
    """First failed check, or None. Never mutates state.

    Checks in order: sender key known, signature, strict nonce equality,
    target/function resolvable in the contract engine.
    """
    public_key = keys.get(tx.sender)
    if public_key is None:
        return Violation("unknown-sender", f"no enrolled key for 0x{tx.sender.hex()}")
    if not verify(public_key, tx.signing_bytes(), tx.signature):
        return Violation("bad-signature", "transaction signature does not verify")
    expected = state.nonce_of(tx.sender)
    if tx.nonce != expected:
        return Violation("nonce-mismatch", f"nonce {tx.nonce}, state expects {expected}")
    return contracts.resolve_function(state, tx.target, tx.function)


def apply_transaction(
    state: WorldState, tx: Transaction, height: int, keys: PublicKeyDirectory
) -> Optional[Violation]:
    """Validate then dispatch one transaction against `state`, in place.

    `state` must be a working copy the caller is prepared to discard on a
    violation (dispatch may have partially mutated it).
    """
    bad = validate_transaction(state, tx, keys)
    if bad is not None:
        return bad
    bad = contracts.dispatch(state, tx, height)
    if bad is not None:
        return bad
    state.nonces[tx.sender] = state.nonce_of(tx.sender) + 1
    return None


def apply_block(state: WorldState, block: Block, keys: PublicKeyDirectory) -> WorldState:
    """Apply a block atomically, returning the new state.

    Consensus-level checks (proposer, schedule, parent linkage) are the
    caller's job; this enforces the transaction-level and commitment-level
    invariants: correct height, matching tx root, every transaction valid in
    order, and a post-state root equal to the header's. Raises
    InvalidBlockError on any failure, leaving `state` untouched.
    """
    header = block.header
    if header.height != state.height + 1:
        raise InvalidBlockError(
            f"block height {header.height} does not extend state height {state.height}"
        )
    if header.tx_root != compute_tx_root(block.transactions):
        raise InvalidBlockError("tx_root does not match block transactions")
    working = state.copy()
    working.height = header.height
    for index, tx in enumerate(block.transactions):
        bad = apply_transaction(working, tx, header.height, keys)
        if bad is not None:
            raise InvalidBlockError(
                f"transaction {index} invalid: {bad}", tx_index=index
            )
    root = state_root(working)
    if root != header.state_root:
        raise InvalidBlockError(
            f"post-state root {root.hex()} does not match header {header.state_root.hex()}"
        )
    return working


def replay_chain(blocks: Sequence[Block], keys: PublicKeyDirectory) -> WorldState:
    """Rebuild world state from a block log starting at genesis.

    Verifies hash linkage and commitments along the way; returns the final
    state, whose root must equal the last header's state_root.
    """
    if not blocks:
        return empty_state()
    bad = verify_chain_linkage(blocks)
    if bad is not None:
        raise InvalidBlockError(str(bad))
    state = empty_state()
    for block in blocks[1:]:
        state = apply_block(state, block, keys)
    return state


def verify_chain_linkage(blocks: Sequence[Block]) -> Optional[Violation]:
    """Structural chain check: genesis shape, contiguous heights, parent
    hashes equal to the previous header's hash, tx roots consistent."""
    if not blocks:
        return None
    genesis = blocks[0]
    if genesis.header.height != 0 or genesis.header.parent_hash != ZERO_HASH:
        return Violation("bad-genesis", "first block is not a genesis block")
    for i, block in enumerate(blocks):
        if block.header.height != i:
            return Violation("bad-height", f"block {i} has height {block.header.height}")
        if i > 0 and block.header.parent_hash != blocks[i - 1].block_hash():
            return Violation("broken-linkage", f"block {i} parent hash mismatch")
        if block.header.tx_root != compute_tx_root(block.transactions):
            return Violation("bad-tx-root", f"block {i} tx root mismatch")
    return None
