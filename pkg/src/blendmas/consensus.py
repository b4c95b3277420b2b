"""Round-robin proof-of-authority: proposer schedule, block production and
verification, mempool, and fork choice.

The miner at index (height mod n) of the address-sorted miner list owns each
height. Liveness under absent proposers comes from a successor rule that is
checkable from chain data alone: the k-th successor of the scheduled miner
may propose once k timeout windows (2 block intervals each) have elapsed
since the parent block's timestamp. Verifiers recompute the allowance from
the header timestamps, so every node reaches the same verdict.

Fork choice: greatest height wins; equal heights break toward the
lexicographically smallest head hash.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .crypto import Account, verify
from .errors import BlendmasError, Violation
from .ledger import (
    Block,
    BlockHeader,
    PublicKeyDirectory,
    Transaction,
    WorldState,
    apply_transaction,
    compute_tx_root,
    state_root,
    validate_transaction,
)

DEFAULT_BLOCK_INTERVAL_MS = 1000
# a skipped turn lasts this many block intervals before the next miner may step in
TIMEOUT_INTERVALS = 2
# heights at least this far behind head are reported as finalized
FINALITY_DEPTH = 6


class NoValidatorsError(BlendmasError):
    pass


@dataclass(frozen=True)
class ValidatorSet:
    """Address-sorted miner roster; epoch bumps on every membership change."""

    miners: tuple
    epoch: int

    @classmethod
    def from_members(cls, addresses: Iterable[bytes], epoch: int) -> "ValidatorSet":
        return cls(miners=tuple(sorted(addresses)), epoch=epoch)

    def __contains__(self, address: bytes) -> bool:
        return address in self.miners

    def scheduled(self, height: int) -> bytes:
        if not self.miners:
            raise NoValidatorsError("validator set is empty")
        return self.miners[height % len(self.miners)]

    def proposer_offset(self, proposer: bytes, height: int) -> Optional[int]:
        """How many places after the scheduled miner `proposer` sits at
        `height` (0 = scheduled); None if not a member."""
        if proposer not in self.miners:
            return None
        base = height % len(self.miners)
        return (self.miners.index(proposer) - base) % len(self.miners)


def expected_proposer(height: int, validators: ValidatorSet) -> bytes:
    return validators.scheduled(height)


def allowed_offset(parent_timestamp: int, now: int, block_interval_ms: int) -> int:
    """Largest successor offset permitted by the elapsed time since the
    parent block (one extra step per TIMEOUT_INTERVALS block intervals)."""
    gap = max(0, now - parent_timestamp)
    window = TIMEOUT_INTERVALS * block_interval_ms / 1000.0
    return int(gap / window) if window > 0 else 0


class Mempool:
    """Arrival-ordered pending transactions, deduplicated by hash.

    Admission accepts any well-signed, dispatchable transaction whose nonce
    is not already used (>= committed sender nonce); ordering within a block
    is settled at proposal time by sequential validation.
    """

    def __init__(self):
        self._txs: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, tx_hash: bytes) -> bool:
        return tx_hash in self._txs

    def admit(
        self, tx: Transaction, state: WorldState, keys: PublicKeyDirectory
    ) -> Optional[Violation]:
        tx_hash = tx.tx_hash()
        if tx_hash in self._txs:
            return Violation("duplicate", "transaction already pending")
        bad = validate_transaction(state, tx, keys)
        # future nonces queue; only replays of spent nonces are refused
        if bad is not None and not (
            bad.code == "nonce-mismatch" and tx.nonce > state.nonce_of(tx.sender)
        ):
            return bad
        self._txs[tx_hash] = tx
        return None

    def readd(self, txs: Iterable[Transaction]) -> None:
        """Return transactions from an abandoned branch, preserving their
        relative order, behind anything already pending."""
        for tx in txs:
            self._txs.setdefault(tx.tx_hash(), tx)

    def snapshot(self) -> list:
        return list(self._txs.values())

    def remove(self, tx_hashes: Iterable[bytes]) -> None:
        for tx_hash in tx_hashes:
            self._txs.pop(tx_hash, None)

    def evict_stale(self, state: WorldState) -> int:
        """Drop entries whose nonce can never apply again (already spent)."""
        stale = [
            h for h, tx in self._txs.items() if tx.nonce < state.nonce_of(tx.sender)
        ]
        for h in stale:
            del self._txs[h]
        return len(stale)


def build_block(
    parent: BlockHeader,
    state: WorldState,
    mempool_txs: Sequence[Transaction],
    proposer: Account,
    keys: PublicKeyDirectory,
    timestamp: Optional[int] = None,
) -> tuple:
    """Assemble and sign a block extending `parent`.

    Transactions are validated sequentially against a working state in
    arrival order; invalid ones are skipped (left in the mempool for
    eviction). Returns (block, post_state, skipped) where skipped lists
    (tx, violation) pairs.
    """
    height = parent.height + 1
    working = state.copy()
    working.height = height
    included: list = []
    skipped: list = []
    for tx in mempool_txs:
        attempt = working.copy()
        bad = apply_transaction(attempt, tx, height, keys)
        if bad is None:
            working = attempt
            included.append(tx)
        else:
            skipped.append((tx, bad))
    header = BlockHeader(
        height=height,
        parent_hash=parent.header_hash(),
        tx_root=compute_tx_root(included),
        state_root=state_root(working),
        proposer=proposer.address,
        timestamp=int(time.time()) if timestamp is None else timestamp,
    )
    header = replace(header, proposer_signature=proposer.sign(header.signing_bytes()))
    return Block(header=header, transactions=tuple(included)), working, skipped


def propose_block(
    view: "ChainView",
    mempool: Mempool,
    self_account: Account,
    validators: ValidatorSet,
    state: WorldState,
    keys: PublicKeyDirectory,
    block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS,
    now: Optional[int] = None,
) -> Optional[Block]:
    """Produce the next block if this miner's turn (or allowed successor slot)
    has come; None means not-my-turn."""
    now = int(time.time()) if now is None else now
    parent = view.head_block().header
    height = parent.height + 1
    offset = validators.proposer_offset(self_account.address, height)
    if offset is None:
        return None
    if offset > allowed_offset(parent.timestamp, now, block_interval_ms):
        return None
    block, _, _ = build_block(parent, state, mempool.snapshot(), self_account, keys, timestamp=now)
    return block


def verify_block_consensus(
    block: Block,
    validators: ValidatorSet,
    keys: PublicKeyDirectory,
    parent_timestamp: int,
    block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS,
) -> Optional[Violation]:
    """Proposer authorization, schedule (with successor allowance), and
    header signature. Pure check; transaction validity is apply_block's job."""
    header = block.header
    if not validators.miners:
        return Violation("no-validators", "empty validator set")
    if header.proposer not in validators:
        return Violation("not-authorized", f"proposer 0x{header.proposer.hex()} not a certified miner")
    offset = validators.proposer_offset(header.proposer, header.height)
    if offset != 0:
        allowed = allowed_offset(parent_timestamp, header.timestamp, block_interval_ms)
        if offset > allowed:
            return Violation(
                "wrong-proposer",
                f"offset {offset} proposer at height {header.height}, allowance {allowed}",
            )
    public_key = keys.get(header.proposer)
    if public_key is None:
        return Violation("not-authorized", "no enrolled key for proposer")
    if not verify(public_key, header.signing_bytes(), header.proposer_signature):
        return Violation("bad-signature", "proposer signature does not verify")
    return None


@dataclass
class ChainView:
    """All known blocks by hash plus the current head.

    `finalized_height` is reporting-only (head height minus FINALITY_DEPTH,
    floored at zero); there is no protocol-level finality.
    """

    blocks: dict = field(default_factory=dict)
    head: bytes = b""
    finalized_height: int = 0

    @classmethod
    def from_genesis(cls, genesis: Block) -> "ChainView":
        view = cls()
        view.blocks[genesis.block_hash()] = genesis
        view.head = genesis.block_hash()
        return view

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def head_block(self) -> Block:
        return self.blocks[self.head]

    def head_height(self) -> int:
        return self.head_block().header.height

    def get(self, block_hash: bytes) -> Optional[Block]:
        return self.blocks.get(block_hash)

    def add_block(self, block: Block) -> None:
        self.blocks[block.block_hash()] = block

    def chain_to(self, block_hash: bytes) -> list:
        """Blocks from genesis to `block_hash`, inclusive."""
        chain = []
        cursor = self.blocks.get(block_hash)
        while cursor is not None:
            chain.append(cursor)
            if cursor.header.height == 0:
                break
            cursor = self.blocks.get(cursor.header.parent_hash)
        else:
            raise BlendmasError(f"chain to {block_hash.hex()} does not reach genesis")
        chain.reverse()
        return chain

    def update_finality(self) -> None:
        self.finalized_height = max(0, self.head_height() - FINALITY_DEPTH)


def fork_choice(view: ChainView, candidate_head: bytes) -> bytes:
    """New head hash under the longest-chain rule with smallest-hash ties.

    The candidate must already be stored and fully validated; callers switch
    state by replaying from the common ancestor when the head changes.
    """
    candidate = view.blocks.get(candidate_head)
    if candidate is None:
        raise BlendmasError("fork_choice candidate unknown")
    current = view.head_block()
    if candidate.header.height > current.header.height:
        return candidate_head
    if candidate.header.height == current.header.height and candidate_head < view.head:
        return candidate_head
    return view.head


def common_ancestor(view: ChainView, a: bytes, b: bytes) -> bytes:
    """Hash of the deepest block on both branches."""
    seen = set()
    cursor = view.get(a)
    while cursor is not None:
        seen.add(cursor.block_hash())
        if cursor.header.height == 0:
            break
        cursor = view.get(cursor.header.parent_hash)
    cursor = view.get(b)
    while cursor is not None:
        if cursor.block_hash() in seen:
            return cursor.block_hash()
        cursor = view.get(cursor.header.parent_hash)
    raise BlendmasError("no common ancestor; chains do not share a genesis")
