"""Transaction validation, block application, and replay determinism."""

import dataclasses

import pytest

from blendmas import contracts
from blendmas.crypto import Account, ZERO_ADDRESS, ZERO_HASH
from blendmas.errors import InvalidBlockError
from blendmas.ledger import (
    Block,
    BlockHeader,
    Transaction,
    apply_block,
    compute_tx_root,
    empty_state,
    genesis_block,
    make_transaction,
    replay_chain,
    state_root,
    validate_transaction,
    verify_chain_linkage,
)

GENESIS_TIME = 1_700_000_000


def _deploy_tx(account, nonce, kind=contracts.KIND_CAPAC):
    return make_transaction(
        account, nonce, ZERO_ADDRESS, "deploy", [kind.encode()], timestamp=GENESIS_TIME
    )


def _block_on(parent, txs, proposer, state, keys, timestamp=GENESIS_TIME + 1):
    """Assemble a valid block by applying txs to a copy of state."""
    working = state.copy()
    working.height = parent.header.height + 1
    from blendmas.ledger import apply_transaction

    for tx in txs:
        bad = apply_transaction(working, tx, working.height, keys)
        assert bad is None, bad
    header = BlockHeader(
        height=working.height,
        parent_hash=parent.block_hash(),
        tx_root=compute_tx_root(txs),
        state_root=state_root(working),
        proposer=proposer.address,
        timestamp=timestamp,
    )
    header = dataclasses.replace(
        header, proposer_signature=proposer.sign(header.signing_bytes())
    )
    return Block(header=header, transactions=tuple(txs)), working


def test_transaction_signing_round_trip(accounts, key_directory):
    state = empty_state()
    tx = _deploy_tx(accounts[0], 0)
    assert validate_transaction(state, tx, key_directory) is None


def test_transaction_bad_signature_detected(accounts, key_directory):
    tx = _deploy_tx(accounts[0], 0)
    forged = dataclasses.replace(tx, signature=bytes(64))
    bad = validate_transaction(empty_state(), forged, key_directory)
    assert bad is not None and bad.code == "bad-signature"


def test_transaction_unknown_sender(accounts, key_directory):
    stranger = Account.generate()
    tx = _deploy_tx(stranger, 0)
    bad = validate_transaction(empty_state(), tx, key_directory)
    assert bad is not None and bad.code == "unknown-sender"


def test_replayed_transaction_nonce_violation(accounts, key_directory):
    genesis = genesis_block(GENESIS_TIME)
    state = empty_state()
    tx = _deploy_tx(accounts[0], 0)
    block, new_state = _block_on(genesis, [tx], accounts[1], state, key_directory)
    applied = apply_block(state, block, key_directory)
    assert state_root(applied) == state_root(new_state)
    bad = validate_transaction(applied, tx, key_directory)
    assert bad is not None and bad.code == "nonce-mismatch"


def test_unknown_function_dispatch_violation(accounts, key_directory):
    # enumerate every known function over both kinds, plus one bogus name
    state = empty_state()
    deployer = accounts[0]
    from blendmas.ledger import apply_transaction

    apply_transaction(state, _deploy_tx(deployer, 0, contracts.KIND_CAPAC), 1, key_directory)
    apply_transaction(state, _deploy_tx(deployer, 1, contracts.KIND_HASHED_INDEX), 1, key_directory)
    capac_addr = contracts.contract_address(deployer.address, 0)
    hidx_addr = contracts.contract_address(deployer.address, 1)

    for addr, kind in ((capac_addr, contracts.KIND_CAPAC), (hidx_addr, contracts.KIND_HASHED_INDEX)):
        for fn in contracts.MUTATING_FUNCTIONS[kind]:
            assert contracts.resolve_function(state, addr, fn) is None
        for fn in contracts.READ_FUNCTIONS[kind]:
            bad = contracts.resolve_function(state, addr, fn)
            assert bad is not None and bad.code == "dispatch"
        # functions of the other kind do not resolve
        other = contracts.KIND_HASHED_INDEX if kind == contracts.KIND_CAPAC else contracts.KIND_CAPAC
        for fn in contracts.MUTATING_FUNCTIONS[other] - contracts.MUTATING_FUNCTIONS[kind]:
            bad = contracts.resolve_function(state, addr, fn)
            assert bad is not None and bad.code == "dispatch"
        bad = contracts.resolve_function(state, addr, "definitely_not_a_function")
        assert bad is not None and bad.code == "dispatch"


def test_empty_block_advances_height_only(accounts, key_directory):
    genesis = genesis_block(GENESIS_TIME)
    state = empty_state()
    block, _ = _block_on(genesis, [], accounts[0], state, key_directory)
    new_state = apply_block(state, block, key_directory)
    assert new_state.height == 1
    assert new_state.nonces == {}
    assert state.height == 0  # original untouched


def test_apply_block_deterministic_across_nodes(accounts, key_directory):
    genesis = genesis_block(GENESIS_TIME)
    tx = _deploy_tx(accounts[0], 0)
    block, _ = _block_on(genesis, [tx], accounts[1], empty_state(), key_directory)
    a = apply_block(empty_state(), block, key_directory)
    b = apply_block(empty_state(), block, key_directory)
    assert state_root(a) == state_root(b)


def test_block_with_one_invalid_transaction_rejected_whole(accounts, key_directory):
    genesis = genesis_block(GENESIS_TIME)
    state = empty_state()
    good = _deploy_tx(accounts[0], 0)
    stale = _deploy_tx(accounts[0], 5)  # wrong nonce
    working = state.copy()
    working.height = 1
    from blendmas.ledger import apply_transaction

    apply_transaction(working, good, 1, key_directory)
    header = BlockHeader(
        height=1,
        parent_hash=genesis.block_hash(),
        tx_root=compute_tx_root([good, stale]),
        state_root=state_root(working),
        proposer=accounts[1].address,
        timestamp=GENESIS_TIME + 1,
    )
    header = dataclasses.replace(header, proposer_signature=accounts[1].sign(header.signing_bytes()))
    block = Block(header=header, transactions=(good, stale))
    before = state_root(state)
    with pytest.raises(InvalidBlockError) as err:
        apply_block(state, block, key_directory)
    assert err.value.tx_index == 1
    assert state_root(state) == before  # pre-state intact


def test_apply_block_rejects_wrong_state_root(accounts, key_directory):
    genesis = genesis_block(GENESIS_TIME)
    tx = _deploy_tx(accounts[0], 0)
    block, _ = _block_on(genesis, [tx], accounts[1], empty_state(), key_directory)
    tampered_header = dataclasses.replace(block.header, state_root=ZERO_HASH)
    tampered = Block(header=tampered_header, transactions=block.transactions)
    with pytest.raises(InvalidBlockError):
        apply_block(empty_state(), tampered, key_directory)


def _build_chain(accounts, key_directory, length=20):
    """A chain of `length` blocks with a deploy + writer-grant + record churn."""
    genesis = genesis_block(GENESIS_TIME)
    blocks = [genesis]
    state = empty_state()
    deployer = accounts[0]
    nonce = 0
    hidx_addr = contracts.contract_address(deployer.address, 0)
    for i in range(length):
        txs = []
        if i == 0:
            txs.append(_deploy_tx(deployer, nonce, contracts.KIND_HASHED_INDEX))
            nonce += 1
        elif i == 1:
            txs.append(
                make_transaction(
                    deployer, nonce, hidx_addr, "grant_writer", [accounts[1].address],
                    timestamp=GENESIS_TIME,
                )
            )
            nonce += 1
        else:
            txs.append(
                make_transaction(
                    deployer,
                    nonce,
                    hidx_addr,
                    "record",
                    [f"frame:{i:06d}".encode(), bytes([i]) * 32],
                    timestamp=GENESIS_TIME,
                )
            )
            nonce += 1
        block, state = _block_on(
            blocks[-1], txs, accounts[i % len(accounts)], state, key_directory,
            timestamp=GENESIS_TIME + i + 1,
        )
        blocks.append(block)
    return blocks, state


def test_replay_determinism_three_replays(accounts, key_directory):
    blocks, final_state = _build_chain(accounts, key_directory)
    roots = set()
    heights = set()
    for _ in range(3):
        replayed = replay_chain(blocks, key_directory)
        roots.add(state_root(replayed))
        heights.add(replayed.height)
    assert roots == {state_root(final_state)}
    assert heights == {final_state.height}


def test_hash_chaining_detects_tamper_in_every_block(accounts, key_directory):
    blocks, _ = _build_chain(accounts, key_directory)
    assert verify_chain_linkage(blocks) is None
    for i in range(1, len(blocks)):
        # alter one byte of one transaction arg in block i
        victim = blocks[i]
        tx = victim.transactions[0]
        bad_args = list(tx.args)
        bad_args[-1] = bytes([bad_args[-1][0] ^ 1]) + bad_args[-1][1:]
        tampered_tx = dataclasses.replace(tx, args=tuple(bad_args))
        tampered = Block(header=victim.header, transactions=(tampered_tx,) + victim.transactions[1:])
        mutated = list(blocks)
        mutated[i] = tampered
        assert verify_chain_linkage(mutated) is not None, f"tamper in block {i} undetected"
        # altering header bytes changes the header hash; for interior blocks
        # that breaks the child's parent link, for the tip the proposer
        # signature no longer verifies
        bumped = dataclasses.replace(victim.header, timestamp=victim.header.timestamp + 1)
        mutated[i] = Block(header=bumped, transactions=victim.transactions)
        assert mutated[i].block_hash() != victim.block_hash()
        if i < len(blocks) - 1:
            assert mutated[i].block_hash() != blocks[i + 1].header.parent_hash
            assert verify_chain_linkage(mutated) is not None
        else:
            from blendmas.crypto import verify as sig_verify

            proposer_key = key_directory[bumped.proposer]
            assert not sig_verify(proposer_key, bumped.signing_bytes(), bumped.proposer_signature)


def test_nonce_monotonicity(accounts, key_directory):
    blocks, state = _build_chain(accounts, key_directory, length=12)
    sent = sum(1 for b in blocks for tx in b.transactions if tx.sender == accounts[0].address)
    assert state.nonce_of(accounts[0].address) == sent


def test_genesis_block_is_constant():
    g1, g2 = genesis_block(GENESIS_TIME), genesis_block(GENESIS_TIME)
    assert g1.block_hash() == g2.block_hash()
    assert g1.header.parent_hash == ZERO_HASH
    assert g1.header.tx_root == ZERO_HASH


def test_transaction_json_round_trip(accounts):
    tx = make_transaction(
        accounts[0], 3, accounts[1].address, "set_token", [b"arg one", b""], timestamp=123
    )
    again = Transaction.from_json_obj(tx.to_json_obj())
    assert again == tx
    assert again.canonical_bytes() == tx.canonical_bytes()


def test_block_json_round_trip(accounts, key_directory):
    blocks, _ = _build_chain(accounts, key_directory, length=3)
    for block in blocks:
        again = Block.from_json_obj(block.to_json_obj())
        assert again.block_hash() == block.block_hash()
