"""Enrollment, roster signing/distribution, and revocation."""

import pytest

from blendmas.crypto import Account
from blendmas.errors import ConflictError, NotFoundError
from blendmas.oracle import Oracle, join_proof_payload
from blendmas.roster import NodeRecord, StaticNodesFile

T0 = 1_700_000_000


def _record(account, port=1000, role="client", host="127.0.0.1"):
    return NodeRecord(address=account.address, public_key=account.public_key,
                      host=host, port=port, role=role, enrolled_at=0)


@pytest.fixture
def oracle(tmp_path):
    genesis_member = Account.generate()
    oracle = Oracle(
        account=Account.generate(),
        data_dir=str(tmp_path / "oracle"),
        genesis_records=[_record(genesis_member, port=900, role="miner")],
        genesis_time=T0,
    )
    oracle.genesis_member = genesis_member
    return oracle


def test_genesis_roster_signed_epoch_one(oracle):
    assert oracle.roster.epoch == 1
    assert oracle.roster.verify(oracle.account.public_key)


def test_join_flow_auto_approves_client(oracle):
    candidate = Account.generate()
    record = _record(candidate, port=1001)
    pending_id, challenge = oracle.request_join(record)
    assert len(challenge) == 16
    proof = candidate.sign(join_proof_payload(record, challenge))
    assert oracle.approve_join(pending_id, proof) == "enrolled"
    assert oracle.roster.get(candidate.address) is not None
    assert oracle.roster.epoch == 2


def test_join_duplicate_address_already_enrolled(oracle):
    dup = _record(oracle.genesis_member, port=1002)
    with pytest.raises(ConflictError, match="already-enrolled"):
        oracle.request_join(dup)


def test_join_wrong_proof_authentication_failed(oracle):
    candidate, impostor = Account.generate(), Account.generate()
    record = _record(candidate, port=1003)
    pending_id, challenge = oracle.request_join(record)
    proof = impostor.sign(join_proof_payload(record, challenge))
    with pytest.raises(ConflictError, match="authentication-failed"):
        oracle.approve_join(pending_id, proof)
    assert oracle.roster.get(candidate.address) is None


def test_join_unknown_pending_id(oracle):
    with pytest.raises(NotFoundError):
        oracle.approve_join("deadbeef", b"\x00" * 64)


def test_miner_join_held_until_admin_confirms(oracle):
    candidate = Account.generate()
    record = _record(candidate, port=1004, role="miner")
    pending_id, challenge = oracle.request_join(record)
    proof = candidate.sign(join_proof_payload(record, challenge))
    assert oracle.approve_join(pending_id, proof) == "held"
    assert oracle.roster.get(candidate.address) is None  # not an error, just pending
    assert oracle.admin_approve(pending_id) == "enrolled"
    assert candidate.address in oracle.roster.validator_set().miners


def test_admin_approve_requires_proof_first(oracle):
    candidate = Account.generate()
    record = _record(candidate, port=1005, role="miner")
    pending_id, _ = oracle.request_join(record)
    with pytest.raises(ConflictError):
        oracle.admin_approve(pending_id)


def test_revoke_then_reapply_banned(oracle):
    candidate = Account.generate()
    record = _record(candidate, port=1006)
    pending_id, challenge = oracle.request_join(record)
    oracle.approve_join(pending_id, candidate.sign(join_proof_payload(record, challenge)))
    epoch_before = oracle.roster.epoch
    oracle.revoke_member(candidate.address, "misbehaved")
    assert oracle.roster.get(candidate.address) is None
    assert oracle.roster.epoch == epoch_before + 1
    with pytest.raises(ConflictError, match="banned"):
        oracle.request_join(record)
    # explicit admin clear re-opens the door
    oracle.clear_revocation(candidate.address)
    pending_id, challenge = oracle.request_join(record)
    assert oracle.approve_join(
        pending_id, candidate.sign(join_proof_payload(record, challenge))
    ) == "enrolled"


def test_revoke_unknown_address(oracle):
    with pytest.raises(NotFoundError):
        oracle.revoke_member(b"\x42" * 20, "never enrolled")


def test_revoking_miner_shrinks_schedule(oracle):
    a = oracle.genesis_member
    b, c = Account.generate(), Account.generate()
    for i, acct in enumerate((b, c)):
        record = _record(acct, port=1100 + i, role="miner")
        pid, ch = oracle.request_join(record)
        oracle.approve_join(pid, acct.sign(join_proof_payload(record, ch)))
        oracle.admin_approve(pid)
    assert set(oracle.roster.validator_set().miners) == {a.address, b.address, c.address}
    oracle.revoke_member(b.address, "miner gone rogue")
    vs = oracle.roster.validator_set()
    assert set(vs.miners) == {a.address, c.address}
    # round-robin now cycles over the two remaining miners
    schedule = [vs.scheduled(h) for h in range(4)]
    assert schedule == [vs.miners[0], vs.miners[1], vs.miners[0], vs.miners[1]]


def test_epoch_strictly_increases(oracle):
    epochs = [oracle.roster.epoch]
    for i in range(3):
        acct = Account.generate()
        record = _record(acct, port=1200 + i)
        pid, ch = oracle.request_join(record)
        oracle.approve_join(pid, acct.sign(join_proof_payload(record, ch)))
        epochs.append(oracle.roster.epoch)
    oracle.revoke_member(oracle.roster.records[-1].address, "bye")
    epochs.append(oracle.roster.epoch)
    assert epochs == sorted(set(epochs))


def test_duplicate_endpoint_rejected(oracle):
    first = Account.generate()
    record = _record(first, port=1300)
    pid, ch = oracle.request_join(record)
    oracle.approve_join(pid, first.sign(join_proof_payload(record, ch)))
    second = Account.generate()
    clash = _record(second, port=1300)  # same (host, port)
    pid, ch = oracle.request_join(clash)
    with pytest.raises(ConflictError, match="host, port"):
        oracle.approve_join(pid, second.sign(join_proof_payload(clash, ch)))


def test_oracle_restart_recovers_state(tmp_path):
    member = Account.generate()
    oracle = Oracle(
        account=Account.generate(),
        data_dir=str(tmp_path / "o"),
        genesis_records=[_record(member, port=1400, role="miner")],
        genesis_time=T0,
    )
    victim = Account.generate()
    record = _record(victim, port=1401)
    pid, ch = oracle.request_join(record)
    oracle.approve_join(pid, victim.sign(join_proof_payload(record, ch)))
    oracle.revoke_member(victim.address, "flap")
    epoch = oracle.roster.epoch

    again = Oracle(account=oracle.account, data_dir=str(tmp_path / "o"),
                   genesis_records=[], genesis_time=None)
    assert again.roster.epoch == epoch
    assert again.genesis_time == T0
    assert victim.address in again.revoked
    assert again.roster.verify(oracle.account.public_key)


def test_static_nodes_file_round_trips(tmp_path, oracle):
    oracle.roster.save(str(tmp_path / "snf"))
    loaded = StaticNodesFile.load(str(tmp_path / "snf"))
    assert loaded == oracle.roster
    assert loaded.canonical_bytes() == oracle.roster.canonical_bytes()


def test_tampered_roster_fails_verification(oracle):
    snf = oracle.roster
    record = snf.records[0]
    forged_record = NodeRecord(
        address=record.address, public_key=record.public_key, host=record.host,
        port=record.port + 1, role=record.role, enrolled_at=record.enrolled_at,
    )
    forged = StaticNodesFile(epoch=snf.epoch, records=(forged_record,) + snf.records[1:],
                             oracle_signature=snf.oracle_signature)
    assert not forged.verify(oracle.account.public_key)


def test_no_self_admission_without_oracle_signature(oracle):
    """A roster not signed by the oracle never verifies, whatever it claims."""
    rogue = Account.generate()
    records = list(oracle.roster.records) + [_record(rogue, port=1500)]
    self_made = StaticNodesFile.signed(oracle.roster.epoch + 1, records, rogue)
    assert not self_made.verify(oracle.account.public_key)
