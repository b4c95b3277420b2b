"""Built-in deterministic contracts: the capability-token registry ("capac")
and the hashed-index registry ("hashed_index").

There is no user bytecode or VM. Each contract kind is a fixed set of named
functions (the ABI) dispatched from transactions included in blocks. Writes
happen only through dispatch inside block application; reads are served from
committed state and never mutate anything.

ABI (argument encodings are documented in docs/wire-format.md):

  kind          function        mutates  args
  ------------  --------------  -------  ----------------------------------
  (deploy)      deploy          yes      [kind utf-8]           target = zero address
  capac         grant_writer    yes      [writer address, 20 raw bytes]
  capac         revoke_writer   yes      [writer address, 20 raw bytes]
  capac         set_token       yes      [token canonical JSON bytes]
  capac         revoke_token    yes      [subject 20 bytes, resource utf-8]
  capac         query_token     no       read API, not valid in a transaction
  hashed_index  grant_writer    yes      [writer address, 20 raw bytes]
  hashed_index  revoke_writer   yes      [writer address, 20 raw bytes]
  hashed_index  record          yes      [key utf-8, value hash 32 bytes]
  hashed_index  query           no       read API, not valid in a transaction
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

from .codec import canonical_json, u64
from .crypto import ADDRESS_LEN, ZERO_ADDRESS, sha256
from .errors import NotFoundError, Violation

if TYPE_CHECKING:
    from .ledger import Transaction, WorldState

KIND_CAPAC = "capac"
KIND_HASHED_INDEX = "hashed_index"
CONTRACT_KINDS = (KIND_CAPAC, KIND_HASHED_INDEX)

HTTP_ACTIONS = frozenset({"GET", "POST", "PUT", "DELETE"})
TOKEN_ID_LEN = 16

DEPLOY_FUNCTION = "deploy"
MUTATING_FUNCTIONS = {
    KIND_CAPAC: frozenset({"grant_writer", "revoke_writer", "set_token", "revoke_token"}),
    KIND_HASHED_INDEX: frozenset({"grant_writer", "revoke_writer", "record"}),
}
READ_FUNCTIONS = {
    KIND_CAPAC: frozenset({"query_token"}),
    KIND_HASHED_INDEX: frozenset({"query"}),
}


@dataclass(frozen=True)
class CapToken:
    """Capability grant: subject may perform `actions` on `resource` while
    enabled and inside [not_before, not_after]."""

    token_id: bytes
    issuer: bytes
    subject: bytes
    resource: str
    actions: frozenset
    not_before: int
    not_after: int
    enabled: bool = True

    def shape_violation(self) -> Optional[Violation]:
        if len(self.token_id) != TOKEN_ID_LEN:
            return Violation("malformed-token", "token_id must be 16 bytes")
        if not self.actions or not self.actions <= HTTP_ACTIONS:
            return Violation("malformed-token", f"actions must be a non-empty subset of {sorted(HTTP_ACTIONS)}")
        if self.not_before > self.not_after:
            return Violation("malformed-token", "not_before > not_after")
        return None

    def to_json_obj(self) -> dict:
        return {
            "token_id": self.token_id.hex(),
            "issuer": "0x" + self.issuer.hex(),
            "subject": "0x" + self.subject.hex(),
            "resource": self.resource,
            "actions": sorted(self.actions),
            "not_before": self.not_before,
            "not_after": self.not_after,
            "enabled": self.enabled,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CapToken":
        return cls(
            token_id=bytes.fromhex(obj["token_id"]),
            issuer=bytes.fromhex(obj["issuer"][2:]),
            subject=bytes.fromhex(obj["subject"][2:]),
            resource=obj["resource"],
            actions=frozenset(obj["actions"]),
            not_before=int(obj["not_before"]),
            not_after=int(obj["not_after"]),
            enabled=bool(obj["enabled"]),
        )

    def arg_bytes(self) -> bytes:
        """Canonical argument encoding for a set_token transaction."""
        return canonical_json(self.to_json_obj())


@dataclass(frozen=True)
class HashedIndexRecord:
    """Immutable key -> content-hash anchor; `height` is the inclusion height."""

    key: str
    value_hash: bytes
    recorder: bytes
    height: int

    def to_json_obj(self) -> dict:
        return {
            "key": self.key,
            "value_hash": self.value_hash.hex(),
            "recorder": "0x" + self.recorder.hex(),
            "height": self.height,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "HashedIndexRecord":
        return cls(
            key=obj["key"],
            value_hash=bytes.fromhex(obj["value_hash"]),
            recorder=bytes.fromhex(obj["recorder"][2:]),
            height=int(obj["height"]),
        )


@dataclass
class ContractAccount:
    address: bytes
    kind: str
    owner: bytes
    writers: set = field(default_factory=set)
    # capac: {(subject bytes, resource str): CapToken}
    # hashed_index: {key str: HashedIndexRecord}
    storage: dict = field(default_factory=dict)

    def may_write(self, caller: bytes) -> bool:
        return caller == self.owner or caller in self.writers

    def to_state_obj(self) -> dict:
        if self.kind == KIND_CAPAC:
            storage: dict = {}
            for (subject, resource), token in self.storage.items():
                storage.setdefault("0x" + subject.hex(), {})[resource] = token.to_json_obj()
        else:
            storage = {key: rec.to_json_obj() for key, rec in self.storage.items()}
        return {
            "kind": self.kind,
            "owner": "0x" + self.owner.hex(),
            "writers": sorted("0x" + w.hex() for w in self.writers),
            "storage": storage,
        }

    @classmethod
    def from_state_obj(cls, address: bytes, obj: dict) -> "ContractAccount":
        kind = obj["kind"]
        if kind == KIND_CAPAC:
            storage = {}
            for subject_hex, by_resource in obj["storage"].items():
                for resource, token_obj in by_resource.items():
                    storage[(bytes.fromhex(subject_hex[2:]), resource)] = CapToken.from_json_obj(token_obj)
        else:
            storage = {key: HashedIndexRecord.from_json_obj(rec) for key, rec in obj["storage"].items()}
        return cls(
            address=address,
            kind=kind,
            owner=bytes.fromhex(obj["owner"][2:]),
            writers={bytes.fromhex(w[2:]) for w in obj["writers"]},
            storage=storage,
        )

    def clone(self) -> "ContractAccount":
        return ContractAccount(
            address=self.address,
            kind=self.kind,
            owner=self.owner,
            writers=set(self.writers),
            storage=dict(self.storage),
        )


def contract_address(deployer: bytes, nonce: int) -> bytes:
    """Deterministic contract address: last 20 bytes of SHA-256(deployer || nonce)."""
    return sha256(deployer + u64(nonce))[-ADDRESS_LEN:]


def resolve_function(state: "WorldState", target: bytes, function: str) -> Optional[Violation]:
    """Check that (target, function) names a dispatchable contract call."""
    if target == ZERO_ADDRESS:
        if function == DEPLOY_FUNCTION:
            return None
        return Violation("dispatch", f"unknown function {function!r} on deployment target")
    contract = state.contracts.get(target)
    if contract is None:
        return Violation("dispatch", f"no contract at 0x{target.hex()}")
    if function in MUTATING_FUNCTIONS[contract.kind]:
        return None
    if function in READ_FUNCTIONS[contract.kind]:
        return Violation("dispatch", f"{function!r} is read-only and not valid in a transaction")
    return Violation("dispatch", f"unknown function {function!r} on {contract.kind} contract")


def dispatch(state: "WorldState", tx: "Transaction", height: int) -> Optional[Violation]:
    """Route a validated transaction to its handler, mutating `state` in place.

    Callers operate on a working copy of the state; a returned violation
    means the copy must be discarded.
    """
    if tx.target == ZERO_ADDRESS and tx.function == DEPLOY_FUNCTION:
        return _deploy(state, tx)
    contract = state.contracts.get(tx.target)
    if contract is None:
        return Violation("dispatch", f"no contract at 0x{tx.target.hex()}")
    handler = _HANDLERS.get((contract.kind, tx.function))
    if handler is None:
        return resolve_function(state, tx.target, tx.function) or Violation("dispatch", tx.function)
    return handler(contract, tx, height)


def _deploy(state: "WorldState", tx: "Transaction") -> Optional[Violation]:
    if len(tx.args) != 1:
        return Violation("malformed-args", "deploy takes exactly one argument")
    kind = tx.args[0].decode("utf-8", errors="replace")
    if kind not in CONTRACT_KINDS:
        return Violation("dispatch", f"unknown contract kind {kind!r}")
    address = contract_address(tx.sender, tx.nonce)
    if address in state.contracts:
        return Violation("address-collision", f"contract already at 0x{address.hex()}")
    state.contracts[address] = ContractAccount(address=address, kind=kind, owner=tx.sender)
    return None


def _writer_arg(tx: "Transaction") -> Optional[bytes]:
    if len(tx.args) != 1 or len(tx.args[0]) != ADDRESS_LEN:
        return None
    return tx.args[0]


def _grant_writer(contract: ContractAccount, tx: "Transaction", height: int) -> Optional[Violation]:
    if tx.sender != contract.owner:
        return Violation("not-owner", "only the owner may manage writers")
    writer = _writer_arg(tx)
    if writer is None:
        return Violation("malformed-args", "grant_writer takes one 20-byte address")
    contract.writers.add(writer)
    return None


def _revoke_writer(contract: ContractAccount, tx: "Transaction", height: int) -> Optional[Violation]:
    if tx.sender != contract.owner:
        return Violation("not-owner", "only the owner may manage writers")
    writer = _writer_arg(tx)
    if writer is None:
        return Violation("malformed-args", "revoke_writer takes one 20-byte address")
    contract.writers.discard(writer)
    return None


def _set_token(contract: ContractAccount, tx: "Transaction", height: int) -> Optional[Violation]:
    if not contract.may_write(tx.sender):
        return Violation("not-authorized", "caller is not an authorized writer")
    if len(tx.args) != 1:
        return Violation("malformed-args", "set_token takes one token argument")
    try:
        token = CapToken.from_json_obj(json.loads(tx.args[0]))
    except (ValueError, KeyError, TypeError):
        return Violation("malformed-token", "token argument did not parse")
    bad = token.shape_violation()
    if bad is not None:
        return bad
    # one token per (subject, resource); a new issuance overwrites
    contract.storage[(token.subject, token.resource)] = token
    return None


def _revoke_token(contract: ContractAccount, tx: "Transaction", height: int) -> Optional[Violation]:
    if not contract.may_write(tx.sender):
        return Violation("not-authorized", "caller is not an authorized writer")
    if len(tx.args) != 2 or len(tx.args[0]) != ADDRESS_LEN:
        return Violation("malformed-args", "revoke_token takes subject address and resource")
    key = (tx.args[0], tx.args[1].decode("utf-8", errors="replace"))
    token = contract.storage.get(key)
    if token is None:
        return Violation("token-not-found", "no token for that subject and resource")
    contract.storage[key] = replace(token, enabled=False)
    return None


def _record(contract: ContractAccount, tx: "Transaction", height: int) -> Optional[Violation]:
    if not contract.may_write(tx.sender):
        return Violation("not-authorized", "caller is not an authorized writer")
    if len(tx.args) != 2 or len(tx.args[1]) != 32:
        return Violation("malformed-args", "record takes a key and a 32-byte hash")
    key = tx.args[0].decode("utf-8", errors="replace")
    if key in contract.storage:
        return Violation("immutable-key", f"key {key!r} already recorded")
    contract.storage[key] = HashedIndexRecord(
        key=key, value_hash=tx.args[1], recorder=tx.sender, height=height
    )
    return None


_HANDLERS = {
    (KIND_CAPAC, "grant_writer"): _grant_writer,
    (KIND_CAPAC, "revoke_writer"): _revoke_writer,
    (KIND_CAPAC, "set_token"): _set_token,
    (KIND_CAPAC, "revoke_token"): _revoke_token,
    (KIND_HASHED_INDEX, "grant_writer"): _grant_writer,
    (KIND_HASHED_INDEX, "revoke_writer"): _revoke_writer,
    (KIND_HASHED_INDEX, "record"): _record,
}


def _get_contract(state: "WorldState", address: bytes, kind: str) -> ContractAccount:
    contract = state.contracts.get(address)
    if contract is None or contract.kind != kind:
        raise NotFoundError(f"no {kind} contract at 0x{address.hex()}")
    return contract


def query_token(state: "WorldState", contract: bytes, subject: bytes, resource: str) -> Optional[CapToken]:
    """Read-only token lookup against committed state; None if not issued."""
    return _get_contract(state, contract, KIND_CAPAC).storage.get((subject, resource))


def hidx_query(state: "WorldState", contract: bytes, key: str) -> Optional[HashedIndexRecord]:
    """Read-only hashed-index lookup against committed state; None if absent."""
    return _get_contract(state, contract, KIND_HASHED_INDEX).storage.get(key)
