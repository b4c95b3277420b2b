"""The network administrator: node enrollment, roster signing and
distribution, and revocation.

All roster mutations are serialized through a single lock; distribution fans
out concurrently per recipient. Joining is a two-step flow: request a
challenge, then prove key possession by signing (candidate fields ||
challenge). The identity policy is role-based: service and client joins
auto-approve once proven; miner joins are held until an admin confirms via
the CLI. Revocation is permanent unless an admin explicitly clears it.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import p2p
from .codec import canonical_json, string, u64, varbytes
from .crypto import Account, derive_address, verify
from .errors import ConflictError, NotFoundError
from .httpd import JsonHttpServer
from .roster import NodeRecord, ROLES, StaticNodesFile

log = logging.getLogger(__name__)

DEFAULT_POLICY = {"auto_approve_roles": ["service", "client"]}
DISTRIBUTION_ATTEMPTS = 3
DISTRIBUTION_BACKOFF_S = 0.2

STATE_FILENAME = "oracle-state.json"
POLICY_FILENAME = "policy.json"


def join_proof_payload(record: NodeRecord, challenge: bytes) -> bytes:
    """Bytes a candidate signs to prove key possession (enrolled_at excluded:
    the oracle assigns it on approval)."""
    return (
        record.address
        + varbytes(record.public_key)
        + string(record.host)
        + u64(record.port)
        + string(record.role)
        + varbytes(challenge)
    )


@dataclass
class PendingJoin:
    pending_id: str
    record: NodeRecord
    challenge: bytes
    proven: bool = False
    held_for_admin: bool = False
    requested_at: int = field(default_factory=lambda: int(time.time()))


class Oracle:
    def __init__(
        self,
        account: Account,
        data_dir: str,
        genesis_records: list,
        genesis_time: Optional[int] = None,
        policy: Optional[dict] = None,
    ):
        self.account = account
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)
        self._lock = threading.Lock()
        self.policy = dict(DEFAULT_POLICY if policy is None else policy)
        self.pending: dict = {}
        self.revoked: dict = {}
        state_path = os.path.join(data_dir, STATE_FILENAME)
        if os.path.exists(state_path):
            self._load(state_path)
        else:
            self.genesis_time = int(time.time()) if genesis_time is None else genesis_time
            self._check_record_invariants(genesis_records, [])
            self.roster = StaticNodesFile.signed(1, genesis_records, account)
            self._persist()

    # -- enrollment ----------------------------------------------------------

    def request_join(self, record: NodeRecord) -> tuple:
        """Start a join; returns (pending_id, challenge)."""
        with self._lock:
            if self.roster.get(record.address) is not None:
                raise ConflictError("already-enrolled")
            if record.address in self.revoked:
                raise ConflictError("banned")
            if record.role not in ROLES:
                raise ConflictError(f"unknown role {record.role!r}")
            if derive_address(record.public_key) != record.address:
                raise ConflictError("address does not match public key")
            pending_id = secrets.token_hex(8)
            challenge = secrets.token_bytes(16)
            self.pending[pending_id] = PendingJoin(pending_id, record, challenge)
            return pending_id, challenge

    def approve_join(self, pending_id: str, proof: bytes) -> str:
        """Verify the candidate's proof; returns "enrolled" or "held"
        (miners wait for explicit admin confirmation)."""
        with self._lock:
            pending = self.pending.get(pending_id)
            if pending is None:
                raise NotFoundError("unknown pending id")
            payload = join_proof_payload(pending.record, pending.challenge)
            if not verify(pending.record.public_key, payload, proof):
                raise ConflictError("authentication-failed")
            pending.proven = True
            if pending.record.role not in self.policy["auto_approve_roles"]:
                pending.held_for_admin = True
                return "held"
            self._enroll(pending)
            return "enrolled"

    def admin_approve(self, pending_id: str) -> str:
        """Admin confirmation for held (miner) joins."""
        with self._lock:
            pending = self.pending.get(pending_id)
            if pending is None:
                raise NotFoundError("unknown pending id")
            if not pending.proven:
                raise ConflictError("candidate has not proven key possession")
            self._enroll(pending)
            return "enrolled"

    def _enroll(self, pending: PendingJoin) -> None:
        record = NodeRecord(
            address=pending.record.address,
            public_key=pending.record.public_key,
            host=pending.record.host,
            port=pending.record.port,
            role=pending.record.role,
            enrolled_at=int(time.time()),
        )
        records = list(self.roster.records) + [record]
        self._check_record_invariants(records, self.revoked)
        self.roster = StaticNodesFile.signed(self.roster.epoch + 1, records, self.account)
        del self.pending[pending.pending_id]
        self._persist()
        log.info("enrolled 0x%s role=%s epoch=%d", record.address.hex(), record.role, self.roster.epoch)

    @staticmethod
    def _check_record_invariants(records, revoked) -> None:
        addresses = [r.address for r in records]
        endpoints = [(r.host, r.port) for r in records]
        if len(set(addresses)) != len(addresses):
            raise ConflictError("duplicate address in roster")
        if len(set(endpoints)) != len(endpoints):
            raise ConflictError("duplicate (host, port) in roster")
        for r in records:
            if r.address in revoked:
                raise ConflictError("revoked address in roster")
            if derive_address(r.public_key) != r.address:
                raise ConflictError("address does not match public key")

    # -- revocation ----------------------------------------------------------

    def revoke_member(self, address: bytes, reason: str) -> None:
        with self._lock:
            record = self.roster.get(address)
            if record is None:
                raise NotFoundError(f"0x{address.hex()} is not enrolled")
            records = [r for r in self.roster.records if r.address != address]
            self.revoked[address] = reason
            self.roster = StaticNodesFile.signed(self.roster.epoch + 1, records, self.account)
            self._persist()
            log.info("revoked 0x%s (%s) epoch=%d", address.hex(), reason, self.roster.epoch)

    def clear_revocation(self, address: bytes) -> None:
        with self._lock:
            if address not in self.revoked:
                raise NotFoundError("address is not on the revocation list")
            del self.revoked[address]
            self._persist()

    # -- distribution --------------------------------------------------------

    def distribute(self) -> list:
        """Push the current roster to every enrolled node's wire endpoint.

        Three attempts with exponential backoff per recipient, concurrent
        fan-out; unreachable nodes are logged and reported in the result.
        """
        with self._lock:
            roster = self.roster
        payload = canonical_json(roster.to_json_obj())
        results = []
        results_lock = threading.Lock()

        def push(record: NodeRecord) -> None:
            delay = DISTRIBUTION_BACKOFF_S
            for attempt in range(1, DISTRIBUTION_ATTEMPTS + 1):
                try:
                    p2p.send_one_shot(record.host, record.port, self.account, "roster", payload)
                    with results_lock:
                        results.append({"address": "0x" + record.address.hex(),
                                        "delivered": True, "attempts": attempt})
                    return
                except OSError:
                    time.sleep(delay)
                    delay *= 2
            log.warning("roster push to 0x%s (%s:%d) failed after %d attempts",
                        record.address.hex(), record.host, record.port, DISTRIBUTION_ATTEMPTS)
            with results_lock:
                results.append({"address": "0x" + record.address.hex(),
                                "delivered": False, "attempts": DISTRIBUTION_ATTEMPTS})

        threads = [threading.Thread(target=push, args=(r,), daemon=True) for r in roster.records]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results

    # -- persistence ---------------------------------------------------------

    def _persist(self) -> None:
        self.roster.save(self.data_dir)
        state = {
            "genesis_time": self.genesis_time,
            "revoked": {"0x" + a.hex(): reason for a, reason in self.revoked.items()},
        }
        with open(os.path.join(self.data_dir, STATE_FILENAME), "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=2)
        policy_path = os.path.join(self.data_dir, POLICY_FILENAME)
        if not os.path.exists(policy_path):
            with open(policy_path, "w", encoding="utf-8") as fh:
                json.dump(self.policy, fh, indent=2)

    def _load(self, state_path: str) -> None:
        with open(state_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        self.genesis_time = int(state["genesis_time"])
        self.revoked = {bytes.fromhex(a[2:]): reason for a, reason in state["revoked"].items()}
        self.roster = StaticNodesFile.load(self.data_dir)
        policy_path = os.path.join(self.data_dir, POLICY_FILENAME)
        if os.path.exists(policy_path):
            with open(policy_path, "r", encoding="utf-8") as fh:
                self.policy = json.load(fh)

    # -- introspection -------------------------------------------------------

    def pending_list(self) -> list:
        with self._lock:
            return [
                {
                    "pending_id": p.pending_id,
                    "record": p.record.to_json_obj(),
                    "proven": p.proven,
                    "held_for_admin": p.held_for_admin,
                    "requested_at": p.requested_at,
                }
                for p in self.pending.values()
            ]


class OracleApp:
    """HTTP face of the oracle: join flow, roster/genesis pulls, admin API."""

    def __init__(self, oracle: Oracle, host: str = "127.0.0.1", port: int = 0):
        self.oracle = oracle
        routes = [
            ("GET", "/health", self._health),
            ("GET", "/genesis", self._genesis),
            ("GET", "/roster", self._roster),
            ("POST", "/join", self._join),
            ("POST", "/join/proof", self._join_proof),
            ("GET", "/admin/pending", self._pending),
            ("POST", "/admin/approve", self._admin_approve),
            ("POST", "/admin/revoke", self._admin_revoke),
            ("POST", "/admin/clear-revocation", self._admin_clear),
            ("POST", "/admin/distribute", self._admin_distribute),
        ]
        self.server = JsonHttpServer(host, port, routes, name="oracle")

    @property
    def port(self) -> int:
        return self.server.port

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()

    def _health(self, params, body, query):
        return 200, {"ok": True, "epoch": self.oracle.roster.epoch,
                     "members": len(self.oracle.roster.records)}

    def _genesis(self, params, body, query):
        return 200, {
            "ok": True,
            "genesis_time": self.oracle.genesis_time,
            "oracle_public_key": self.oracle.account.public_key.hex(),
            "oracle_address": "0x" + self.oracle.account.address.hex(),
        }

    def _roster(self, params, body, query):
        return 200, {"ok": True, "static_nodes": self.oracle.roster.to_json_obj()}

    def _join(self, params, body, query):
        try:
            record = NodeRecord(
                address=bytes.fromhex(body["address"][2:]),
                public_key=bytes.fromhex(body["public_key"]),
                host=body["host"],
                port=int(body["port"]),
                role=body["role"],
                enrolled_at=0,
            )
            pending_id, challenge = self.oracle.request_join(record)
        except ConflictError as err:
            return 409, {"ok": False, "reason": str(err)}
        except (KeyError, ValueError) as err:
            return 400, {"ok": False, "reason": f"malformed join request: {err}"}
        return 200, {"ok": True, "pending_id": pending_id, "challenge": challenge.hex()}

    def _join_proof(self, params, body, query):
        try:
            status = self.oracle.approve_join(body["pending_id"], bytes.fromhex(body["proof"]))
        except NotFoundError as err:
            return 404, {"ok": False, "reason": str(err)}
        except ConflictError as err:
            return 403, {"ok": False, "reason": str(err)}
        except (KeyError, ValueError) as err:
            return 400, {"ok": False, "reason": f"malformed proof: {err}"}
        if status == "enrolled":
            self.oracle.distribute()
        return 200, {"ok": True, "status": status}

    def _pending(self, params, body, query):
        return 200, {"ok": True, "pending": self.oracle.pending_list()}

    def _admin_approve(self, params, body, query):
        try:
            self.oracle.admin_approve(body["pending_id"])
        except NotFoundError as err:
            return 404, {"ok": False, "reason": str(err)}
        except ConflictError as err:
            return 403, {"ok": False, "reason": str(err)}
        self.oracle.distribute()
        return 200, {"ok": True, "status": "enrolled"}

    def _admin_revoke(self, params, body, query):
        try:
            self.oracle.revoke_member(bytes.fromhex(body["address"][2:]), body.get("reason", ""))
        except NotFoundError as err:
            return 404, {"ok": False, "reason": str(err)}
        except (KeyError, ValueError) as err:
            return 400, {"ok": False, "reason": f"malformed revoke request: {err}"}
        self.oracle.distribute()
        return 200, {"ok": True, "epoch": self.oracle.roster.epoch}

    def _admin_clear(self, params, body, query):
        try:
            self.oracle.clear_revocation(bytes.fromhex(body["address"][2:]))
        except NotFoundError as err:
            return 404, {"ok": False, "reason": str(err)}
        return 200, {"ok": True}

    def _admin_distribute(self, params, body, query):
        return 200, {"ok": True, "results": self.oracle.distribute()}
