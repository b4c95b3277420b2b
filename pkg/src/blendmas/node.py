"""A network node: chain storage, the single-writer consensus loop, gossip,
chain sync, and the admin HTTP endpoint.

One consensus loop per node consumes an inbox of (transaction, block,
roster) events; the proposal timer and network readers only enqueue. All
committed-state reads elsewhere are snapshot reads of the last committed
WorldState, which is never mutated after commit.

Chain reads used by the security services are *verified reads*: the node
recanonicalizes its committed state, recomputes the state root, and checks
it against the head header before answering. That makes every query a
tamper-evidence check (and is deliberately the expensive stage of the
access-control pipeline).
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from typing import Optional

from . import contracts, p2p
from .codec import canonical_json
from .config import NodeConfig
from .consensus import (
    ChainView,
    Mempool,
    ValidatorSet,
    allowed_offset,
    build_block,
    common_ancestor,
    fork_choice,
    verify_block_consensus,
)
from .crypto import Account, derive_address, verify
from .errors import BlendmasError, InvalidBlockError, Violation
from .httpd import JsonHttpServer
from .ledger import (
    Block,
    Transaction,
    apply_block,
    empty_state,
    genesis_block,
    make_transaction,
    state_root,
)
from .roster import StaticNodesFile

log = logging.getLogger(__name__)

SYNC_TIMEOUT_S = 15.0
INCLUSION_POLL_S = 0.02


class ChainIntegrityError(BlendmasError):
    """Committed state no longer matches the head header's state root."""


class Node:
    def __init__(
        self,
        config: NodeConfig,
        account: Account,
        roster: StaticNodesFile,
        oracle_public_key: bytes,
        genesis_time: int,
    ):
        self.config = config
        self.account = account
        self.oracle_public_key = oracle_public_key
        self.oracle_address = derive_address(oracle_public_key)
        if not roster.verify(oracle_public_key):
            raise BlendmasError("roster signature does not verify against oracle key")
        self.roster = roster
        self.validators: ValidatorSet = roster.validator_set()
        self.keys = roster.key_directory(oracle_public_key)
        # archive keeps keys of every installed epoch for historical replay
        self.archive_keys = dict(self.keys)

        self.genesis = genesis_block(genesis_time)
        self.view = ChainView.from_genesis(self.genesis)
        self.committed = empty_state()
        self.inclusions: dict = {}
        self._state_lock = threading.Lock()
        self._head_changed_mono = time.monotonic()
        self._last_proposed_height = 0

        self.mempool = Mempool()
        self._mempool_lock = threading.Lock()
        self._next_nonce = 0
        self._nonce_lock = threading.Lock()

        self.inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._orphans: dict = {}
        self._consensus_thread: Optional[threading.Thread] = None

        self.hub = p2p.PeerHub(
            account=account,
            listen_host=config.listen_host,
            listen_port=config.listen_port,
            on_message=self._on_wire_message,
            allowed=self._sender_allowed,
            key_of=self._key_of,
            name=f"node-{account.address.hex()[:8]}",
        )
        self.admin = JsonHttpServer(
            config.listen_host, config.http_port, self._admin_routes(),
            name=f"admin-{account.address.hex()[:8]}",
        )
        os.makedirs(config.data_dir, exist_ok=True)
        self._chain_log_path = os.path.join(config.data_dir, "chain.jsonl")

    # -- lifecycle -----------------------------------------------------------

    def start(self, sync: bool = True) -> None:
        self.hub.set_peers(self._peer_list())
        self.hub.start()
        self.admin.start()
        self._consensus_thread = threading.Thread(
            target=self._consensus_loop, name=f"consensus-{self.account.address.hex()[:8]}",
            daemon=True,
        )
        self._consensus_thread.start()
        if sync:
            threading.Thread(target=self._initial_sync, name="initial-sync", daemon=True).start()

    def stop(self) -> None:
        self._stop.set()
        if self._consensus_thread is not None:
            self._consensus_thread.join(timeout=5)
        self.hub.stop()
        self.admin.stop()

    # -- roster wiring -------------------------------------------------------

    def _peer_list(self) -> list:
        return [(r.address, r.host, r.port) for r in self.roster.records
                if r.address != self.account.address]

    def _sender_allowed(self, address: bytes) -> bool:
        return address == self.oracle_address or self.roster.get(address) is not None

    def _key_of(self, address: bytes) -> Optional[bytes]:
        return self.keys.get(address)

    def install_roster(self, snf: StaticNodesFile) -> bool:
        """Verify and install a pushed roster; stale epochs are rejected
        silently. Recomputes the validator set and peer links."""
        if not snf.verify(self.oracle_public_key):
            log.warning("rejected roster with bad oracle signature")
            return False
        if snf.epoch <= self.roster.epoch:
            log.debug("rejected stale roster epoch %d (installed %d)", snf.epoch, self.roster.epoch)
            return False
        self.roster = snf
        self.validators = snf.validator_set()
        self.keys = snf.key_directory(self.oracle_public_key)
        self.archive_keys.update(self.keys)
        self.hub.set_peers(self._peer_list())
        snf.save(self.config.data_dir)
        log.info("installed roster epoch %d (%d members, %d miners)",
                 snf.epoch, len(snf.records), len(self.validators.miners))
        return True

    # -- wire ingress --------------------------------------------------------

    def _on_wire_message(self, msg: dict, reply) -> None:
        msg_type = msg["type"]
        try:
            if msg_type == "tx":
                tx = Transaction.from_json_obj(json.loads(msg["payload"]))
                self.inbox.put(("tx", tx, msg["sender"]))
            elif msg_type == "block":
                block = Block.from_json_obj(json.loads(msg["payload"]))
                self.inbox.put(("block", block, msg["sender"]))
            elif msg_type == "roster":
                snf = StaticNodesFile.from_json_obj(json.loads(msg["payload"]))
                self.inbox.put(("roster", snf, msg["sender"]))
            elif msg_type == "get_blocks":
                from_height = int(json.loads(msg["payload"]).get("from_height", 0))
                reply(p2p.make_frame(self.account, "blocks", self._blocks_payload(from_height)))
            elif msg_type == "blocks":
                for obj in json.loads(msg["payload"])["blocks"]:
                    self.inbox.put(("block", Block.from_json_obj(obj), msg["sender"]))
        except (KeyError, ValueError, TypeError) as err:
            log.debug("dropped malformed %s message: %s", msg_type, err)

    def _blocks_payload(self, from_height: int) -> bytes:
        with self._state_lock:
            chain = self.view.chain_to(self.view.head)
        blocks = [b.to_json_obj() for b in chain if b.header.height > from_height]
        return canonical_json({"blocks": blocks})

    # -- consensus loop ------------------------------------------------------

    def _consensus_loop(self) -> None:
        tick = min(0.05, self.config.block_interval_ms / 1000.0 / 4)
        while not self._stop.is_set():
            try:
                item = self.inbox.get(timeout=tick)
            except queue.Empty:
                item = None
            if item is not None:
                kind = item[0]
                if kind == "tx":
                    self._handle_tx(item[1])
                elif kind == "block":
                    self._handle_block(item[1], item[2])
                elif kind == "roster":
                    self.install_roster(item[1])
            self._maybe_propose()

    def _handle_tx(self, tx: Transaction) -> None:
        with self._state_lock:
            state = self.committed
        with self._mempool_lock:
            bad = self.mempool.admit(tx, state, self.keys)
        if bad is None:
            payload = canonical_json(tx.to_json_obj())
            self.hub.broadcast("tx", payload, dedup_key=tx.tx_hash())
        elif bad.code not in ("duplicate", "nonce-mismatch"):
            log.debug("rejected tx from 0x%s: %s", tx.sender.hex(), bad)

    def _maybe_propose(self) -> None:
        if self.config.role != "miner" or self.account.address not in self.validators:
            return
        interval_s = self.config.block_interval_ms / 1000.0
        if time.monotonic() - self._head_changed_mono < interval_s:
            return
        with self._state_lock:
            head = self.view.head_block()
        height = head.header.height + 1
        if self._last_proposed_height == height:
            return
        offset = self.validators.proposer_offset(self.account.address, height)
        if offset is None:
            return
        now = int(time.time())
        if offset > 0 and offset > allowed_offset(head.header.timestamp, now, self.config.block_interval_ms):
            return
        with self._mempool_lock:
            pool_snapshot = self.mempool.snapshot()
        with self._state_lock:
            state = self.committed
        block, _, _ = build_block(head.header, state, pool_snapshot, self.account,
                                  self.archive_keys, timestamp=now)
        self._last_proposed_height = height
        self._import_block(block, sender=None)

    def _handle_block(self, block: Block, sender: Optional[bytes]) -> None:
        self._import_block(block, sender)

    def _import_block(self, block: Block, sender: Optional[bytes]) -> None:
        block_hash = block.block_hash()
        with self._state_lock:
            if block_hash in self.view:
                return
            parent = self.view.get(block.header.parent_hash)
        if parent is None:
            self._orphans.setdefault(block.header.parent_hash, []).append(block)
            if sender is not None:
                self._request_sync(sender)
            return
        bad = verify_block_consensus(
            block, self.validators, self.keys, parent.header.timestamp,
            self.config.block_interval_ms,
        )
        if bad is not None:
            log.warning("rejected block %d from 0x%s: %s",
                        block.header.height, block.header.proposer.hex(), bad)
            return
        with self._state_lock:
            if block.header.parent_hash == self.view.head:
                base = self.committed
            else:
                chain = self.view.chain_to(block.header.parent_hash)
                base = _replay_states(chain, self.archive_keys)
        try:
            post_state = apply_block(base, block, self.archive_keys)
        except InvalidBlockError as err:
            log.warning("invalid block %d from 0x%s: %s",
                        block.header.height, block.header.proposer.hex(), err)
            return
        self._adopt(block, post_state)
        self.hub.broadcast("block", canonical_json(block.to_json_obj()), dedup_key=block_hash)
        self._append_chain_log(block)
        # anything orphaned on this block can attach now
        for waiting in self._orphans.pop(block_hash, []):
            self._import_block(waiting, None)

    def _adopt(self, block: Block, post_state) -> None:
        block_hash = block.block_hash()
        with self._state_lock:
            old_head = self.view.head
            self.view.add_block(block)
            new_head = fork_choice(self.view, block_hash)
            if new_head == old_head:
                return
            rewound: list = []
            if block.header.parent_hash != old_head:
                # reorg: transactions of the abandoned branch re-enter the pool
                ancestor = common_ancestor(self.view, old_head, new_head)
                cursor = self.view.get(old_head)
                while cursor is not None and cursor.block_hash() != ancestor:
                    rewound.extend(cursor.transactions)
                    cursor = self.view.get(cursor.header.parent_hash)
                self.inclusions = {}
                for b in self.view.chain_to(new_head):
                    for tx in b.transactions:
                        self.inclusions[tx.tx_hash()] = b.header.height
            else:
                for tx in block.transactions:
                    self.inclusions[tx.tx_hash()] = block.header.height
            self.view.head = new_head
            self.committed = post_state
            self.view.update_finality()
            self._head_changed_mono = time.monotonic()
        with self._mempool_lock:
            self.mempool.readd(reversed(rewound))
            self.mempool.remove([tx.tx_hash() for tx in block.transactions])
            self.mempool.evict_stale(post_state)

    # -- sync ----------------------------------------------------------------

    def _request_sync(self, peer_address: bytes) -> None:
        record = self.roster.get(peer_address)
        if record is None:
            return
        threading.Thread(
            target=self._sync_from, args=(record.host, record.port),
            name="sync", daemon=True,
        ).start()

    def _sync_from(self, host: str, port: int) -> bool:
        """Fetch (from_height, head] from a peer and enqueue for validation."""
        payload = canonical_json({"from_height": 0})
        try:
            msg = p2p.request_response(host, port, self.account, "get_blocks",
                                       payload, timeout=SYNC_TIMEOUT_S)
        except OSError:
            return False
        if msg is None or msg["type"] != "blocks":
            return False
        if not self._sender_allowed(msg["sender"]):
            return False
        key = self.keys.get(msg["sender"])
        if key is None or not verify(key, b"blocks" + msg["payload"], msg["signature"]):
            return False
        try:
            blocks = [Block.from_json_obj(b) for b in json.loads(msg["payload"])["blocks"]]
        except (KeyError, ValueError, TypeError):
            return False
        for block in blocks:
            self.inbox.put(("block", block, None))
        return True

    def _initial_sync(self) -> None:
        deadline = time.monotonic() + SYNC_TIMEOUT_S
        while time.monotonic() < deadline and not self._stop.is_set():
            for record in self.roster.records:
                if record.address == self.account.address or record.role != "miner":
                    continue
                if self._sync_from(record.host, record.port):
                    return
            self._stop.wait(0.5)

    # -- submissions and reads ------------------------------------------------

    def submit_transaction(
        self,
        target: bytes,
        function: str,
        args,
        wait: bool = True,
        timeout: Optional[float] = None,
    ) -> dict:
        """Sign and gossip a transaction from this node's account; with
        wait=True, block until it lands in a committed block."""
        with self._nonce_lock:
            with self._state_lock:
                committed_nonce = self.committed.nonce_of(self.account.address)
            nonce = max(committed_nonce, self._next_nonce)
            self._next_nonce = nonce + 1
        tx = make_transaction(self.account, nonce, target, function, args)
        tx_hash = tx.tx_hash()
        self.inbox.put(("tx", tx, self.account.address))
        if not wait:
            return {"tx_hash": tx_hash.hex(), "status": "pending", "nonce": nonce}
        deadline = time.monotonic() + (timeout or max(10.0, 20 * self.config.block_interval_ms / 1000.0))
        while time.monotonic() < deadline:
            height = self.inclusions.get(tx_hash)
            if height is not None:
                return {"tx_hash": tx_hash.hex(), "status": "included",
                        "height": height, "nonce": nonce}
            time.sleep(INCLUSION_POLL_S)
        with self._nonce_lock:
            self._next_nonce = self.committed.nonce_of(self.account.address)
        raise TimeoutError(f"transaction {tx_hash.hex()} not included in time")

    def await_inclusion(self, tx_hash: bytes, timeout: float) -> Optional[int]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            height = self.inclusions.get(tx_hash)
            if height is not None:
                return height
            time.sleep(INCLUSION_POLL_S)
        return None

    def snapshot(self) -> tuple:
        with self._state_lock:
            return self.committed, self.view.head_block()

    def _verified_state(self):
        """Committed state after recomputing and checking its root against
        the head header (the hash-chain work behind every chain read)."""
        state, head = self.snapshot()
        if state_root(state) != head.header.state_root:
            raise ChainIntegrityError("committed state root does not match head header")
        return state

    def query_token(self, contract: bytes, subject: bytes, resource: str):
        return contracts.query_token(self._verified_state(), contract, subject, resource)

    def query_hidx(self, contract: bytes, key: str):
        return contracts.hidx_query(self._verified_state(), contract, key)

    def head_info(self) -> dict:
        state, head = self.snapshot()
        return {
            "height": head.header.height,
            "head": head.block_hash().hex(),
            "state_root": head.header.state_root.hex(),
            "epoch": self.roster.epoch,
            "finalized_height": self.view.finalized_height,
        }

    # -- admin HTTP ------------------------------------------------------------

    def _admin_routes(self) -> list:
        return [
            ("GET", "/health", self._h_health),
            ("GET", "/admin/head", self._h_head),
            ("GET", "/admin/state", self._h_state),
            ("GET", "/admin/blocks", self._h_blocks),
            ("GET", "/admin/mempool", self._h_mempool),
            ("POST", "/admin/roster", self._h_roster),
            ("POST", "/admin/partition", self._h_partition),
        ]

    def _h_health(self, params, body, query):
        return 200, {"ok": True, **self.head_info()}

    def _h_head(self, params, body, query):
        _, head = self.snapshot()
        return 200, {"ok": True, "hash": head.block_hash().hex(),
                     "header": head.header.to_json_obj()}

    def _h_state(self, params, body, query):
        state, head = self.snapshot()
        with self._mempool_lock:
            pool = len(self.mempool)
        return 200, {
            "ok": True,
            "height": state.height,
            "state_root": state_root(state).hex(),
            "epoch": self.roster.epoch,
            "mempool": pool,
            "peers": ["0x" + a.hex() for a in self.hub.connected_peers()],
            "validators": ["0x" + a.hex() for a in self.validators.miners],
        }

    def _h_blocks(self, params, body, query):
        from_height = int(query.get("from", 0))
        with self._state_lock:
            chain = self.view.chain_to(self.view.head)
        return 200, {"ok": True, "blocks": [
            b.to_json_obj() for b in chain if b.header.height >= from_height
        ]}

    def _h_mempool(self, params, body, query):
        with self._mempool_lock:
            txs = self.mempool.snapshot()
        return 200, {"ok": True, "count": len(txs),
                     "tx_hashes": [tx.tx_hash().hex() for tx in txs]}

    def _h_roster(self, params, body, query):
        try:
            snf = StaticNodesFile.from_json_obj(body["static_nodes"])
        except (KeyError, ValueError, TypeError) as err:
            return 400, {"ok": False, "reason": f"malformed roster: {err}"}
        if not snf.verify(self.oracle_public_key):
            return 403, {"ok": False, "reason": "oracle signature does not verify"}
        if snf.epoch <= self.roster.epoch:
            return 409, {"ok": False, "reason": "stale epoch", "epoch": self.roster.epoch}
        self.inbox.put(("roster", snf, None))
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            if self.roster.epoch >= snf.epoch:
                return 200, {"ok": True, "epoch": self.roster.epoch}
            time.sleep(0.01)
        return 200, {"ok": True, "epoch": self.roster.epoch, "note": "install pending"}

    def _h_partition(self, params, body, query):
        allowed = body.get("allowed") if body else None
        if allowed is None:
            self.hub.set_partition(None)
        else:
            self.hub.set_partition({bytes.fromhex(a[2:]) for a in allowed})
        return 200, {"ok": True}

    # -- misc ------------------------------------------------------------------

    def _append_chain_log(self, block: Block) -> None:
        try:
            with open(self._chain_log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(block.to_json_obj()) + "\n")
        except OSError as err:
            log.debug("chain log append failed: %s", err)


def _replay_states(chain: list, keys: dict):
    state = empty_state()
    for block in chain[1:]:
        state = apply_block(state, block, keys)
    return state


def run_node_from_config(config: NodeConfig) -> Node:
    """Process entry: load the key, pull genesis + roster from the oracle,
    build and start the node."""
    from .crypto import load_key_file
    from .httpd import JsonClient

    account = load_key_file(config.key_file)
    client = JsonClient(config.oracle_endpoint)
    deadline = time.monotonic() + 30.0
    last_err: Optional[Exception] = None
    while time.monotonic() < deadline:
        try:
            _, genesis = client.get("/genesis")
            _, roster_obj = client.get("/roster")
            snf = StaticNodesFile.from_json_obj(roster_obj["static_nodes"])
            node = Node(
                config=config,
                account=account,
                roster=snf,
                oracle_public_key=bytes.fromhex(genesis["oracle_public_key"]),
                genesis_time=int(genesis["genesis_time"]),
            )
            node.start()
            return node
        except Exception as err:  # oracle may not be up yet
            last_err = err
            time.sleep(0.5)
    raise BlendmasError(f"could not bootstrap from oracle at {config.oracle_endpoint}: {last_err}")
