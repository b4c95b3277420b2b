"""In-process network builder shared by transport/consensus/service tests.

Nodes run as real TCP listeners on localhost with their consensus loops in
threads, which keeps every scenario (partitions, rogue blocks, revocations)
drivable from test code while exercising the actual wire paths.
"""

from __future__ import annotations

import socket
import time

from blendmas.config import NodeConfig
from blendmas.crypto import Account
from blendmas.node import Node
from blendmas.oracle import Oracle, OracleApp
from blendmas.roster import NodeRecord

HOST = "127.0.0.1"


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind((HOST, 0))
        return sock.getsockname()[1]


def wait_until(predicate, timeout: float = 10.0, interval: float = 0.05, message: str = ""):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        result = predicate()
        if result:
            return result
        time.sleep(interval)
    raise AssertionError(f"condition not met within {timeout}s: {message}")


class LocalNetwork:
    """An oracle plus miners (and optional service/client members) wired on
    localhost, with fresh keys and temp data dirs."""

    def __init__(self, tmp_path, n_miners: int = 4, n_services: int = 0,
                 n_clients: int = 0, block_interval_ms: int = 300):
        self.tmp_path = tmp_path
        self.block_interval_ms = block_interval_ms
        self.oracle_account = Account.generate()
        self.miner_accounts = [Account.generate() for _ in range(n_miners)]
        self.service_accounts = [Account.generate() for _ in range(n_services)]
        self.client_accounts = [Account.generate() for _ in range(n_clients)]
        self.genesis_time = int(time.time())

        records = []
        self._ports = {}
        for role, accounts in (("miner", self.miner_accounts),
                               ("service", self.service_accounts),
                               ("client", self.client_accounts)):
            for account in accounts:
                port = free_port()
                self._ports[account.address] = port
                records.append(NodeRecord(
                    address=account.address, public_key=account.public_key,
                    host=HOST, port=port, role=role, enrolled_at=self.genesis_time,
                ))
        self.oracle = Oracle(
            account=self.oracle_account,
            data_dir=str(tmp_path / "oracle"),
            genesis_records=records,
            genesis_time=self.genesis_time,
        )
        self.oracle_app = OracleApp(self.oracle, HOST, 0)

        self.miners = [self._make_node(a, "miner", i) for i, a in enumerate(self.miner_accounts)]
        self.services = [self._make_node(a, "service", i) for i, a in enumerate(self.service_accounts)]
        self.nodes = self.miners + self.services

    def _make_node(self, account: Account, role: str, index: int) -> Node:
        config = NodeConfig(
            address="0x" + account.address.hex(),
            key_file="",
            listen_host=HOST,
            listen_port=self._ports[account.address],
            http_port=0,
            role=role,
            oracle_endpoint=f"http://{HOST}:{self.oracle_app.port}",
            block_interval_ms=self.block_interval_ms,
            data_dir=str(self.tmp_path / f"{role}{index}"),
        )
        return Node(
            config=config,
            account=account,
            roster=self.oracle.roster,
            oracle_public_key=self.oracle_account.public_key,
            genesis_time=self.genesis_time,
        )

    def start(self):
        self.oracle_app.start()
        for node in self.nodes:
            node.start(sync=False)
        return self

    def stop(self):
        for node in self.nodes:
            node.stop()
        self.oracle_app.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def wait_height(self, height: int, timeout: float = 30.0, nodes=None):
        nodes = self.nodes if nodes is None else nodes
        wait_until(
            lambda: all(n.view.head_height() >= height for n in nodes),
            timeout=timeout,
            message=f"heights {[n.view.head_height() for n in nodes]} < {height}",
        )

    def wait_converged(self, timeout: float = 30.0, nodes=None):
        nodes = self.nodes if nodes is None else nodes

        def same_head():
            heads = {n.view.head for n in nodes}
            return len(heads) == 1

        wait_until(same_head, timeout=timeout,
                   message=f"heads {[n.view.head.hex()[:12] for n in nodes]}")
