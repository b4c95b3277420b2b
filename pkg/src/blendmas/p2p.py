"""TCP/JSON message exchange among static peers.

Wire framing: a 4-byte big-endian length prefix, then a JSON object
{type, sender, payload_hex, sig_hex}. The signature covers
(msg_type utf-8 bytes || payload bytes). Messages from senders absent from
the installed roster (and not the oracle) are dropped before their payloads
are parsed.

Gossip runs over persistent outbound connections to every roster peer
(flooding; rosters are small). Chain sync and roster pushes use one-shot
request/response connections. Duplicate suppression is a FIFO seen-set
keyed by tx/block hash with capacity 10,000.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from collections import OrderedDict
from typing import Callable, Optional

from .crypto import Account, verify

log = logging.getLogger(__name__)

MSG_TYPES = ("tx", "block", "get_blocks", "blocks", "roster", "ping")

MAX_FRAME = 64 * 1024 * 1024
SEEN_CAPACITY = 10_000
PING_INTERVAL_S = 5.0
REDIAL_INTERVAL_S = 2.0
CONNECT_TIMEOUT_S = 3.0


class SeenSet:
    """FIFO-evicting set for duplicate suppression."""

    def __init__(self, capacity: int = SEEN_CAPACITY):
        self.capacity = capacity
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def check_and_add(self, key: bytes) -> bool:
        """True if the key was new (and is now recorded)."""
        with self._lock:
            if key in self._entries:
                return False
            self._entries[key] = None
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
            return True

    def __contains__(self, key: bytes) -> bool:
        with self._lock:
            return key in self._entries


def encode_frame(msg_type: str, sender: bytes, payload: bytes, signature: bytes) -> bytes:
    obj = {
        "type": msg_type,
        "sender": "0x" + sender.hex(),
        "payload_hex": payload.hex(),
        "sig_hex": signature.hex(),
    }
    data = json.dumps(obj).encode("utf-8")
    return struct.pack(">I", len(data)) + data


def sign_message(account: Account, msg_type: str, payload: bytes) -> bytes:
    return account.sign(msg_type.encode("utf-8") + payload)


def make_frame(account: Account, msg_type: str, payload: bytes) -> bytes:
    return encode_frame(msg_type, account.address, payload,
                        sign_message(account, msg_type, payload))


def read_frame(sock: socket.socket) -> Optional[dict]:
    """One decoded wire message, or None on clean EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    data = _read_exact(sock, length)
    if data is None:
        return None
    obj = json.loads(data)
    return {
        "type": obj["type"],
        "sender": bytes.fromhex(obj["sender"][2:]),
        "payload": bytes.fromhex(obj["payload_hex"]),
        "signature": bytes.fromhex(obj["sig_hex"]),
    }


def _read_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def send_one_shot(host: str, port: int, account: Account, msg_type: str,
                  payload: bytes, timeout: float = CONNECT_TIMEOUT_S) -> None:
    """Dial, deliver one message, close. Raises OSError on failure."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(make_frame(account, msg_type, payload))


def request_response(host: str, port: int, account: Account, msg_type: str,
                     payload: bytes, timeout: float = 15.0) -> Optional[dict]:
    """Dial, send one message, read one reply, close."""
    with socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_S) as sock:
        sock.settimeout(timeout)
        sock.sendall(make_frame(account, msg_type, payload))
        return read_frame(sock)


class _PeerLink:
    def __init__(self, address: bytes, host: str, port: int):
        self.address = address
        self.host = host
        self.port = port
        self.sock: Optional[socket.socket] = None
        self.lock = threading.Lock()
        self.missed_pings = 0

    def connected(self) -> bool:
        return self.sock is not None

    def close(self) -> None:
        with self.lock:
            if self.sock is not None:
                try:
                    self.sock.close()
                except OSError:
                    pass
                self.sock = None


class PeerHub:
    """Listener plus persistent outbound links to every roster peer.

    `on_message(msg, reply)` is called for each accepted inbound message;
    `reply(frame_bytes)` writes a response on the same connection (used for
    get_blocks). `allowed(address)` gates ingress; `key_of(address)` resolves
    the sender key for signature checks.
    """

    def __init__(
        self,
        account: Account,
        listen_host: str,
        listen_port: int,
        on_message: Callable,
        allowed: Callable[[bytes], bool],
        key_of: Callable[[bytes], Optional[bytes]],
        name: str = "p2p",
    ):
        self.account = account
        self.name = name
        self.on_message = on_message
        self.allowed = allowed
        self.key_of = key_of
        self.seen = SeenSet()
        self._peers: dict = {}
        self._peers_lock = threading.Lock()
        self._partition: Optional[set] = None
        self._stop = threading.Event()
        self._threads: list = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((listen_host, listen_port))
        self._listener.listen(32)
        # timeout so the accept loop notices shutdown promptly
        self._listener.settimeout(0.25)
        self._inbound: list = []
        self._inbound_lock = threading.Lock()

    @property
    def listen_port(self) -> int:
        return self._listener.getsockname()[1]

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        for target, label in ((self._accept_loop, "accept"), (self._redial_loop, "redial"),
                              (self._ping_loop, "ping")):
            thread = threading.Thread(target=target, name=f"{self.name}-{label}", daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._peers_lock:
            links = list(self._peers.values())
        for link in links:
            link.close()
        with self._inbound_lock:
            inbound = list(self._inbound)
        for conn in inbound:
            try:
                conn.close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=1)

    # -- peer management -----------------------------------------------------

    def set_peers(self, peers: list) -> None:
        """Replace the peer set with [(address, host, port)] (self excluded)."""
        with self._peers_lock:
            wanted = {addr: (host, port) for addr, host, port in peers if addr != self.account.address}
            for addr in list(self._peers):
                if addr not in wanted:
                    self._peers.pop(addr).close()
            for addr, (host, port) in wanted.items():
                if addr not in self._peers:
                    self._peers[addr] = _PeerLink(addr, host, port)

    def set_partition(self, allowed_peers: Optional[set]) -> None:
        """Test hook: when set, traffic flows only to/from these addresses."""
        self._partition = allowed_peers

    def _blocked(self, address: bytes) -> bool:
        partition = self._partition
        return partition is not None and address not in partition

    def connected_peers(self) -> list:
        with self._peers_lock:
            return [link.address for link in self._peers.values() if link.connected()]

    # -- sending -------------------------------------------------------------

    def broadcast(self, msg_type: str, payload: bytes, dedup_key: Optional[bytes] = None) -> int:
        """Send to every connected roster peer; 0 if suppressed as duplicate."""
        if dedup_key is not None and not self.seen.check_and_add(dedup_key):
            return 0
        frame = make_frame(self.account, msg_type, payload)
        delivered = 0
        with self._peers_lock:
            links = list(self._peers.values())
        for link in links:
            if self._blocked(link.address):
                continue
            if self._send_frame(link, frame):
                delivered += 1
        return delivered

    def _send_frame(self, link: _PeerLink, frame: bytes) -> bool:
        with link.lock:
            if link.sock is None:
                return False
            try:
                link.sock.sendall(frame)
                return True
            except OSError:
                log.debug("%s: send to 0x%s failed, dropping link", self.name, link.address.hex())
        link.close()
        return False

    # -- loops ---------------------------------------------------------------

    def _redial_loop(self) -> None:
        while not self._stop.is_set():
            with self._peers_lock:
                links = list(self._peers.values())
            for link in links:
                if not link.connected() and not self._blocked(link.address):
                    try:
                        sock = socket.create_connection((link.host, link.port),
                                                        timeout=CONNECT_TIMEOUT_S)
                        with link.lock:
                            link.sock = sock
                            link.missed_pings = 0
                        log.debug("%s: connected to 0x%s", self.name, link.address.hex())
                    except OSError:
                        pass
            self._stop.wait(REDIAL_INTERVAL_S)

    def _ping_loop(self) -> None:
        while not self._stop.is_set():
            self._stop.wait(PING_INTERVAL_S)
            if self._stop.is_set():
                return
            frame = make_frame(self.account, "ping", b"{}")
            with self._peers_lock:
                links = list(self._peers.values())
            for link in links:
                if link.connected() and not self._blocked(link.address):
                    if not self._send_frame(link, frame):
                        link.missed_pings += 1

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with self._inbound_lock:
                self._inbound.append(conn)
            thread = threading.Thread(
                target=self._reader, args=(conn,), name=f"{self.name}-reader", daemon=True
            )
            thread.start()

    def _reader(self, conn: socket.socket) -> None:
        def reply(frame: bytes) -> None:
            try:
                conn.sendall(frame)
            except OSError:
                pass

        try:
            while not self._stop.is_set():
                msg = read_frame(conn)
                if msg is None:
                    return
                if not self._admit(msg):
                    continue
                if msg["type"] == "ping":
                    continue
                self.on_message(msg, reply)
        except (OSError, ValueError, KeyError, json.JSONDecodeError):
            return
        finally:
            with self._inbound_lock:
                if conn in self._inbound:
                    self._inbound.remove(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _admit(self, msg: dict) -> bool:
        """Permissioned ingress: roster membership first, then signature."""
        sender = msg["sender"]
        if self._blocked(sender):
            return False
        if not self.allowed(sender):
            log.debug("%s: dropped %s from unenrolled 0x%s", self.name, msg["type"], sender.hex())
            return False
        key = self.key_of(sender)
        if key is None:
            return False
        if not verify(key, msg["type"].encode("utf-8") + msg["payload"], msg["signature"]):
            log.warning("%s: bad signature on %s from 0x%s", self.name, msg["type"], sender.hex())
            return False
        return True
