"""Minimal JSON-over-HTTP plumbing shared by the oracle, node admin
endpoints, and the security services.

A route table is a list of (method, pattern, handler) where patterns may
contain {name} segments. Handlers take (params, body, query) and return
(status, json-serializable object).
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qs, urlparse

import requests

log = logging.getLogger(__name__)

Handler = Callable[[dict, Optional[dict], dict], tuple]


def _match(pattern: str, path: str) -> Optional[dict]:
    pat_parts = pattern.strip("/").split("/")
    parts = path.strip("/").split("/")
    if len(pat_parts) != len(parts):
        return None
    params = {}
    for pat, part in zip(pat_parts, parts):
        if pat.startswith("{") and pat.endswith("}"):
            params[pat[1:-1]] = part
        elif pat != part:
            return None
    return params


class JsonHttpServer:
    """Threaded HTTP server dispatching JSON requests to a route table."""

    def __init__(self, host: str, port: int, routes: list, name: str = "http"):
        self.name = name
        server = self

        class RequestHandler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # route access logs to logging
                log.debug("%s %s", server.name, fmt % args)

            def _dispatch(self, method):
                parsed = urlparse(self.path)
                query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                body = None
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    raw = self.rfile.read(length)
                    try:
                        body = json.loads(raw)
                    except ValueError:
                        self._reply(400, {"ok": False, "reason": "malformed JSON body"})
                        return
                for route_method, pattern, handler in server.routes:
                    if route_method != method:
                        continue
                    params = _match(pattern, parsed.path)
                    if params is None:
                        continue
                    try:
                        status, obj = handler(params, body, query)
                    except Exception:
                        log.exception("%s: handler error on %s %s", server.name, method, parsed.path)
                        status, obj = 500, {"ok": False, "reason": "internal error"}
                    self._reply(status, obj)
                    return
                self._reply(404, {"ok": False, "reason": f"no route for {method} {parsed.path}"})

            def _reply(self, status, obj):
                data = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self.routes = routes
        self._httpd = ThreadingHTTPServer((host, port), RequestHandler)
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"{self.name}-httpd", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class JsonClient:
    """Keep-alive JSON client bound to a base URL; sessions are per-thread."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def get(self, path: str, **params) -> tuple:
        resp = self._session().get(self.base_url + path, params=params or None,
                                   timeout=self.timeout)
        return resp.status_code, resp.json()

    def post(self, path: str, obj: Optional[dict] = None) -> tuple:
        resp = self._session().post(self.base_url + path, json=obj, timeout=self.timeout)
        return resp.status_code, resp.json()
