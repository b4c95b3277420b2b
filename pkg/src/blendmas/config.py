"""Node and service-stack configuration files.

Node config is a JSON object with the fields {address, key_file,
listen_host, listen_port, http_port, role, oracle_endpoint,
block_interval_ms, data_dir}. The BLENDMAS_CONFIG environment variable
overrides the config path for `node run` when --config is not given.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

ENV_CONFIG = "BLENDMAS_CONFIG"

DEFAULT_BLOCK_INTERVAL_MS = 1000

# micro-mode default ports, one per service
DEFAULT_SERVICE_PORTS = {
    "registration": 8545,
    "identity": 8546,
    "management": 8547,
    "access_control": 8548,
    "hashed_index": 8549,
    "data_provider": 8550,
}
SERVICE_NAMES = tuple(DEFAULT_SERVICE_PORTS)


@dataclass
class NodeConfig:
    address: str
    key_file: str
    listen_host: str
    listen_port: int
    http_port: int
    role: str
    oracle_endpoint: str
    block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS
    data_dir: str = "."

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "NodeConfig":
        return cls(
            address=obj["address"],
            key_file=obj["key_file"],
            listen_host=obj["listen_host"],
            listen_port=int(obj["listen_port"]),
            http_port=int(obj["http_port"]),
            role=obj["role"],
            oracle_endpoint=obj["oracle_endpoint"],
            block_interval_ms=int(obj.get("block_interval_ms", DEFAULT_BLOCK_INTERVAL_MS)),
            data_dir=obj.get("data_dir", "."),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "NodeConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))


def resolve_config_path(explicit: Optional[str]) -> str:
    path = explicit or os.environ.get(ENV_CONFIG)
    if not path:
        raise FileNotFoundError(
            f"no config path given and {ENV_CONFIG} is not set"
        )
    return path


@dataclass
class ServicesConfig:
    """One service stack: mono co-hosts every handler in one process on the
    data-provider port; micro runs the named service alone on its own port."""

    mode: str                      # "mono" | "micro"
    node: NodeConfig               # embedded chain node for this process
    http_host: str = "127.0.0.1"
    ports: dict = field(default_factory=lambda: dict(DEFAULT_SERVICE_PORTS))
    only: Optional[str] = None     # micro: which single service this process runs
    ac_enabled: bool = True
    policy_file: Optional[str] = None
    data_dir: str = "."
    serving_resource: str = "/data/query"

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["node"] = self.node.to_json_obj()
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ServicesConfig":
        return cls(
            mode=obj["mode"],
            node=NodeConfig.from_json_obj(obj["node"]),
            http_host=obj.get("http_host", "127.0.0.1"),
            ports={**DEFAULT_SERVICE_PORTS, **obj.get("ports", {})},
            only=obj.get("only"),
            ac_enabled=bool(obj.get("ac_enabled", True)),
            policy_file=obj.get("policy_file"),
            data_dir=obj.get("data_dir", "."),
            serving_resource=obj.get("serving_resource", "/data/query"),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ServicesConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))

    def endpoint(self, service: str) -> str:
        if self.mode == "mono":
            return f"http://{self.http_host}:{self.ports['data_provider']}"
        return f"http://{self.http_host}:{self.ports[service]}"
