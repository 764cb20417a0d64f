"""Run manifests and config hashing."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import dataclass, field

from . import __version__


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    tool_version: str = __version__
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))

    @property
    def config_hash(self) -> str:
        # the timestamp is informational and stays out of the hash
        return config_hash({"subcommand": self.subcommand, "config": self.config, "version": self.tool_version})

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_jsonable)
