"""Domain types and cluster configuration shared by every other module."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import jsonschema

NodeId = int
Slot = int


class ConfigError(ValueError):
    """Raised when a cluster configuration fails validation."""


@dataclass(frozen=True, order=True, slots=True)
class Ballot:
    """Leadership epoch. Ordered by round, ties broken by proposer id."""

    round: int
    proposer: NodeId

    def next_for(self, node: NodeId) -> "Ballot":
        return Ballot(self.round + 1, node)

    def __str__(self) -> str:
        return f"({self.round},{self.proposer})"


ZERO_BALLOT = Ballot(0, 0)


class Op(enum.IntEnum):
    NOOP = 0
    PUT = 1
    GET = 2


@dataclass(frozen=True, slots=True)
class Command:
    op: Op
    key: bytes = b""
    value: bytes = b""
    client_id: int = 0
    request_seq: int = 0

    @property
    def request_id(self) -> tuple[int, int]:
        return (self.client_id, self.request_seq)


NOOP = Command(Op.NOOP)


class EntryState(enum.IntEnum):
    ACCEPTED = 1
    COMMITTED = 2
    EXECUTED = 3


@dataclass(frozen=True, slots=True)
class LogEntry:
    slot: Slot
    ballot: Ballot
    command: Command
    voters: frozenset[NodeId] = frozenset()
    state: EntryState = EntryState.ACCEPTED


def majority(n: int) -> int:
    return n // 2 + 1


@dataclass(frozen=True, slots=True)
class RelayGroupConfig:
    """Disjoint relay groups over the followers of one leader."""

    leader: NodeId
    groups: tuple[tuple[NodeId, ...], ...]
    prc: int = 0

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def thresholds(self) -> tuple[int, ...]:
        return tuple(max(len(g) - self.prc, 0) for g in self.groups)

    def group_of(self, node: NodeId) -> int:
        for i, g in enumerate(self.groups):
            if node in g:
                return i
        raise KeyError(node)


def partition_followers(n: int, r: int, leader: NodeId) -> RelayGroupConfig:
    """Split the n-1 followers of ``leader`` into r contiguous, near-even groups.

    Larger groups come first: (N=6, R=4) gives sizes [2, 1, 1, 1].
    """
    if not 1 <= r <= n - 1:
        raise ConfigError(f"relay group count must be in 1..{n - 1}, got {r}")
    if not 0 <= leader < n:
        raise ConfigError(f"leader {leader} is not a member of a {n}-node cluster")
    followers = [i for i in range(n) if i != leader]
    base, extra = divmod(len(followers), r)
    groups = []
    start = 0
    for i in range(r):
        size = base + (1 if i < extra else 0)
        groups.append(tuple(followers[start:start + size]))
        start += size
    return RelayGroupConfig(leader, tuple(groups))


def _explicit_groups(n: int, layout: Sequence[Sequence[int]], leader: NodeId) -> RelayGroupConfig:
    groups = tuple(tuple(m for m in g if m != leader) for g in layout)
    return RelayGroupConfig(leader, tuple(g for g in groups if g))


@dataclass(frozen=True)
class GrayListSettings:
    enabled: bool = False
    duration: float = 5.0
    probe_probability: float = 0.05


@dataclass(frozen=True)
class ClusterConfig:
    """Static cluster description. Durations are in seconds."""

    n: int
    relay_groups: int | tuple[tuple[int, ...], ...] = 1
    prc: int = 0
    relay_timeout: float = 0.050
    leader_timeout: float = 0.200
    graylist: GrayListSettings = field(default_factory=GrayListSettings)
    majority_shortcut: bool = False
    rng_seed: int = 0
    peers: dict[int, str] = field(default_factory=dict)
    bootstrap_leader: Optional[NodeId] = None
    max_retries_before_alarm: int = 10

    def __post_init__(self) -> None:
        if isinstance(self.relay_groups, list):
            object.__setattr__(
                self, "relay_groups", tuple(tuple(g) for g in self.relay_groups))
        self.validate()

    @property
    def node_ids(self) -> list[NodeId]:
        return list(range(self.n))

    @property
    def quorum(self) -> int:
        return majority(self.n)

    @property
    def r(self) -> int:
        if isinstance(self.relay_groups, int):
            return self.relay_groups
        return len(self.relay_groups)

    def groups_for(self, leader: NodeId) -> RelayGroupConfig:
        return _groups_cached(self.n, self.relay_groups, leader, self.prc)

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n: cluster needs at least one node, got {self.n}")
        if self.n > 1:
            if isinstance(self.relay_groups, int):
                if not 1 <= self.relay_groups <= self.n - 1:
                    raise ConfigError(
                        f"relay_groups: must be in 1..{self.n - 1}, got {self.relay_groups}")
            else:
                members = [m for g in self.relay_groups for m in g]
                if len(set(members)) != len(members):
                    raise ConfigError("relay_groups: groups must be disjoint")
                if not set(members) <= set(range(self.n)):
                    raise ConfigError("relay_groups: unknown node id in groups")
                if len(set(members)) < self.n - 1:
                    raise ConfigError("relay_groups: groups must cover every follower")
        if self.prc < 0:
            raise ConfigError(f"prc: must be non-negative, got {self.prc}")
        if not self.relay_timeout < self.leader_timeout:
            raise ConfigError(
                "relay_timeout_ms: relay timeout must be strictly below the leader timeout")
        if not 0.0 <= self.graylist.probe_probability <= 1.0:
            raise ConfigError("graylist.probe_prob: must be within [0, 1]")
        if self.majority_shortcut and self.r != 1:
            raise ConfigError("majority_shortcut: only valid with a single relay group")
        if self.bootstrap_leader is not None and not 0 <= self.bootstrap_leader < self.n:
            raise ConfigError(f"bootstrap_leader: {self.bootstrap_leader} is not a node id")
        if self.peers and sorted(self.peers) != list(range(self.n)):
            raise ConfigError("peers: ids must be exactly 0..n-1")
        if self.peers and len(set(self.peers.values())) != len(self.peers):
            raise ConfigError("peers: duplicate address")
        if self.n > 1:
            from .model import validate_prc

            for leader in range(self.n):
                verdict = validate_prc(self.groups_for(leader), self.prc, self.n)
                if not verdict.ok:
                    raise ConfigError(f"prc: {verdict}")
                if isinstance(self.relay_groups, int):
                    break

    # -- JSON file format ------------------------------------------------

    def to_json(self) -> dict[str, Any]:
        groups: Any = self.relay_groups
        if not isinstance(groups, int):
            groups = [list(g) for g in groups]
        out: dict[str, Any] = {
            "n": self.n,
            "peers": {str(k): v for k, v in sorted(self.peers.items())},
            "relay_groups": groups,
            "prc": self.prc,
            "relay_timeout_ms": self.relay_timeout * 1000.0,
            "leader_timeout_ms": self.leader_timeout * 1000.0,
            "graylist": {
                "enabled": self.graylist.enabled,
                "duration_ms": self.graylist.duration * 1000.0,
                "probe_prob": self.graylist.probe_probability,
            },
            "seed": self.rng_seed,
        }
        if self.majority_shortcut:
            out["majority_shortcut"] = True
        if self.bootstrap_leader is not None:
            out["bootstrap_leader"] = self.bootstrap_leader
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ClusterConfig":
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        peers = {}
        for key, addr in data.get("peers", {}).items():
            if not key.isdigit():
                raise ConfigError(f"peers.{key}: node ids must be integers")
            peers[int(key)] = addr
        gl = data.get("graylist", {})
        groups = data.get("relay_groups", 1)
        if isinstance(groups, list):
            groups = tuple(tuple(g) for g in groups)
        return cls(
            n=data["n"],
            relay_groups=groups,
            prc=data.get("prc", 0),
            relay_timeout=data.get("relay_timeout_ms", 50.0) / 1000.0,
            leader_timeout=data.get("leader_timeout_ms", 200.0) / 1000.0,
            graylist=GrayListSettings(
                enabled=gl.get("enabled", False),
                duration=gl.get("duration_ms", 5000.0) / 1000.0,
                probe_probability=gl.get("probe_prob", 0.05),
            ),
            majority_shortcut=data.get("majority_shortcut", False),
            rng_seed=data.get("seed", 0),
            peers=peers,
            bootstrap_leader=data.get("bootstrap_leader"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ClusterConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_json(data)


@lru_cache(maxsize=4096)
def _groups_cached(n: int, layout: Any, leader: NodeId, prc: int) -> RelayGroupConfig:
    if isinstance(layout, int):
        cfg = partition_followers(n, layout, leader)
    else:
        cfg = _explicit_groups(n, layout, leader)
    return RelayGroupConfig(cfg.leader, cfg.groups, prc)


CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["n"],
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "peers": {
            "type": "object",
            "additionalProperties": {"type": "string", "pattern": r"^[^:]+:\d+$"},
        },
        "relay_groups": {
            "oneOf": [
                {"type": "integer", "minimum": 1},
                {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer", "minimum": 0}}},
            ]
        },
        "prc": {"type": "integer", "minimum": 0},
        "relay_timeout_ms": {"type": "number", "exclusiveMinimum": 0},
        "leader_timeout_ms": {"type": "number", "exclusiveMinimum": 0},
        "graylist": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "duration_ms": {"type": "number", "minimum": 0},
                "probe_prob": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "seed": {"type": "integer"},
        "majority_shortcut": {"type": "boolean"},
        "bootstrap_leader": {"type": ["integer", "null"], "minimum": 0},
    },
}


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


def sorted_ids(ids: Iterable[NodeId]) -> tuple[NodeId, ...]:
    return tuple(sorted(ids))
