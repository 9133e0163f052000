"""Deterministic discrete-event network simulator with fault injection.

Every node is a single FIFO CPU: each message costs CPU time to deserialize
on arrival and to serialize on send, so a node that handles more messages
saturates sooner. Timers are queued through the same inbox at zero cost.
Clients are free of CPU cost. Event ties are broken by (time, sender, seq),
which together with string-seeded generators makes a run a pure function of
its inputs.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from ..core import ClusterConfig, Command, NodeId, majority
from ..engine import (CatchupRequest, ClientReply, ClientRequest, P1a, P1b, P2a, P2b, P3)
from ..pig import AggregatedReply, PigEnvelope
from ..replica import Replica
from . import wire

log = logging.getLogger(__name__)

CLIENT_BASE = 1_000_000
_TIMER_SRC = -1

ARRIVE, RESUME, TIMER, CLIENT_TIMER, FAULT, CALL = range(6)

# message categories for accounting
CAT_CLIENT = "client"
CAT_PHASE2 = "phase2"
CAT_PHASE1 = "phase1"
CAT_COMMIT = "commit"
CAT_HEARTBEAT = "heartbeat"
CAT_CATCHUP = "catchup"
CATEGORIES = (CAT_CLIENT, CAT_PHASE2, CAT_PHASE1, CAT_COMMIT, CAT_HEARTBEAT, CAT_CATCHUP)
REPLICATION = (CAT_CLIENT, CAT_PHASE2)

_SIMPLE_CATEGORY = {
    ClientRequest: CAT_CLIENT, ClientReply: CAT_CLIENT,
    P2a: CAT_PHASE2, P2b: CAT_PHASE2, P1a: CAT_PHASE1, P1b: CAT_PHASE1,
    CatchupRequest: CAT_CATCHUP,
}


def category(msg: object) -> str:
    t = type(msg)
    cat = _SIMPLE_CATEGORY.get(t)
    if cat is not None:
        return cat
    if t is PigEnvelope:
        return _SIMPLE_CATEGORY[type(msg.payload)]
    if t is AggregatedReply:
        return CAT_PHASE2 if msg.phase == 2 else CAT_PHASE1
    if t is P3:
        return CAT_HEARTBEAT if msg.slot < 0 else CAT_COMMIT
    raise TypeError(f"unknown message type {t.__name__}")


def _cmd_bytes(c: Command) -> int:
    return len(c.key) + len(c.value)


def payload_bytes(msg: object) -> int:
    """Bytes of user data a message carries (keys and values)."""
    t = type(msg)
    if t is PigEnvelope:
        return payload_bytes(msg.payload)
    if t is P2a or t is P3 or t is ClientRequest:
        return _cmd_bytes(msg.command)
    if t is ClientReply:
        return len(msg.value)
    if t is P1b or t is AggregatedReply:
        return sum(_cmd_bytes(e.command) for e in msg.accepted)
    return 0


@dataclass
class NetworkProfile:
    """Link and CPU model. Latencies in seconds, CPU costs in microseconds."""

    latency_min: float = 0.0003
    latency_max: float = 0.0006
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    message_cost_us: float = 10.0
    cost_per_100_bytes_us: float = 1.0
    # optional per-type override of the base cost, keyed by class name
    per_type_cost_us: dict[str, float] = field(default_factory=dict)
    codec_roundtrip: bool = False

    PRESETS = {
        "lan": (0.0003, 0.0006),
        "wan": (0.030, 0.070),
    }

    @classmethod
    def preset(cls, name: str, **kw: Any) -> "NetworkProfile":
        try:
            lo, hi = cls.PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown network preset {name!r}") from None
        return cls(latency_min=lo, latency_max=hi, **kw)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "NetworkProfile":
        base = cls.preset(data["preset"]) if "preset" in data else cls()
        if "latency_ms" in data:
            lo, hi = data["latency_ms"]
            base.latency_min, base.latency_max = lo / 1000.0, hi / 1000.0
        base.drop_probability = data.get("drop_probability", base.drop_probability)
        base.duplicate_probability = data.get("duplicate_probability",
                                              base.duplicate_probability)
        base.message_cost_us = data.get("message_cost_us", base.message_cost_us)
        base.cost_per_100_bytes_us = data.get("cost_per_100_bytes_us",
                                              base.cost_per_100_bytes_us)
        base.per_type_cost_us = dict(data.get("per_type_cost_us", {}))
        base.codec_roundtrip = data.get("codec_roundtrip", False)
        return base


@dataclass(frozen=True)
class FaultEvent:
    at: float
    action: str
    nodes: tuple[NodeId, ...] = ()

    ACTIONS = ("crash", "recover", "partition", "heal")

    def __post_init__(self) -> None:
        if self.action not in self.ACTIONS:
            raise ValueError(f"fault action must be one of {self.ACTIONS}, got {self.action!r}")

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "FaultEvent":
        return cls(data["at_ms"] / 1000.0, data["action"], tuple(data.get("nodes", ())))

    def to_json(self) -> dict[str, Any]:
        return {"at_ms": self.at * 1000.0, "action": self.action, "nodes": list(self.nodes)}


def load_fault_script(source: str | Path | Sequence[dict]) -> list[FaultEvent]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    return [FaultEvent.from_json(e) for e in source]


class InvariantViolation(AssertionError):
    def __init__(self, name: str, time: float, detail: str):
        super().__init__(f"invariant {name} violated at t={time:.6f}s: {detail}")
        self.name = name
        self.time = time
        self.detail = detail


class InvariantChecker:
    """Observer that checks safety after every accept, commit and execute."""

    def __init__(self, n: int, clock: Callable[[], float]):
        self.quorum = majority(n)
        self.clock = clock
        self.chosen: dict[int, Command] = {}
        self.accepts: dict[tuple, set[NodeId]] = defaultdict(set)
        self.executed = [0] * n
        self.vote_checks = 0

    def _fail(self, name: str, detail: str) -> None:
        raise InvariantViolation(name, self.clock(), detail)

    def on_accept(self, node, slot, ballot) -> None:
        self.accepts[(slot, ballot)].add(node)

    def on_commit(self, node, slot, command, ballot, voters) -> None:
        prior = self.chosen.get(slot)
        if prior is None:
            self.chosen[slot] = command
        elif prior != command:
            self._fail("single-value-per-slot",
                       f"node {node} committed {command} at slot {slot}, already chosen {prior}")
        if voters is not None:
            self.vote_checks += 1
            acc = self.accepts.get((slot, ballot), set())
            if not voters <= acc:
                self._fail("vote-integrity",
                           f"slot {slot} counted votes from {sorted(voters - acc)} "
                           f"that never accepted ballot {ballot}")
            if len(voters) < self.quorum:
                self._fail("vote-integrity", f"slot {slot} committed with {len(voters)} votes")

    def on_execute(self, node, slot, command, result) -> None:
        if slot != self.executed[node]:
            self._fail("agreement", f"node {node} executed slot {slot} out of order")
        self.executed[node] = slot + 1
        if self.chosen.get(slot) != command:
            self._fail("agreement",
                       f"node {node} executed {command} at slot {slot}, chosen "
                       f"{self.chosen.get(slot)}")


class _Node:
    __slots__ = ("id", "replica", "rt", "inbox", "busy_until", "scheduled", "crashed",
                 "incarnation")

    def __init__(self, node_id: NodeId):
        self.id = node_id
        self.replica: Optional[Replica] = None
        self.rt: Optional[_NodeRuntime] = None
        self.inbox: deque = deque()
        self.busy_until = 0.0
        self.scheduled = False
        self.crashed = False
        self.incarnation = 0


class _NodeRuntime:
    __slots__ = ("sim", "node", "clock")

    def __init__(self, sim: "Simulator", node: _Node):
        self.sim = sim
        self.node = node
        self.clock = 0.0

    def now(self) -> float:
        return self.clock

    def send(self, dst: NodeId, msg: object) -> None:
        self.sim._send(self.node.id, dst, msg, self)

    def send_client(self, client_id: int, msg: object) -> None:
        self.sim._send(self.node.id, CLIENT_BASE + client_id, msg, self)

    def set_timer(self, delay: float, tag: tuple) -> None:
        node = self.node
        self.sim._push(self.clock + delay, node.id, TIMER, node.id, (node.incarnation, tag))


class ClientIO:
    """What a simulated client sees: a clock, a send primitive and timers."""

    __slots__ = ("sim", "client_id", "endpoint")

    def __init__(self, sim: "Simulator", client_id: int):
        self.sim = sim
        self.client_id = client_id
        self.endpoint = CLIENT_BASE + client_id

    def now(self) -> float:
        return self.sim.now

    def send(self, node: NodeId, msg: object) -> None:
        self.sim._send(self.endpoint, node, msg, None)

    def set_timer(self, delay: float, tag: tuple) -> None:
        self.sim._push(self.sim.now + delay, self.endpoint, CLIENT_TIMER, self.client_id, tag)


class Simulator:
    def __init__(self, config: ClusterConfig, *, mode: str = "pig",
                 profile: Optional[NetworkProfile] = None, seed: Optional[int] = None,
                 check_invariants: bool = True, trace: bool = False):
        self.config = config
        self.mode = mode
        self.profile = profile or NetworkProfile()
        self.seed = config.rng_seed if seed is None else seed
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._net_rng = random.Random(f"{self.seed}:net")
        self.checker = InvariantChecker(config.n, lambda: self.now) if check_invariants else None
        self.trace: Optional[list[str]] = [] if trace else None

        p = self.profile
        self._base_cost = p.message_cost_us * 1e-6
        self._byte_cost = p.cost_per_100_bytes_us * 1e-8
        self._type_cost = {name: us * 1e-6 for name, us in p.per_type_cost_us.items()}
        self._lat_lo = p.latency_min
        self._lat_span = p.latency_max - p.latency_min
        self._lossy = p.drop_probability > 0 or p.duplicate_probability > 0

        self.sent: dict[int, dict[str, int]] = defaultdict(lambda: dict.fromkeys(CATEGORIES, 0))
        self.received: dict[int, dict[str, int]] = defaultdict(
            lambda: dict.fromkeys(CATEGORIES, 0))
        self.sent_total = 0
        self.received_total = 0
        self.dropped = 0
        self.in_flight = 0
        self._partition: dict[int, int] = {}
        self._next_partition = 1

        self.nodes: list[_Node] = []
        for i in range(config.n):
            node = _Node(i)
            node.rt = _NodeRuntime(self, node)
            node.replica = Replica(i, config, node.rt, mode=mode, observer=self.checker)
            self.nodes.append(node)
        self.clients: dict[int, Any] = {}
        for node in self.nodes:
            node.replica.start()

    # -- wiring ---------------------------------------------------------------

    def client_io(self, client_id: int) -> ClientIO:
        return ClientIO(self, client_id)

    def add_client(self, client_id: int, client: Any) -> None:
        """Register an object with ``on_message(msg, now)`` and ``on_timer(tag, now)``."""
        self.clients[client_id] = client

    def call_at(self, at: float, fn: Callable[[], None]) -> None:
        self._push(at, -2, CALL, 0, fn)

    def schedule_faults(self, faults: Iterable[FaultEvent]) -> None:
        for ev in faults:
            self._push(ev.at, -1, FAULT, 0, ev)

    def replica(self, node: NodeId) -> Replica:
        return self.nodes[node].replica

    @property
    def leader(self) -> Optional[NodeId]:
        """Live node that believes it leads at the highest ballot, if any."""
        best = None
        for node in self.nodes:
            eng = node.replica.engine
            if not node.crashed and eng.is_leader and (best is None or eng.ballot > best[0]):
                best = (eng.ballot, node.id)
        return None if best is None else best[1]

    # -- event core -------------------------------------------------------------

    def _push(self, at: float, sender: int, kind: int, target: int, item: Any) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, sender, self._seq, kind, target, item))

    def _cost(self, msg: object) -> float:
        base = self._type_cost.get(type(msg).__name__, self._base_cost) if self._type_cost \
            else self._base_cost
        size = payload_bytes(msg)
        return base + size * self._byte_cost if size else base

    def _blocked(self, a: int, b: int) -> bool:
        part = self._partition
        return part.get(a, 0) != part.get(b, 0)

    def _send(self, src: int, dst: int, msg: object, rt: Optional[_NodeRuntime]) -> None:
        if rt is not None:
            rt.clock += self._cost(msg)
            depart = rt.clock
        else:
            depart = self.now
        cat = category(msg)
        self.sent[src][cat] += 1
        self.sent_total += 1
        if self.profile.codec_roundtrip:
            msg = wire.decode(wire.encode(msg))
        if self.trace is not None:
            self.trace.append(f"{depart:.9f} send {src}->{dst} {type(msg).__name__}")
        if self._partition and self._blocked(src, dst):
            self.dropped += 1
            return
        rng = self._net_rng
        copies = 1
        if self._lossy:
            if rng.random() < self.profile.drop_probability:
                self.dropped += 1
                return
            if rng.random() < self.profile.duplicate_probability:
                copies = 2
                self.sent_total += 1
        for _ in range(copies):
            at = depart + self._lat_lo + self._lat_span * rng.random()
            self.in_flight += 1
            self._seq += 1
            heapq.heappush(self._heap, (at, src, self._seq, ARRIVE, dst, (src, msg, cat)))

    def _kick(self, node: _Node, t: float) -> None:
        if node.busy_until <= t:
            self._process(node, t)
        else:
            node.scheduled = True
            self._push(node.busy_until, node.id, RESUME, node.id, None)

    def _process(self, node: _Node, t: float) -> None:
        src, msg = node.inbox.popleft()
        rt = node.rt
        if src == _TIMER_SRC:
            rt.clock = t
            node.replica.on_timer(msg)
        else:
            rt.clock = t + self._cost(msg)
            node.replica.deliver(src, msg)
        node.busy_until = rt.clock
        if node.inbox:
            node.scheduled = True
            self._push(rt.clock, node.id, RESUME, node.id, None)
        else:
            node.scheduled = False

    def run(self, until: float) -> None:
        heap = self._heap
        pop = heapq.heappop
        nodes = self.nodes
        while heap and heap[0][0] <= until:
            t, _, _, kind, target, item = pop(heap)
            self.now = t
            if kind == ARRIVE:
                self.in_flight -= 1
                src, msg, cat = item
                if target >= CLIENT_BASE:
                    self.received[target][cat] += 1
                    self.received_total += 1
                    client = self.clients.get(target - CLIENT_BASE)
                    if client is not None:
                        client.on_message(msg, t)
                    continue
                node = nodes[target]
                if node.crashed:
                    self.dropped += 1
                    continue
                self.received[target][cat] += 1
                self.received_total += 1
                node.inbox.append((src, msg))
                if not node.scheduled:
                    self._kick(node, t)
            elif kind == RESUME:
                node = nodes[target]
                node.scheduled = False
                if not node.crashed and node.inbox:
                    self._process(node, t)
            elif kind == TIMER:
                node = nodes[target]
                incarnation, tag = item
                if node.crashed or incarnation != node.incarnation:
                    continue
                node.inbox.append((_TIMER_SRC, tag))
                if not node.scheduled:
                    self._kick(node, t)
            elif kind == CLIENT_TIMER:
                client = self.clients.get(target)
                if client is not None:
                    client.on_timer(item, t)
            elif kind == FAULT:
                self._apply_fault(item, t)
            else:
                item()
        self.now = max(self.now, until)

    def _apply_fault(self, ev: FaultEvent, t: float) -> None:
        log.info("t=%.3f fault %s %s", t, ev.action, list(ev.nodes))
        if self.trace is not None:
            self.trace.append(f"{t:.9f} fault {ev.action} {list(ev.nodes)}")
        if ev.action == "crash":
            for n in ev.nodes:
                node = self.nodes[n]
                if node.crashed:
                    continue
                node.crashed = True
                node.incarnation += 1
                node.inbox.clear()
        elif ev.action == "recover":
            for n in ev.nodes:
                node = self.nodes[n]
                if not node.crashed:
                    continue
                node.crashed = False
                node.busy_until = max(node.busy_until, t)
                node.rt.clock = t
                node.replica.restart()
        elif ev.action == "partition":
            pid = self._next_partition
            self._next_partition += 1
            for n in ev.nodes:
                self._partition[n] = pid
        else:
            if ev.nodes:
                for n in ev.nodes:
                    self._partition.pop(n, None)
            else:
                self._partition.clear()

    # -- accounting -------------------------------------------------------------

    def handled(self, node: int, categories: Sequence[str] = CATEGORIES) -> int:
        s = self.sent.get(node)
        r = self.received.get(node)
        return sum((s or {}).get(c, 0) + (r or {}).get(c, 0) for c in categories)

    def sent_count(self, node: int, categories: Sequence[str] = CATEGORIES) -> int:
        s = self.sent.get(node) or {}
        return sum(s.get(c, 0) for c in categories)

    def received_count(self, node: int, categories: Sequence[str] = CATEGORIES) -> int:
        r = self.received.get(node) or {}
        return sum(r.get(c, 0) for c in categories)

    def conservation_ok(self) -> bool:
        return self.sent_total == self.received_total + self.dropped + self.in_flight

    def pig_totals(self) -> dict[str, int]:
        out = {"rounds": 0, "retries": 0, "election_retries": 0, "relay_timeouts": 0,
               "relay_misses": 0, "alarms": 0}
        for node in self.nodes:
            st = node.replica.stats
            for k in out:
                out[k] += getattr(st, k)
        return out


def sim_run(config: ClusterConfig, profile: Optional[NetworkProfile] = None,
            workload: Any = None, seed: Optional[int] = None,
            duration: Optional[float] = None, *, mode: str = "pig",
            faults: Sequence[FaultEvent] = (), record_history: bool = False) -> Any:
    """Run one closed-loop workload on a fresh simulated cluster.

    ``duration`` overrides the workload's own. Returns the bench ``SimOutcome``:
    ``.report`` holds the metrics and ``.simulator.trace`` the event trace.
    """
    from dataclasses import replace

    from ..bench import SimEndpoint, WorkloadSpec

    spec = workload or WorkloadSpec()
    if duration is not None:
        spec = replace(spec, duration=duration)
    endpoint = SimEndpoint(config, mode=mode, profile=profile, seed=seed, faults=faults,
                           record_history=record_history, trace=True)
    return endpoint.run(spec)
