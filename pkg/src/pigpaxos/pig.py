"""Relay-based fan-out/fan-in for a replica's logical broadcasts.

The leader sends each broadcast to one randomly chosen relay per group. A
relay handles the message like any follower, forwards it to its group peers,
collects their replies and returns one compressed ``AggregatedReply`` that
lists only the members that did not ack.
"""

from __future__ import annotations

import logging
import random
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Protocol

from .core import Ballot, ClusterConfig, NodeId, RelayGroupConfig
from .engine import AcceptedEntry, Engine, P1a, P1b, P2a, P2b, merge_accepted

log = logging.getLogger(__name__)


class Runtime(Protocol):
    def now(self) -> float: ...

    def send(self, dst: NodeId, msg: object) -> None: ...

    def send_client(self, client_id: int, msg: object) -> None: ...

    def set_timer(self, delay: float, tag: tuple) -> None: ...


@dataclass(frozen=True, order=True, slots=True)
class PigMsgId:
    initiator: NodeId
    sequence: int


@dataclass(frozen=True, slots=True)
class PigEnvelope:
    """Relayed protocol message.

    From the leader ``group_members`` names the relay's whole group. Relay
    forwards and member replies carry an empty member list.
    """

    pig_id: PigMsgId
    group_members: tuple[NodeId, ...]
    payload: P1a | P2a | P1b | P2b


@dataclass(frozen=True, slots=True)
class AggregatedReply:
    pig_id: PigMsgId
    phase: int
    ballot: Ballot
    slot: int
    ack_count: int
    missing_voters: tuple[NodeId, ...] = ()
    reject_ballot: Optional[Ballot] = None
    accepted: tuple[AcceptedEntry, ...] = ()


class GrayList:
    """Nodes recently suspected of failing as relays, with timed expiry."""

    def __init__(self, duration: float = 5.0, probe_probability: float = 0.05):
        self.duration = duration
        self.probe_probability = probe_probability
        self.entries: dict[NodeId, float] = {}

    def is_gray(self, node: NodeId, now: float) -> bool:
        expiry = self.entries.get(node)
        if expiry is None:
            return False
        if now >= expiry:
            del self.entries[node]
            return False
        return True

    def update(self, node: NodeId, event: str, now: float) -> None:
        if event == "relay_timeout":
            self.entries[node] = now + self.duration
        elif event == "probe_success":
            self.entries.pop(node, None)
        else:
            raise ValueError(f"unknown gray list event {event!r}")

    def __contains__(self, node: NodeId) -> bool:
        return node in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def select_relays(groups: RelayGroupConfig, graylist: Optional[GrayList],
                  rng: random.Random, now: float = 0.0) -> tuple[NodeId, ...]:
    """Draw one relay per group, avoiding gray-listed members except on probes."""
    relays = []
    for members in groups.groups:
        if not graylist or not graylist.entries:
            relays.append(members[rng.randrange(len(members))])
            continue
        pool: tuple[NodeId, ...] | list[NodeId] = members
        if rng.random() >= graylist.probe_probability:
            pool = [m for m in members if not graylist.is_gray(m, now)] or members
        relays.append(pool[rng.randrange(len(pool))])
    return tuple(relays)


@dataclass(slots=True)
class PendingAggregation:
    pig_id: PigMsgId
    phase: int
    ballot: Ballot
    slot: int
    expected: tuple[NodeId, ...]
    threshold: int
    deadline: float
    acked: set[NodeId] = field(default_factory=set)
    reject: Optional[Ballot] = None
    accepted: dict[int, AcceptedEntry] = field(default_factory=dict)


class _Round:
    __slots__ = ("payload", "relays", "responded", "retries")

    def __init__(self, payload: P1a | P2a, relays: tuple[NodeId, ...], retries: int):
        self.payload = payload
        self.relays = relays
        self.responded: set[NodeId] = set()
        self.retries = retries


@dataclass
class PigStats:
    rounds: int = 0
    # phase-2 rounds re-sent after the leader timeout
    retries: int = 0
    # phase-1 rounds re-sent by a candidate
    election_retries: int = 0
    relay_timeouts: int = 0
    relay_misses: int = 0
    alarms: int = 0
    dropped_replies: int = 0
    unknown_aggregates: int = 0
    relay_selections: Counter = field(default_factory=Counter)


class PigLayer:
    def __init__(self, node_id: NodeId, config: ClusterConfig, engine: Engine, runtime: Runtime,
                 rng: random.Random):
        self.id = node_id
        self.config = config
        self.engine = engine
        self.rt = runtime
        self.rng = rng
        gl = config.graylist
        self.graylist = GrayList(gl.duration, gl.probe_probability)
        self.graylist_enabled = gl.enabled
        self.shortcut = config.majority_shortcut and config.r == 1
        self.seq = 0
        self.rounds: dict[int, _Round] = {}
        self.pending: dict[PigMsgId, PendingAggregation] = {}
        self.closed: OrderedDict[PigMsgId, None] = OrderedDict()
        self.stats = PigStats()
        # (time, relays) per broadcast, when enabled
        self.selection_trace: Optional[list[tuple[float, tuple[NodeId, ...]]]] = None
        self._groups = config.groups_for(node_id) if config.n > 1 else None
        self._group_index = {m: i for i, g in enumerate(self._groups.groups) for m in g} \
            if self._groups else {}

    def reset(self) -> None:
        self.rounds.clear()
        self.pending.clear()
        self.closed.clear()

    # -- leader side -------------------------------------------------------

    def broadcast(self, payload: P1a | P2a, retries: int = 0) -> None:
        if self._groups is None:
            return
        now = self.rt.now()
        gl = self.graylist if self.graylist_enabled else None
        relays = select_relays(self._groups, gl, self.rng, now)
        self.seq += 1
        pig_id = PigMsgId(self.id, self.seq)
        send = self.rt.send
        for relay, members in zip(relays, self._groups.groups):
            send(relay, PigEnvelope(pig_id, members, payload))
        self.stats.rounds += 1
        self.stats.relay_selections.update(relays)
        if self.selection_trace is not None:
            self.selection_trace.append((now, relays))
        self.rounds[self.seq] = _Round(payload, relays, retries)
        self.rt.set_timer(self.config.leader_timeout, ("round", self.seq))

    def on_aggregated_reply(self, src: NodeId, agg: AggregatedReply) -> None:
        engine = self.engine
        now = self.rt.now()
        if agg.pig_id.initiator == self.id:
            rnd = self.rounds.get(agg.pig_id.sequence)
            if rnd is not None:
                rnd.responded.add(src)
        if self.graylist.entries and src in self.graylist:
            self.graylist_update(src, "probe_success")
        if agg.reject_ballot is not None:
            engine.on_reject(agg.reject_ballot, now)
        idx = self._group_index.get(src)
        if idx is None:
            self.stats.unknown_aggregates += 1
            return
        members = self._groups.groups[idx]
        missing = agg.missing_voters
        voters = [m for m in members if m not in missing] if missing else members
        if agg.phase == 2:
            if agg.ack_count:
                on_vote = engine.on_vote
                for v in voters:
                    on_vote(agg.slot, v, agg.ballot)
        elif agg.ack_count:
            engine.on_p1_votes(agg.ballot, voters, agg.accepted, now)

    def on_leader_timeout(self, seq: int) -> None:
        rnd = self.rounds.pop(seq, None)
        if rnd is None:
            return
        for relay in rnd.relays:
            if relay not in rnd.responded:
                self.stats.relay_misses += 1
                if self.graylist_enabled:
                    self.graylist_update(relay, "relay_timeout")
        if not self.engine.round_pending(rnd.payload):
            return
        if isinstance(rnd.payload, P2a):
            self.stats.retries += 1
        else:
            self.stats.election_retries += 1
        retries = rnd.retries + 1
        if retries > self.config.max_retries_before_alarm:
            self.stats.alarms += 1
            log.warning("node %d: broadcast %r retried %d times", self.id, rnd.payload, retries)
        self.broadcast(rnd.payload, retries)

    def graylist_update(self, node: NodeId, event: str) -> None:
        self.graylist.update(node, event, self.rt.now())

    # -- relay and member side ---------------------------------------------

    def on_envelope(self, src: NodeId, env: PigEnvelope) -> None:
        payload = env.payload
        if isinstance(payload, (P2b, P1b)):
            self._on_reply(env)
            return
        now = self.rt.now()
        engine = self.engine
        reply = engine.on_p2a(payload, now) if isinstance(payload, P2a) \
            else engine.on_p1a(payload, now)
        if not env.group_members:
            self.rt.send(src, PigEnvelope(env.pig_id, (), reply))
            return
        pig_id = env.pig_id
        if pig_id in self.pending or pig_id in self.closed:
            return
        members = env.group_members
        send = self.rt.send
        forward = PigEnvelope(pig_id, (), payload)
        for m in members:
            if m != self.id:
                send(m, forward)
        if isinstance(payload, P2a):
            agg = PendingAggregation(pig_id, 2, payload.ballot, payload.slot, members,
                                     max(len(members) - self.config.prc, 0),
                                     now + self.config.relay_timeout)
        else:
            agg = PendingAggregation(pig_id, 1, payload.ballot, -1, members,
                                     max(len(members) - self.config.prc, 0),
                                     now + self.config.relay_timeout)
        self.pending[pig_id] = agg
        if self._record(agg, reply):
            self._flush(agg)
        else:
            self.rt.set_timer(self.config.relay_timeout, ("agg", pig_id))

    def _record(self, agg: PendingAggregation, reply: P1b | P2b) -> bool:
        """Add one member reply; True when the aggregation should flush now."""
        if isinstance(reply, P2b):
            if reply.reject_ballot is not None:
                agg.reject = max(reply.reject_ballot, agg.reject or reply.reject_ballot)
                return True
            if reply.ballot != agg.ballot or reply.slot != agg.slot:
                self.stats.dropped_replies += 1
                return False
        else:
            if reply.ballot > agg.ballot:
                agg.reject = max(reply.ballot, agg.reject or reply.ballot)
                return True
            if reply.ballot != agg.ballot:
                self.stats.dropped_replies += 1
                return False
            merged = agg.accepted
            for e in reply.accepted:
                merged[e.slot] = merge_accepted(merged.get(e.slot), e)
        agg.acked.add(reply.voter)
        acks = len(agg.acked)
        if acks >= agg.threshold or acks >= len(agg.expected):
            return True
        return self.shortcut and acks + 1 >= self.engine.quorum

    def _on_reply(self, env: PigEnvelope) -> None:
        agg = self.pending.get(env.pig_id)
        if agg is None:
            self.stats.dropped_replies += 1
            return
        if self._record(agg, env.payload):
            self._flush(agg)

    def _flush(self, agg: PendingAggregation) -> None:
        del self.pending[agg.pig_id]
        self.closed[agg.pig_id] = None
        if len(self.closed) > 4096:
            self.closed.popitem(last=False)
        acked = agg.acked
        missing = tuple(m for m in agg.expected if m not in acked)
        accepted = tuple(agg.accepted[s] for s in sorted(agg.accepted)) if agg.accepted else ()
        self.rt.send(agg.pig_id.initiator, AggregatedReply(
            agg.pig_id, agg.phase, agg.ballot, agg.slot, len(agg.expected) - len(missing),
            missing, agg.reject, accepted))

    def on_relay_timeout(self, pig_id: PigMsgId) -> None:
        agg = self.pending.get(pig_id)
        if agg is not None:
            self.stats.relay_timeouts += 1
            self._flush(agg)

    def on_timer(self, tag: tuple) -> None:
        if tag[0] == "round":
            self.on_leader_timeout(tag[1])
        elif tag[0] == "agg":
            self.on_relay_timeout(tag[1])
