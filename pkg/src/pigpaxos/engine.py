"""Multi-Paxos replica state machine.

The engine never touches a network or a clock. Handlers take the current time
as an argument and queue their effects on ``Engine.out`` (logical broadcasts,
point-to-point sends and client replies); the owning replica drains and
routes them. Broadcasts are handed to the relay layer or sent directly,
depending on how the replica is wired.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol

from .core import (NOOP, ZERO_BALLOT, Ballot, Command, EntryState, LogEntry, NodeId, Op,
                   majority)
from .kvstore import ApplyResult, KvStore

# -- messages -------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AcceptedEntry:
    slot: int
    ballot: Ballot
    command: Command
    committed: bool = False


@dataclass(frozen=True, slots=True)
class P1a:
    ballot: Ballot
    commit_up_to: int = -1


@dataclass(frozen=True, slots=True)
class P1b:
    ballot: Ballot
    voter: NodeId
    accepted: tuple[AcceptedEntry, ...] = ()


@dataclass(frozen=True, slots=True)
class P2a:
    ballot: Ballot
    slot: int
    command: Command
    commit_up_to: int = -1


@dataclass(frozen=True, slots=True)
class P2b:
    ballot: Ballot
    slot: int
    voter: NodeId
    reject_ballot: Optional[Ballot] = None


@dataclass(frozen=True, slots=True)
class P3:
    slot: int
    command: Command


@dataclass(frozen=True, slots=True)
class CatchupRequest:
    voter: NodeId
    from_slot: int


@dataclass(frozen=True, slots=True)
class ClientRequest:
    command: Command


class ReplyStatus(enum.IntEnum):
    OK = 0
    NOT_LEADER = 1


@dataclass(frozen=True, slots=True)
class ClientReply:
    client_id: int
    request_seq: int
    status: ReplyStatus = ReplyStatus.OK
    found: bool = False
    value: bytes = b""
    leader_hint: int = -1


HEARTBEAT = P3(-1, NOOP)

# -- effects --------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Broadcast:
    msg: P1a | P2a


@dataclass(frozen=True, slots=True)
class Send:
    dst: NodeId
    msg: object


@dataclass(frozen=True, slots=True)
class ToClient:
    reply: ClientReply


class Observer(Protocol):
    def on_accept(self, node: NodeId, slot: int, ballot: Ballot) -> None: ...

    def on_commit(self, node: NodeId, slot: int, command: Command, ballot: Ballot,
                  voters: Optional[frozenset[NodeId]]) -> None: ...

    def on_execute(self, node: NodeId, slot: int, command: Command,
                   result: ApplyResult) -> None: ...


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class _Instance:
    __slots__ = ("ballot", "command", "voters", "state")

    def __init__(self, ballot: Ballot, command: Command, state: EntryState = EntryState.ACCEPTED):
        self.ballot = ballot
        self.command = command
        self.voters: set[NodeId] = set()
        self.state = state


class Engine:
    """Single replica's Paxos state. Not thread-safe; one event at a time."""

    CATCHUP_BATCH = 256

    def __init__(self, node_id: NodeId, n: int, *, leader_timeout: float = 0.2,
                 relay_timeout: float = 0.05, bootstrap_leader: Optional[NodeId] = None,
                 rng: Optional[random.Random] = None, observer: Optional[Observer] = None):
        self.id = node_id
        self.n = n
        self.quorum = majority(n)
        self.leader_timeout = leader_timeout
        self.relay_timeout = relay_timeout
        self.rng = rng or random.Random(node_id)
        self.observer = observer

        self.ballot = ZERO_BALLOT
        self.role = Role.FOLLOWER
        self.log: dict[int, _Instance] = {}
        self.kv = KvStore()
        self.commit_index = -1
        self.known_commit = -1
        self.known_commit_ballot = ZERO_BALLOT
        self.next_slot = 0
        self.out: list = []

        self.last_contact = 0.0
        self.election_timeout = self._draw_election_timeout()
        self._stall_mark = -2
        self._last_catchup = -1.0

        # leader state
        self.pending: dict[tuple[int, int], int] = {}
        self.announced = -1
        self.last_broadcast = 0.0
        # candidate state
        self.p1_voters: set[NodeId] = set()
        self.p1_accepted: dict[int, AcceptedEntry] = {}
        self.buffered: list[Command] = []

        self.dropped_votes = 0
        self.elections_started = 0

        if bootstrap_leader is not None:
            self.ballot = Ballot(1, bootstrap_leader)
            if bootstrap_leader == node_id:
                self.role = Role.LEADER

    # -- helpers ---------------------------------------------------------

    def _draw_election_timeout(self) -> float:
        return 3 * self.leader_timeout * self.rng.uniform(0.8, 1.2)

    @property
    def is_leader(self) -> bool:
        return self.role is Role.LEADER

    @property
    def leader_hint(self) -> int:
        if self.ballot == ZERO_BALLOT:
            return -1
        return self.ballot.proposer

    def take(self) -> list:
        out, self.out = self.out, []
        return out

    def entry(self, slot: int) -> Optional[LogEntry]:
        inst = self.log.get(slot)
        if inst is None:
            return None
        state = inst.state
        if state == EntryState.COMMITTED and slot < self.kv.applied_up_to:
            state = EntryState.EXECUTED
        return LogEntry(slot, inst.ballot, inst.command, frozenset(inst.voters), state)

    def executed_log(self) -> list[Command]:
        return [self.log[s].command for s in range(self.kv.applied_up_to)]

    def is_committed(self, slot: int) -> bool:
        inst = self.log.get(slot)
        return inst is not None and inst.state >= EntryState.COMMITTED

    def round_pending(self, msg: P1a | P2a) -> bool:
        """Whether a broadcast of ``msg`` still needs replies."""
        if msg.ballot != self.ballot:
            return False
        if isinstance(msg, P1a):
            return self.role is Role.CANDIDATE
        return self.role is Role.LEADER and not self.is_committed(msg.slot)

    def _leader_alive(self, now: float) -> bool:
        return (self.ballot != ZERO_BALLOT and self.ballot.proposer != self.id
                and now - self.last_contact < self.election_timeout)

    def _adopt(self, ballot: Ballot, now: float) -> None:
        """Promise ``ballot``; step down if someone else now owns leadership."""
        if ballot <= self.ballot:
            return
        self.ballot = ballot
        if ballot.proposer != self.id and self.role is not Role.FOLLOWER:
            self._step_down(now)

    def _step_down(self, now: float) -> None:
        self.role = Role.FOLLOWER
        self.last_contact = now
        hint = self.leader_hint
        for (cid, seq) in self.pending:
            self.out.append(
                ToClient(ClientReply(cid, seq, ReplyStatus.NOT_LEADER, leader_hint=hint)))
        for cmd in self.buffered:
            self.out.append(ToClient(ClientReply(cmd.client_id, cmd.request_seq,
                                                 ReplyStatus.NOT_LEADER, leader_hint=hint)))
        self.pending.clear()
        self.buffered.clear()
        self.p1_voters.clear()
        self.p1_accepted.clear()

    # -- commit & execution ------------------------------------------------

    def _commit(self, slot: int, inst: _Instance, voters: Optional[frozenset[NodeId]]) -> None:
        inst.state = EntryState.COMMITTED
        if self.observer is not None:
            self.observer.on_commit(self.id, slot, inst.command, inst.ballot, voters)
        log = self.log
        ci = self.commit_index
        while True:
            nxt = log.get(ci + 1)
            if nxt is None or nxt.state < EntryState.COMMITTED:
                break
            ci += 1
        self.commit_index = ci
        self._execute()

    def _execute(self) -> None:
        kv = self.kv
        log = self.log
        while kv.applied_up_to <= self.commit_index:
            slot = kv.applied_up_to
            inst = log[slot]
            result = kv.apply(LogEntry(slot, inst.ballot, inst.command, state=inst.state))
            cmd = inst.command
            if self.observer is not None:
                self.observer.on_execute(self.id, slot, cmd, result)
            if cmd.op != Op.NOOP and self.role is Role.LEADER:
                self.pending.pop((cmd.client_id, cmd.request_seq), None)
                self.out.append(ToClient(ClientReply(
                    cmd.client_id, cmd.request_seq, ReplyStatus.OK, result.found, result.value)))

    def _advance_watermark(self) -> None:
        """Commit local entries covered by the highest known commit watermark."""
        # Only entries accepted in the watermark's ballot are known to hold
        # the leader's value; anything else waits for catch-up.
        ballot = self.known_commit_ballot
        while self.commit_index < self.known_commit:
            s = self.commit_index + 1
            inst = self.log.get(s)
            if inst is None or inst.ballot != ballot:
                break
            self._commit(s, inst, None)

    def _note_watermark(self, upto: int, ballot: Ballot) -> None:
        if ballot > self.known_commit_ballot:
            self.known_commit, self.known_commit_ballot = upto, ballot
        elif ballot == self.known_commit_ballot and upto > self.known_commit:
            self.known_commit = upto
        self._advance_watermark()

    # -- client path -------------------------------------------------------

    def on_client_request(self, cmd: Command, now: float) -> None:
        if self.role is Role.LEADER:
            cached = self.kv.cached(cmd.client_id)
            if cached is not None and cmd.request_seq <= cached[0]:
                if cmd.request_seq == cached[0]:
                    res = cached[1]
                    self.out.append(ToClient(ClientReply(
                        cmd.client_id, cmd.request_seq, ReplyStatus.OK, res.found, res.value)))
                return
            if cmd.request_id in self.pending:
                return
            self._propose(cmd, now)
        elif self.role is Role.CANDIDATE:
            self.buffered.append(cmd)
        elif self._leader_alive(now):
            self.out.append(ToClient(ClientReply(
                cmd.client_id, cmd.request_seq, ReplyStatus.NOT_LEADER,
                leader_hint=self.leader_hint)))
        else:
            self.buffered.append(cmd)
            self.start_election(now)

    def _propose(self, cmd: Command, now: float, slot: Optional[int] = None) -> None:
        if slot is None:
            slot = self.next_slot
            self.next_slot += 1
            if cmd.op != Op.NOOP:
                self.pending[cmd.request_id] = slot
        inst = _Instance(self.ballot, cmd)
        inst.voters.add(self.id)
        self.log[slot] = inst
        if self.observer is not None:
            self.observer.on_accept(self.id, slot, self.ballot)
        self.announced = self.commit_index
        self.last_broadcast = now
        self.out.append(Broadcast(P2a(self.ballot, slot, cmd, self.commit_index)))
        if len(inst.voters) >= self.quorum:
            self._commit(slot, inst, frozenset(inst.voters))

    # -- phase 1 -----------------------------------------------------------

    def start_election(self, now: float) -> None:
        self.elections_started += 1
        self.role = Role.CANDIDATE
        self.ballot = self.ballot.next_for(self.id)
        self.last_contact = now
        self.election_timeout = self._draw_election_timeout()
        self.p1_voters = {self.id}
        self.p1_accepted = {}
        self.out.append(Broadcast(P1a(self.ballot, self.commit_index)))
        if len(self.p1_voters) >= self.quorum:
            self._become_leader(now)

    def _report(self, above: int) -> tuple[AcceptedEntry, ...]:
        return tuple(
            AcceptedEntry(s, inst.ballot, inst.command, inst.state >= EntryState.COMMITTED)
            for s, inst in sorted(self.log.items()) if s > above)

    def on_p1a(self, msg: P1a, now: float) -> P1b:
        if msg.ballot > self.ballot:
            self._adopt(msg.ballot, now)
            self.last_contact = now
        if msg.ballot == self.ballot:
            return P1b(self.ballot, self.id, self._report(msg.commit_up_to))
        return P1b(self.ballot, self.id)

    def on_p1b(self, msg: P1b, now: float) -> None:
        if msg.ballot > self.ballot:
            self.on_reject(msg.ballot, now)
        else:
            self.on_p1_votes(msg.ballot, (msg.voter,), msg.accepted, now)

    def on_p1_votes(self, ballot: Ballot, voters: Iterable[NodeId],
                    accepted: Iterable[AcceptedEntry], now: float) -> None:
        if self.role is not Role.CANDIDATE or ballot != self.ballot:
            self.dropped_votes += 1
            return
        self.p1_voters.update(voters)
        merged = self.p1_accepted
        for e in accepted:
            merged[e.slot] = merge_accepted(merged.get(e.slot), e)
        if len(self.p1_voters) >= self.quorum:
            self._become_leader(now)

    def _become_leader(self, now: float) -> None:
        self.role = Role.LEADER
        reported = self.p1_accepted
        top = max([self.commit_index, *reported, *self.log])
        for s in range(self.commit_index + 1, top + 1):
            inst = self.log.get(s)
            if inst is not None and inst.state >= EntryState.COMMITTED:
                continue
            rep = reported.get(s)
            if rep is not None and rep.committed:
                chosen = _Instance(rep.ballot, rep.command)
                self.log[s] = chosen
                self._commit(s, chosen, None)
                continue
            cmd = NOOP
            best = None
            if inst is not None:
                best = AcceptedEntry(s, inst.ballot, inst.command)
            if rep is not None:
                best = merge_accepted(best, rep)
            if best is not None:
                cmd = best.command
            self._propose(cmd, now, slot=s)
        self.next_slot = max(self.next_slot, top + 1)
        self.p1_voters.clear()
        self.p1_accepted.clear()
        buffered, self.buffered = self.buffered, []
        for cmd in buffered:
            self.on_client_request(cmd, now)

    # -- phase 2 -----------------------------------------------------------

    def on_p2a(self, msg: P2a, now: float) -> P2b:
        if msg.ballot < self.ballot:
            return P2b(msg.ballot, msg.slot, self.id, self.ballot)
        if msg.ballot > self.ballot:
            self._adopt(msg.ballot, now)
        if self.role is Role.FOLLOWER:
            self.last_contact = now
        inst = self.log.get(msg.slot)
        if inst is None:
            self.log[msg.slot] = _Instance(msg.ballot, msg.command)
        elif inst.state < EntryState.COMMITTED:
            inst.ballot = msg.ballot
            inst.command = msg.command
        if self.observer is not None:
            self.observer.on_accept(self.id, msg.slot, msg.ballot)
        if msg.commit_up_to > self.commit_index or self.known_commit > self.commit_index:
            self._note_watermark(msg.commit_up_to, msg.ballot)
        return P2b(msg.ballot, msg.slot, self.id)

    def on_p2b(self, msg: P2b, now: float) -> None:
        if msg.reject_ballot is not None:
            self.on_reject(msg.reject_ballot, now)
        else:
            self.on_vote(msg.slot, msg.voter, msg.ballot)

    def on_vote(self, slot: int, voter: NodeId, ballot: Ballot) -> bool:
        """Tally one phase-2 vote; returns True when it commits the slot."""
        if self.role is not Role.LEADER or ballot != self.ballot:
            self.dropped_votes += 1
            return False
        inst = self.log.get(slot)
        if inst is None or inst.ballot != ballot:
            self.dropped_votes += 1
            return False
        inst.voters.add(voter)
        if inst.state < EntryState.COMMITTED and len(inst.voters) >= self.quorum:
            self._commit(slot, inst, frozenset(inst.voters))
            return True
        return False

    def on_reject(self, ballot: Ballot, now: float) -> None:
        self._adopt(ballot, now)

    # -- phase 3 and catch-up ----------------------------------------------

    def on_p3(self, msg: P3, src: NodeId, now: float) -> None:
        if src == self.ballot.proposer and self.role is Role.FOLLOWER:
            self.last_contact = now
        if msg.slot < 0:
            return
        inst = self.log.get(msg.slot)
        if inst is not None and inst.state >= EntryState.COMMITTED:
            return
        if inst is None:
            inst = _Instance(self.ballot, msg.command)
            self.log[msg.slot] = inst
        else:
            inst.command = msg.command
        self._commit(msg.slot, inst, None)
        self._advance_watermark()

    def on_catchup(self, msg: CatchupRequest) -> None:
        log = self.log
        for s in range(msg.from_slot, msg.from_slot + self.CATCHUP_BATCH):
            inst = log.get(s)
            if inst is None:
                if s > self.commit_index:
                    break
                continue
            if inst.state >= EntryState.COMMITTED:
                self.out.append(Send(msg.voter, P3(s, inst.command)))

    # -- periodic work -------------------------------------------------------

    def tick(self, now: float) -> None:
        if self.role is Role.LEADER:
            self._leader_tick(now)
            return
        if now - self.last_contact >= self.election_timeout:
            self.start_election(now)
            return
        if self.commit_index < self.known_commit:
            if self._stall_mark == self.commit_index and \
                    now - self._last_catchup >= self.relay_timeout and \
                    self.ballot.proposer != self.id:
                self._last_catchup = now
                self.out.append(Send(self.ballot.proposer,
                                     CatchupRequest(self.id, self.commit_index + 1)))
            self._stall_mark = self.commit_index
        else:
            self._stall_mark = -2

    def _leader_tick(self, now: float) -> None:
        idle = now - self.last_broadcast
        if idle >= self.relay_timeout and self.commit_index > self.announced:
            for s in range(self.announced + 1, self.commit_index + 1):
                cmd = self.log[s].command
                for peer in range(self.n):
                    if peer != self.id:
                        self.out.append(Send(peer, P3(s, cmd)))
            self.announced = self.commit_index
            self.last_broadcast = now
        elif idle >= self.leader_timeout:
            for peer in range(self.n):
                if peer != self.id:
                    self.out.append(Send(peer, HEARTBEAT))
            self.last_broadcast = now


def merge_accepted(a: Optional[AcceptedEntry], b: AcceptedEntry) -> AcceptedEntry:
    """Keep the report a new leader must re-propose: committed wins, then ballot."""
    if a is None:
        return b
    if a.committed:
        return a
    if b.committed:
        return b
    return b if b.ballot > a.ballot else a
