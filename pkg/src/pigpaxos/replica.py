"""Wires one Paxos engine to a broadcast layer and a runtime.

A replica is transport-agnostic: the simulator and the socket server both
drive it through ``deliver`` and ``on_timer`` and provide the ``Runtime``.
"""

from __future__ import annotations

import random
from typing import Optional

from .core import ClusterConfig, NodeId
from .engine import (Broadcast, CatchupRequest, ClientRequest, Engine, Observer, P1a, P1b, P2a,
                     P2b, P3, Role, Send)
from .pig import AggregatedReply, PigEnvelope, PigLayer, PigStats, Runtime

TICK = ("tick",)


class DirectLayer:
    """Classical broadcast: the leader talks to every follower itself."""

    def __init__(self, node_id: NodeId, config: ClusterConfig, engine: Engine, runtime: Runtime):
        self.id = node_id
        self.config = config
        self.engine = engine
        self.rt = runtime
        self.seq = 0
        self.rounds: dict[int, tuple[P1a | P2a, int]] = {}
        self.stats = PigStats()
        self._peers = [p for p in range(config.n) if p != node_id]

    def reset(self) -> None:
        self.rounds.clear()

    def broadcast(self, payload: P1a | P2a, retries: int = 0) -> None:
        send = self.rt.send
        for p in self._peers:
            send(p, payload)
        self.seq += 1
        self.stats.rounds += 1
        self.rounds[self.seq] = (payload, retries)
        self.rt.set_timer(self.config.leader_timeout, ("round", self.seq))

    def on_timer(self, tag: tuple) -> None:
        if tag[0] != "round":
            return
        entry = self.rounds.pop(tag[1], None)
        if entry is None:
            return
        payload, retries = entry
        if self.engine.round_pending(payload):
            if isinstance(payload, P2a):
                self.stats.retries += 1
            else:
                self.stats.election_retries += 1
            if retries + 1 > self.config.max_retries_before_alarm:
                self.stats.alarms += 1
            self.broadcast(payload, retries + 1)


class Replica:
    def __init__(self, node_id: NodeId, config: ClusterConfig, runtime: Runtime, *,
                 mode: str = "pig", observer: Optional[Observer] = None):
        if mode not in ("pig", "paxos"):
            raise ValueError(f"unknown replication mode {mode!r}")
        self.id = node_id
        self.config = config
        self.rt = runtime
        self.mode = mode
        seed = config.rng_seed
        self.engine = Engine(
            node_id, config.n, leader_timeout=config.leader_timeout,
            relay_timeout=config.relay_timeout, bootstrap_leader=config.bootstrap_leader,
            rng=random.Random(f"{seed}:election:{node_id}"), observer=observer)
        if mode == "pig":
            self.layer: PigLayer | DirectLayer = PigLayer(
                node_id, config, self.engine, runtime, random.Random(f"{seed}:relay:{node_id}"))
        else:
            self.layer = DirectLayer(node_id, config, self.engine, runtime)
        self.tick_interval = config.relay_timeout / 2

    def start(self) -> None:
        self.rt.set_timer(self.tick_interval, TICK)

    def restart(self) -> None:
        """Come back after a crash: keep acceptor state and the log, drop the rest."""
        eng = self.engine
        eng.out.clear()
        eng.role = Role.FOLLOWER
        eng.pending.clear()
        eng.buffered.clear()
        eng.p1_voters.clear()
        eng.p1_accepted.clear()
        eng.last_contact = self.rt.now()
        self.layer.reset()
        self.start()

    @property
    def stats(self) -> PigStats:
        return self.layer.stats

    def deliver(self, src: int, msg: object) -> None:
        engine = self.engine
        now = self.rt.now()
        t = type(msg)
        if t is PigEnvelope:
            self.layer.on_envelope(src, msg)
        elif t is AggregatedReply:
            self.layer.on_aggregated_reply(src, msg)
        elif t is ClientRequest:
            engine.on_client_request(msg.command, now)
        elif t is P2a:
            self.rt.send(src, engine.on_p2a(msg, now))
        elif t is P2b:
            engine.on_p2b(msg, now)
        elif t is P3:
            engine.on_p3(msg, src, now)
        elif t is P1a:
            self.rt.send(src, engine.on_p1a(msg, now))
        elif t is P1b:
            engine.on_p1b(msg, now)
        elif t is CatchupRequest:
            engine.on_catchup(msg)
        else:
            raise TypeError(f"unexpected message {t.__name__}")
        self._drain()

    def on_timer(self, tag: tuple) -> None:
        if tag == TICK:
            self.engine.tick(self.rt.now())
            self.rt.set_timer(self.tick_interval, TICK)
        else:
            self.layer.on_timer(tag)
        self._drain()

    def _drain(self) -> None:
        engine = self.engine
        while engine.out:
            for eff in engine.take():
                t = type(eff)
                if t is Broadcast:
                    self.layer.broadcast(eff.msg)
                elif t is Send:
                    self.rt.send(eff.dst, eff.msg)
                else:
                    self.rt.send_client(eff.reply.client_id, eff.reply)
