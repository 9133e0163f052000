"""asyncio stream transport for running replicas as real processes.

Each connection starts with a 2-byte preamble naming the sender: a node id,
or 0xFFFF for a client. After that both directions carry wire frames.
Every message and timer for a replica is funnelled into one queue consumed
by a single task, so the replica is never re-entered.
"""

from __future__ import annotations

import asyncio
import logging
import random
import struct
import time
from collections import deque
from typing import Optional

from ..bench import ClosedLoopClient, MetricsReport, Recorder, WorkloadSpec
from ..core import ClusterConfig, NodeId, parse_addr
from ..engine import ClientReply, ClientRequest
from ..replica import Replica
from . import wire

log = logging.getLogger(__name__)

CLIENT_PREAMBLE = 0xFFFF
_PREAMBLE = struct.Struct(">H")
_TIMER = object()


class PeerLink:
    """Outbound connection to one peer with reconnect and bounded buffering."""

    def __init__(self, owner: NodeId, peer: NodeId, addr: str, limit: int = 10_000):
        self.owner = owner
        self.peer = peer
        self.host, self.port = parse_addr(addr)
        self.limit = limit
        self.queue: deque[bytes] = deque()
        self.dropped = 0
        self.connected = False
        self._wake = asyncio.Event()
        self._task: Optional[asyncio.Task] = None

    def start(self) -> None:
        self._task = asyncio.get_running_loop().create_task(self._run())

    def send(self, frame: bytes) -> None:
        if len(self.queue) >= self.limit:
            self.dropped += 1
            return
        self.queue.append(frame)
        self._wake.set()

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass

    async def _run(self) -> None:
        backoff = 0.05
        while True:
            try:
                reader, writer = await asyncio.open_connection(self.host, self.port)
            except OSError as exc:
                log.debug("node %d: connect to %d failed: %s", self.owner, self.peer, exc)
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            backoff = 0.05
            self.connected = True
            log.info("node %d: connected to peer %d", self.owner, self.peer)
            try:
                writer.write(_PREAMBLE.pack(self.owner))
                while True:
                    while self.queue:
                        writer.write(self.queue.popleft())
                    await writer.drain()
                    self._wake.clear()
                    if not self.queue:
                        await self._wake.wait()
            except (OSError, ConnectionError) as exc:
                log.info("node %d: link to %d lost: %s", self.owner, self.peer, exc)
            finally:
                self.connected = False
                writer.close()


class _SocketRuntime:
    def __init__(self, server: "NodeServer"):
        self.server = server
        self.loop = asyncio.get_running_loop()
        self.t0 = self.loop.time()

    def now(self) -> float:
        return self.loop.time() - self.t0

    def send(self, dst: NodeId, msg: object) -> None:
        link = self.server.links.get(dst)
        if link is not None:
            link.send(wire.encode(msg))

    def send_client(self, client_id: int, msg: object) -> None:
        writer = self.server.clients.get(client_id)
        if writer is None or writer.is_closing():
            return
        writer.write(wire.encode(msg))

    def set_timer(self, delay: float, tag: tuple) -> None:
        self.loop.call_later(delay, self.server.events.put_nowait, (_TIMER, tag))


class NodeServer:
    def __init__(self, config: ClusterConfig, node_id: NodeId, *, mode: str = "pig"):
        if not config.peers:
            raise ValueError("socket mode needs a peers table in the configuration")
        if node_id not in config.peers:
            raise ValueError(f"node id {node_id} is not listed in peers")
        self.config = config
        self.id = node_id
        self.mode = mode
        self.links: dict[NodeId, PeerLink] = {}
        self.clients: dict[int, asyncio.StreamWriter] = {}
        self.events: asyncio.Queue = asyncio.Queue()
        self.replica: Optional[Replica] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._worker: Optional[asyncio.Task] = None
        self._conns: set[asyncio.Task] = set()

    async def start(self) -> None:
        host, port = parse_addr(self.config.peers[self.id])
        if await _reachable(host, port):
            raise RuntimeError(f"address {host}:{port} already serves node {self.id}")
        self._server = await asyncio.start_server(self._accept, host, port)
        for peer, addr in sorted(self.config.peers.items()):
            if peer != self.id:
                link = PeerLink(self.id, peer, addr)
                self.links[peer] = link
                link.start()
        rt = _SocketRuntime(self)
        self.replica = Replica(self.id, self.config, rt, mode=self.mode)
        self.replica.start()
        self._worker = asyncio.get_running_loop().create_task(self._consume())
        log.info("node %d listening on %s:%d", self.id, host, port)

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._conns):
            task.cancel()
        for link in self.links.values():
            await link.close()
        for writer in self.clients.values():
            writer.close()
        if self._worker is not None:
            self._worker.cancel()
            try:
                await self._worker
            except asyncio.CancelledError:
                pass

    async def _consume(self) -> None:
        replica = self.replica
        last_role = None
        while True:
            src, item = await self.events.get()
            try:
                if src is _TIMER:
                    replica.on_timer(item)
                else:
                    replica.deliver(src, item)
            except Exception:
                log.exception("node %d: handler failed", self.id)
                raise
            role = replica.engine.role
            if role is not last_role:
                log.info("node %d: %s at ballot %s", self.id, role.value, replica.engine.ballot)
                last_role = role

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._conns.add(task)
        try:
            (sender,) = _PREAMBLE.unpack(await reader.readexactly(2))
            buf = wire.FrameBuffer()
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in buf.feed(data):
                    if sender == CLIENT_PREAMBLE:
                        if type(msg) is not ClientRequest:
                            raise wire.MalformedFrame("clients may only send requests")
                        self.clients[msg.command.client_id] = writer
                        self.events.put_nowait((sender, msg))
                    else:
                        self.events.put_nowait((sender, msg))
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except wire.MalformedFrame as exc:
            log.warning("node %d: dropping connection after bad frame: %s", self.id, exc)
        except asyncio.CancelledError:
            pass
        finally:
            self._conns.discard(task)
            writer.close()


async def _reachable(host: str, port: int) -> bool:
    try:
        _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), 0.2)
    except (OSError, asyncio.TimeoutError):
        return False
    writer.close()
    return True


# -- client side ------------------------------------------------------------------


class _ClientConnections:
    """One shared connection per node for all local clients, replies demuxed by id."""

    def __init__(self, peers: dict[NodeId, str], clients: dict[int, ClosedLoopClient]):
        self.peers = peers
        self.clients = clients
        self.loop = asyncio.get_running_loop()
        self.t0 = self.loop.time()
        self.writers: dict[NodeId, asyncio.StreamWriter] = {}
        self.pending: dict[NodeId, list[bytes]] = {}
        self.tasks: list[asyncio.Task] = []

    def now(self) -> float:
        return self.loop.time() - self.t0

    def send(self, node: NodeId, msg: object) -> None:
        frame = wire.encode(msg)
        writer = self.writers.get(node)
        if writer is not None and not writer.is_closing():
            writer.write(frame)
            return
        if node in self.pending:
            self.pending[node].append(frame)
            return
        self.pending[node] = [frame]
        self.tasks.append(self.loop.create_task(self._open(node)))

    async def _open(self, node: NodeId) -> None:
        host, port = parse_addr(self.peers[node])
        try:
            reader, writer = await asyncio.open_connection(host, port)
        except OSError:
            self.pending.pop(node, None)
            return
        writer.write(_PREAMBLE.pack(CLIENT_PREAMBLE))
        for frame in self.pending.pop(node, []):
            writer.write(frame)
        self.writers[node] = writer
        buf = wire.FrameBuffer()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in buf.feed(data):
                    if type(msg) is ClientReply:
                        client = self.clients.get(msg.client_id)
                        if client is not None:
                            client.on_message(msg, self.now())
        except (ConnectionError, wire.MalformedFrame):
            pass
        finally:
            self.writers.pop(node, None)
            writer.close()

    def io_for(self, client_id: int) -> "_ClientIO":
        return _ClientIO(self, client_id)

    async def close(self) -> None:
        for w in self.writers.values():
            w.close()
        for t in self.tasks:
            t.cancel()
        await asyncio.gather(*self.tasks, return_exceptions=True)


class _ClientIO:
    def __init__(self, conns: _ClientConnections, client_id: int):
        self.conns = conns
        self.client_id = client_id

    def now(self) -> float:
        return self.conns.now()

    def send(self, node: NodeId, msg: object) -> None:
        self.conns.send(node, msg)

    def set_timer(self, delay: float, tag: tuple) -> None:
        client = self.conns.clients[self.client_id]
        self.conns.loop.call_later(delay, lambda: client.on_timer(tag, self.conns.now()))


class SocketEndpoint:
    """Runs closed-loop clients against a live cluster over TCP."""

    def __init__(self, peers: dict[NodeId, str], *, target: NodeId = 0, seed: int = 0,
                 client_timeout: float = 1.0, first_client_id: Optional[int] = None):
        self.peers = peers
        self.target = target
        self.seed = seed
        self.client_timeout = client_timeout
        if first_client_id is None:
            # sessions live in the replicated state, so ids must not repeat across runs
            first_client_id = (time.time_ns() // 1_000_000 & 0xFFFFFFFF) << 20 | 1
        self.next_client_id = first_client_id

    def run(self, spec: WorkloadSpec, *, recorder: Optional[Recorder] = None) -> MetricsReport:
        return asyncio.run(self.run_async(spec, recorder=recorder))

    async def run_async(self, spec: WorkloadSpec, *,
                        recorder: Optional[Recorder] = None) -> MetricsReport:
        rec = recorder or Recorder()
        clients: dict[int, ClosedLoopClient] = {}
        conns = _ClientConnections(self.peers, clients)
        first = self.next_client_id
        self.next_client_id += spec.client_count
        for i in range(spec.client_count):
            cid = first + i
            clients[cid] = ClosedLoopClient(
                cid, spec, conns.io_for(cid), len(self.peers),
                rng=random.Random(f"{self.seed}:client:{cid}"), recorder=rec,
                timeout=self.client_timeout, target=self.target)
        for c in clients.values():
            c.start()
        await asyncio.sleep(spec.duration)
        for c in clients.values():
            c.stop()
        deadline = conns.now() + 2.0
        while any(c.outstanding for c in clients.values()) and conns.now() < deadline:
            await asyncio.sleep(0.01)
        await conns.close()
        return MetricsReport.build(rec, spec.duration)
