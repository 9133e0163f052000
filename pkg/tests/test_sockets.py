import asyncio
import json
import os
import socket
import subprocess
import sys
import time

import pytest

from pigpaxos.bench import Recorder, WorkloadSpec
from pigpaxos.core import ClusterConfig, Op
from pigpaxos.transport.sockets import NodeServer, SocketEndpoint


def free_ports(k):
    socks = []
    for _ in range(k):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def cluster_config(n, **kw):
    peers = {i: f"127.0.0.1:{p}" for i, p in enumerate(free_ports(n))}
    return ClusterConfig(n=n, relay_groups=1, peers=peers, rng_seed=1, **kw)


async def start_cluster(cfg):
    nodes = [NodeServer(cfg, i) for i in range(cfg.n)]
    for node in nodes:
        await node.start()
    return nodes


async def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        await asyncio.sleep(0.02)
    return predicate()


def leader_of(nodes):
    alive = [n for n in nodes if n.replica is not None and n.replica.engine.is_leader]
    return max(alive, key=lambda n: n.replica.engine.ballot) if alive else None


PUTS = WorkloadSpec(client_count=2, duration=1.0, read_fraction=0.0)


def test_hundred_puts_replicate_everywhere():
    async def scenario():
        cfg = cluster_config(3)
        nodes = await start_cluster(cfg)
        try:
            rec = Recorder(keep_history=True)
            rep = await SocketEndpoint(cfg.peers).run_async(PUTS, recorder=rec)
            assert rep.ops >= 100
            acked = {(h.client, h.value) for h in rec.history if h.respond is not None}
            engines = [n.replica.engine for n in nodes]
            target = max(e.commit_index for e in engines)
            assert await wait_for(lambda: all(e.commit_index == target for e in engines))
            logs = [e.executed_log() for e in engines]
            assert logs[0] == logs[1] == logs[2]
            applied = {(c.client_id, c.value) for c in logs[0] if c.op == Op.PUT}
            assert acked <= applied
        finally:
            for n in nodes:
                await n.stop()

    asyncio.run(scenario())


def test_follower_kill_commits_continue():
    async def scenario():
        cfg = cluster_config(3, bootstrap_leader=0)
        nodes = await start_cluster(cfg)
        try:
            ep = SocketEndpoint(cfg.peers)
            assert (await ep.run_async(WorkloadSpec(client_count=2, duration=0.5))).ops > 0
            await nodes[2].stop()
            before = nodes[0].replica.engine.commit_index
            rep = await ep.run_async(WorkloadSpec(client_count=2, duration=1.5))
            assert rep.ops > 0
            assert nodes[0].replica.engine.commit_index > before
            assert nodes[0].replica.engine.is_leader
        finally:
            for n in nodes[:2]:
                await n.stop()

    asyncio.run(scenario())


def test_leader_kill_elects_new_leader():
    async def scenario():
        cfg = cluster_config(3, bootstrap_leader=0)
        nodes = await start_cluster(cfg)
        try:
            ep = SocketEndpoint(cfg.peers)
            assert (await ep.run_async(WorkloadSpec(client_count=2, duration=0.5))).ops > 0
            await nodes[0].stop()
            rec = Recorder()
            rep = await ep.run_async(WorkloadSpec(client_count=2, duration=3.0), recorder=rec)
            new = leader_of(nodes[1:])
            assert new is not None and new.id != 0
            assert rep.ops > 0 and rec.client_retries + rec.redirects > 0
        finally:
            for n in nodes[1:]:
                await n.stop()

    asyncio.run(scenario())


def test_messages_to_dead_peer_are_bounded():
    async def scenario():
        cfg = cluster_config(3)
        node = NodeServer(cfg, 0)
        await node.start()
        try:
            link = node.links[1]
            link.limit = 10
            for _ in range(50):
                link.send(b"\x00\x00\x00\x01\x01")
            assert len(link.queue) == 10 and link.dropped == 40
            assert not link.connected
        finally:
            await node.stop()

    asyncio.run(scenario())


# -- real processes through the CLI ------------------------------------------------


def spawn(config_path, node_id, env):
    return subprocess.Popen(
        [sys.executable, "-m", "pigpaxos.cli", "node", "--config", str(config_path),
         "--id", str(node_id)], env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT)


@pytest.fixture
def process_cluster(tmp_path):
    procs = []
    cfg = cluster_config(5)
    path = tmp_path / "cluster.json"
    path.write_text(json.dumps(cfg.to_json()))
    env = dict(os.environ, PIGPAXOS_LOG="INFO")

    def launch():
        for i in range(cfg.n):
            procs.append(spawn(path, i, env))
        return cfg, path, env

    yield launch, procs
    for p in procs:
        p.kill()
        p.wait()


def test_five_processes_elect_and_serve(process_cluster):
    launch, procs = process_cluster
    cfg, path, env = launch()
    time.sleep(1.0)
    rec = Recorder()
    rep = SocketEndpoint(cfg.peers).run(
        WorkloadSpec(client_count=3, duration=2.0, read_fraction=0.0), recorder=rec)
    assert rep.ops > 0
    assert all(p.poll() is None for p in procs)

    dup = spawn(path, 2, env)
    out, _ = dup.communicate(timeout=20)
    assert dup.returncode != 0
    assert b"already serves node 2" in out
