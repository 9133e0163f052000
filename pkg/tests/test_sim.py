import io
import json

import pytest

from pigpaxos.bench import SimEndpoint, WorkloadSpec, write_metrics_csv
from pigpaxos.core import ClusterConfig
from pigpaxos.engine import P2b
from pigpaxos.transport.sim import (FaultEvent, InvariantViolation, NetworkProfile, Simulator,
                                    category, load_fault_script, sim_run)

from conftest import make_config


def metrics_bytes(outcome):
    buf = io.StringIO()
    write_metrics_csv(outcome.report.rows("run"), buf)
    return buf.getvalue()


def test_same_seed_identical_trace_and_metrics():
    cfg = make_config(5, 2, rng_seed=4)
    spec = WorkloadSpec(client_count=4, duration=0.3)
    a = sim_run(cfg, workload=spec, seed=11)
    b = sim_run(cfg, workload=spec, seed=11)
    assert a.simulator.trace == b.simulator.trace
    assert metrics_bytes(a) == metrics_bytes(b)
    c = sim_run(cfg, workload=spec, seed=12)
    assert c.simulator.trace != a.simulator.trace


def test_duration_override():
    out = sim_run(make_config(3), workload=WorkloadSpec(duration=5.0), duration=0.1)
    assert out.report.duration == pytest.approx(0.1)


def test_conservation_with_losses_and_faults():
    profile = NetworkProfile(drop_probability=0.05, duplicate_probability=0.05)
    faults = [FaultEvent(0.1, "crash", (2,)), FaultEvent(0.2, "partition", (3,)),
              FaultEvent(0.3, "heal", ()), FaultEvent(0.35, "recover", (2,))]
    out = SimEndpoint(make_config(5, 2), profile=profile, seed=3, faults=faults).run(
        WorkloadSpec(client_count=3, duration=0.5))
    sim = out.simulator
    assert sim.conservation_ok()
    assert sim.sent_total == sim.received_total + sim.dropped + sim.in_flight
    assert out.report.ops > 0


def test_crashing_a_majority_stops_commits():
    crash_at = 0.2
    cfg = make_config(5, 1)
    snapshot = {}
    endpoint = SimEndpoint(cfg, seed=5, faults=[FaultEvent(crash_at, "crash", (2, 3, 4))])

    def setup(sim):
        # votes cast before the crash may still be flushed by a relay up to T_r later
        sim.call_at(crash_at + cfg.relay_timeout + 0.01,
                    lambda: snapshot.setdefault("chosen", len(sim.checker.chosen)))

    endpoint.setup = setup
    out = endpoint.run(WorkloadSpec(client_count=4, duration=1.5))
    assert snapshot["chosen"] > 0
    assert len(out.simulator.checker.chosen) == snapshot["chosen"]


def test_minority_crash_keeps_committing():
    cfg = make_config(5, 2)
    out = SimEndpoint(cfg, seed=2, faults=[FaultEvent(0.1, "crash", (3, 4))]).run(
        WorkloadSpec(client_count=2, duration=1.0))
    late = [t for t, _ in out.recorder.completions if t > 0.6]
    assert late


def test_duplicated_votes_change_no_outcome():
    profile = NetworkProfile(duplicate_probability=1.0)
    for mode in ("pig", "paxos"):
        out = SimEndpoint(make_config(5, 2), mode=mode, profile=profile, seed=8,
                          record_history=True).run(WorkloadSpec(client_count=3, duration=0.3))
        sim = out.simulator
        assert out.report.ops > 0
        for slot, cmd in sim.checker.chosen.items():
            entry = sim.replica(0).engine.entry(slot)
            assert entry.command == cmd
        logs = [sim.replica(i).engine.executed_log() for i in range(5)]
        shortest = min(len(lg) for lg in logs)
        assert all(lg[:shortest] == logs[0][:shortest] for lg in logs)


def test_duplicate_p2b_counts_once_in_paxos_mode():
    sim = Simulator(make_config(5, 4), mode="paxos", seed=1)
    eng = sim.replica(0).engine
    from pigpaxos.core import Command, Op
    eng.on_client_request(Command(Op.PUT, b"k", b"v", 1, 1), 0.0)
    eng.take()
    for _ in range(2):
        sim.replica(0).deliver(1, P2b(eng.ballot, 0, 1))
    assert eng.entry(0).voters == {0, 1} and not eng.is_committed(0)


def test_cold_start_elects_one_leader():
    cfg = ClusterConfig(n=5, relay_groups=2, rng_seed=21)
    out = SimEndpoint(cfg, seed=21).run(WorkloadSpec(client_count=2, duration=2.0))
    sim = out.simulator
    leaders = [i for i in range(5) if sim.replica(i).engine.is_leader]
    assert len(leaders) == 1
    assert out.report.ops > 0
    assert sum(t > 1.5 for t, _ in out.recorder.completions) > 0


def test_leader_crash_fails_over():
    cfg = make_config(5, 2)
    out = SimEndpoint(cfg, seed=4, faults=[FaultEvent(0.3, "crash", (0,))]).run(
        WorkloadSpec(client_count=2, duration=2.5))
    sim = out.simulator
    assert sim.leader not in (None, 0)
    assert any(t > 2.0 for t, _ in out.recorder.completions)


def test_recovered_node_catches_up():
    cfg = make_config(5, 2)
    out = SimEndpoint(cfg, seed=6, faults=[FaultEvent(0.1, "crash", (3,)),
                                           FaultEvent(0.4, "recover", (3,))],
                      drain=0.5).run(WorkloadSpec(client_count=2, duration=0.8))
    sim = out.simulator
    lead = sim.replica(0).engine
    assert sim.replica(3).engine.commit_index == lead.commit_index
    assert sim.replica(3).engine.executed_log() == lead.executed_log()


def test_invariant_violation_is_reported():
    sim = Simulator(make_config(3), seed=0)
    from pigpaxos.core import Ballot, Command, Op
    checker = sim.checker
    checker.on_commit(0, 0, Command(Op.PUT, b"a"), Ballot(1, 0), None)
    with pytest.raises(InvariantViolation) as err:
        checker.on_commit(1, 0, Command(Op.PUT, b"b"), Ballot(1, 0), None)
    assert err.value.name == "single-value-per-slot"
    with pytest.raises(InvariantViolation, match="vote-integrity"):
        checker.on_commit(0, 1, Command(Op.PUT, b"a"), Ballot(1, 0), frozenset({0, 1}))


def test_codec_roundtrip_profile_runs_identically():
    spec = WorkloadSpec(client_count=2, duration=0.2)
    plain = sim_run(make_config(5, 2), workload=spec, seed=3)
    coded = sim_run(make_config(5, 2), NetworkProfile(codec_roundtrip=True), spec, seed=3)
    assert plain.simulator.trace == coded.simulator.trace


def test_cpu_cost_makes_leader_the_bottleneck():
    cheap = NetworkProfile(message_cost_us=0.0, cost_per_100_bytes_us=0.0)
    spec = WorkloadSpec(client_count=30, duration=0.2)
    fast = sim_run(make_config(9, 8), cheap, spec, seed=1, mode="paxos").report.throughput
    slow = sim_run(make_config(9, 8), NetworkProfile(message_cost_us=50.0), spec, seed=1,
                   mode="paxos").report.throughput
    assert slow < fast


def test_fault_script_json(tmp_path):
    script = [{"at_ms": 100, "action": "crash", "nodes": [1]},
              {"at_ms": 250.5, "action": "heal"}]
    path = tmp_path / "faults.json"
    path.write_text(json.dumps(script))
    events = load_fault_script(path)
    assert events[0] == FaultEvent(0.1, "crash", (1,))
    assert events[1].at == pytest.approx(0.2505) and events[1].nodes == ()
    assert [e.to_json() for e in events][0] == script[0]
    with pytest.raises(ValueError):
        FaultEvent.from_json({"at_ms": 1, "action": "explode"})


def test_partition_drops_silently():
    cfg = make_config(5, 2)
    out = SimEndpoint(cfg, seed=9, faults=[FaultEvent(0.05, "partition", (1, 2))]).run(
        WorkloadSpec(client_count=1, duration=0.4))
    sim = out.simulator
    assert sim.dropped > 0
    assert sim.received[1]["phase2"] < sim.received[3]["phase2"]


def test_message_categories():
    from pigpaxos.core import Ballot, NOOP
    from pigpaxos.engine import P3
    assert category(P2b(Ballot(1, 0), 0, 1)) == "phase2"
    assert category(P3(-1, NOOP)) == "heartbeat"
    assert category(P3(4, NOOP)) == "commit"
