import math

import pytest

from pigpaxos.bench import (ClosedLoopClient, Recorder, SimEndpoint, WorkloadSpec,
                            percentile, read_metrics_csv, run_clients, sweep, sweep_csv_text,
                            write_metrics_csv)
from pigpaxos.core import Op
from pigpaxos.engine import ClientReply, ClientRequest, ReplyStatus

from conftest import make_config


def test_workload_validation():
    with pytest.raises(ValueError):
        WorkloadSpec(payload_bytes=4)
    with pytest.raises(ValueError):
        WorkloadSpec(payload_bytes=2000)
    with pytest.raises(ValueError):
        WorkloadSpec(key_distribution="zipf")


def test_workload_json_keys():
    spec = WorkloadSpec.from_json({"clients": 3, "duration_ms": 1500, "keys": 10,
                                   "read_frac": 0.25, "payload": 64})
    assert (spec.client_count, spec.duration, spec.key_space, spec.read_fraction,
            spec.payload_bytes) == (3, 1.5, 10, 0.25, 64)


def test_commands_uniform_keys_and_mix():
    import random
    spec = WorkloadSpec(key_space=10, read_fraction=0.3, payload_bytes=32)
    rng = random.Random(1)
    cmds = [spec.make_command(rng, 1, i) for i in range(1, 5001)]
    reads = sum(c.op == Op.GET for c in cmds)
    assert reads / len(cmds) == pytest.approx(0.3, abs=0.03)
    assert len({c.key for c in cmds}) == 10
    assert all(len(c.value) == 32 for c in cmds if c.op == Op.PUT)


def test_percentile_interpolates():
    assert percentile([1.0, 2.0, 3.0, 4.0], 50) == 2.5
    assert percentile([5.0], 99) == 5.0
    assert math.isnan(percentile([], 50))


class ScriptedIO:
    def __init__(self):
        self.clock = 0.0
        self.sent = []
        self.timers = []

    def now(self):
        return self.clock

    def send(self, node, msg):
        self.sent.append((node, msg))

    def set_timer(self, delay, tag):
        self.timers.append(tag)


def client(io_, timeout=1.0):
    import random
    return ClosedLoopClient(1, WorkloadSpec(), io_, 5, rng=random.Random(0),
                            recorder=Recorder(), timeout=timeout)


def test_client_redirects_on_not_leader():
    io_ = ScriptedIO()
    c = client(io_)
    c.start()
    assert io_.sent[-1][0] == 0
    c.on_message(ClientReply(1, 1, ReplyStatus.NOT_LEADER, leader_hint=3), 0.001)
    assert io_.sent[-1][0] == 3 and c.rec.redirects == 1
    assert io_.sent[-1][1] == io_.sent[0][1]


def test_client_timeout_resends_same_request():
    io_ = ScriptedIO()
    c = client(io_)
    c.start()
    first = io_.sent[-1][1]
    c.on_timer(("req", 1, 1), 1.0)
    node, again = io_.sent[-1]
    assert again == first and isinstance(again, ClientRequest) and node == 1
    assert c.rec.client_retries == 1
    c.on_message(ClientReply(1, 1), 1.2)
    assert c.seq == 2 and c.rec.completions[0][1] == pytest.approx(1.2)


def test_client_never_has_two_outstanding():
    io_ = ScriptedIO()
    c = client(io_)
    c.start()
    with pytest.raises(AssertionError):
        c._issue()


def test_closed_loop_in_simulation():
    spec = WorkloadSpec(client_count=5, duration=0.3)
    out = SimEndpoint(make_config(5, 2), seed=1, record_history=True).run(spec)
    by_client = {}
    for op in out.recorder.history:
        by_client.setdefault(op.client, []).append(op)
    for ops in by_client.values():
        # each request is issued only after the previous one was answered
        for prev, nxt in zip(ops, ops[1:]):
            assert prev.respond is not None and prev.respond <= nxt.invoke
    answered = sum(op.respond is not None and op.respond < spec.duration
                   for op in out.recorder.history)
    assert out.report.ops == answered > 0


def test_zero_duration_empty_report():
    rep = run_clients(WorkloadSpec(client_count=3, duration=0.0),
                      SimEndpoint(make_config(3), seed=1))
    assert rep.ops == 0 and rep.windows == [] and rep.throughput == 0.0


def test_windows_sum_to_ops():
    rep = run_clients(WorkloadSpec(client_count=4, duration=2.5),
                      SimEndpoint(make_config(5, 2), seed=1))
    assert len(rep.windows) == 3 and sum(rep.windows) == rep.ops > 0


def test_metrics_csv_round_trip(tmp_path):
    rep = run_clients(WorkloadSpec(client_count=2, duration=0.2),
                      SimEndpoint(make_config(3), seed=1))
    path = tmp_path / "m.csv"
    write_metrics_csv(rep.rows("x"), path)
    rows = read_metrics_csv(path)
    assert rows[0].keys() == {"variant", "metric", "scope", "value"}
    ops = [r for r in rows if r["metric"] == "ops"]
    assert int(ops[0]["value"]) == rep.ops


def test_empty_grid_writes_header_only():
    rows = sweep(WorkloadSpec(duration=0.1), SimEndpoint(make_config(3), seed=1), [])
    assert sweep_csv_text(rows) == "clients,throughput,median,p25,p75\n"


def test_sweep_deterministic_and_saturating():
    endpoint = SimEndpoint(make_config(9, 2), seed=3)
    spec = WorkloadSpec(duration=0.3)
    grid = [1, 10, 20, 40, 80, 120]
    rows = sweep(spec, endpoint, grid)
    assert [r.clients for r in rows] == grid
    assert sweep_csv_text(rows) == sweep_csv_text(sweep(spec, endpoint, grid))
    tput = [r.throughput for r in rows]
    peak = max(tput)
    # rises until saturation, then stays on a plateau near the peak
    rising = tput[:tput.index(peak) + 1]
    assert all(b >= a for a, b in zip(rising, rising[1:]))
    assert all(t >= 0.9 * peak for t in tput[tput.index(peak):])


def test_payload_sweep_stays_near_best():
    for mode, r in (("pig", 3), ("paxos", 24)):
        best = {}
        for payload in (8, 128, 512, 1280):
            spec = WorkloadSpec(client_count=80, duration=0.2, payload_bytes=payload)
            rep = run_clients(spec, SimEndpoint(make_config(25, r), mode=mode, seed=2))
            best[payload] = rep.throughput
        top = max(best.values())
        assert all(v / top >= 0.9 for v in best.values()), (mode, best)


def test_target_rate_caps_throughput():
    spec = WorkloadSpec(client_count=4, duration=1.0, target_rate=200)
    rep = run_clients(spec, SimEndpoint(make_config(3), seed=1))
    assert rep.throughput <= 210
