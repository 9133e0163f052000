"""Closed-loop workload generation and metrics collection.

Clients are sans-IO state machines driven either by the simulator or by an
asyncio socket loop. Each client keeps at most one request outstanding,
follows NOT_LEADER hints, and on timeout resends the same request id so the
replicated session cache keeps the operation at-most-once.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import random
import statistics
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Callable, Optional, Protocol, Sequence

from .core import ClusterConfig, Command, NodeId, Op
from .engine import ClientReply, ClientRequest, ReplyStatus

log = logging.getLogger(__name__)

MIN_PAYLOAD = 8
MAX_PAYLOAD = 1280


@dataclass(frozen=True)
class WorkloadSpec:
    key_space: int = 1000
    read_fraction: float = 0.5
    payload_bytes: int = 8
    client_count: int = 1
    duration: float = 1.0
    target_rate: Optional[float] = None
    key_distribution: str = "uniform"

    def __post_init__(self) -> None:
        if self.key_distribution != "uniform":
            raise ValueError("only the uniform key distribution is supported")
        if not MIN_PAYLOAD <= self.payload_bytes <= MAX_PAYLOAD:
            raise ValueError(
                f"payload_bytes must be within {MIN_PAYLOAD}..{MAX_PAYLOAD}, "
                f"got {self.payload_bytes}")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read_fraction must be within [0, 1]")
        if self.key_space < 1 or self.client_count < 0 or self.duration < 0:
            raise ValueError("key_space, client_count and duration must be non-negative")
        if self.target_rate is not None and self.target_rate <= 0:
            raise ValueError("target_rate must be positive")

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "WorkloadSpec":
        return cls(
            key_space=data.get("keys", 1000),
            read_fraction=data.get("read_frac", 0.5),
            payload_bytes=data.get("payload", 8),
            client_count=data.get("clients", 1),
            duration=data.get("duration_ms", 1000.0) / 1000.0,
            target_rate=data.get("target_rate"),
        )

    def key(self, index: int) -> bytes:
        return b"k%06d" % index

    def make_command(self, rng: random.Random, client_id: int, seq: int) -> Command:
        key = self.key(rng.randrange(self.key_space))
        if rng.random() < self.read_fraction:
            return Command(Op.GET, key, b"", client_id, seq)
        # unique per write, so histories can tell every written value apart
        tag = struct.pack(">II", client_id & 0xFFFFFFFF, seq & 0xFFFFFFFF)
        value = tag.ljust(self.payload_bytes, b".")
        return Command(Op.PUT, key, value, client_id, seq)


@dataclass
class HistoryOp:
    client: int
    op: Op
    key: bytes
    value: bytes
    invoke: float
    respond: Optional[float] = None
    found: bool = False
    result: bytes = b""


class Recorder:
    """Single collector fed by every client."""

    def __init__(self, keep_history: bool = False):
        self.completions: list[tuple[float, float]] = []
        self.history: Optional[list[HistoryOp]] = [] if keep_history else None
        self.redirects = 0
        self.client_retries = 0

    def latencies(self, start: float = 0.0, end: float = math.inf) -> list[float]:
        return [lat for t, lat in self.completions if start <= t < end]


class ClientIO(Protocol):
    def now(self) -> float: ...

    def send(self, node: NodeId, msg: object) -> None: ...

    def set_timer(self, delay: float, tag: tuple) -> None: ...


class ClosedLoopClient:
    REDIRECT_BACKOFF = 0.010

    def __init__(self, client_id: int, spec: WorkloadSpec, io: ClientIO, n: int, *,
                 rng: random.Random, recorder: Recorder, timeout: float = 1.0,
                 target: NodeId = 0):
        if client_id <= 0:
            raise ValueError("client ids start at 1; 0 means no session")
        self.id = client_id
        self.spec = spec
        self.io = io
        self.n = n
        self.rng = rng
        self.rec = recorder
        self.timeout = timeout
        self.target = target
        self.seq = 0
        self.attempt = 0
        self.cmd: Optional[Command] = None
        self.issued_at = 0.0
        self.hist: Optional[HistoryOp] = None
        self.stopped = False
        self.completed = 0
        self._streak = 0
        self._min_gap = spec.client_count / spec.target_rate if spec.target_rate else 0.0

    def start(self) -> None:
        self._issue()

    def stop(self) -> None:
        self.stopped = True

    @property
    def outstanding(self) -> bool:
        return self.cmd is not None

    def _issue(self) -> None:
        if self.cmd is not None:
            raise AssertionError(f"client {self.id} would have two outstanding requests")
        now = self.io.now()
        self.seq += 1
        self.cmd = self.spec.make_command(self.rng, self.id, self.seq)
        self.issued_at = now
        self.attempt = 0
        if self.rec.history is not None:
            c = self.cmd
            self.hist = HistoryOp(self.id, c.op, c.key, c.value, now)
            self.rec.history.append(self.hist)
        self._transmit()

    def _transmit(self) -> None:
        self.attempt += 1
        self.io.send(self.target, ClientRequest(self.cmd))
        self.io.set_timer(self.timeout, ("req", self.seq, self.attempt))

    def on_message(self, msg: ClientReply, now: float) -> None:
        if self.cmd is None or msg.request_seq != self.seq or msg.client_id != self.id:
            return
        if msg.status == ReplyStatus.NOT_LEADER:
            self.rec.redirects += 1
            self._streak += 1
            hint = msg.leader_hint
            if 0 <= hint < self.n and hint != self.target:
                self.target = hint
            else:
                self.target = (self.target + 1) % self.n
            if self._streak > 3:
                self.io.set_timer(self.REDIRECT_BACKOFF, ("resend", self.seq, self.attempt))
            else:
                self._transmit()
            return
        self._streak = 0
        self.rec.completions.append((now, now - self.issued_at))
        if self.hist is not None:
            self.hist.respond = now
            self.hist.found = msg.found
            self.hist.result = msg.value
            self.hist = None
        self.cmd = None
        self.completed += 1
        if self.stopped:
            return
        wait = self.issued_at + self._min_gap - now
        if wait > 0:
            self.io.set_timer(wait, ("next", self.seq))
        else:
            self._issue()

    def on_timer(self, tag: tuple, now: float) -> None:
        kind = tag[0]
        if kind == "next":
            if self.cmd is None and not self.stopped and tag[1] == self.seq:
                self._issue()
            return
        if self.cmd is None or tag[1] != self.seq or tag[2] != self.attempt:
            return
        if kind == "req":
            self.rec.client_retries += 1
            self.target = (self.target + 1) % self.n
        self._transmit()


# -- reports -----------------------------------------------------------------


def percentile(sorted_values: Sequence[float], q: float) -> float:
    """Linear-interpolated percentile of already sorted data, q in [0, 100]."""
    if not sorted_values:
        return math.nan
    if len(sorted_values) == 1:
        return sorted_values[0]
    pos = (len(sorted_values) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * (pos - lo)


@dataclass
class NodeCounts:
    sent: int
    received: int
    handled: int
    handled_replication: int


@dataclass
class MetricsReport:
    duration: float
    ops: int
    windows: list[int]
    latency: dict[str, float]
    per_node: dict[int, NodeCounts] = field(default_factory=dict)
    retries: int = 0
    relay_timeouts: int = 0
    client_retries: int = 0
    redirects: int = 0
    commands: int = 0
    meta: dict[str, str] = field(default_factory=dict)
    completions: list[tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def throughput(self) -> float:
        return self.ops / self.duration if self.duration > 0 else 0.0

    def throughput_between(self, start: float, end: float) -> float:
        if end <= start:
            return 0.0
        return sum(1 for t, _ in self.completions if start <= t < end) / (end - start)

    def latency_between(self, start: float, end: float, q: float = 50.0) -> float:
        return percentile(sorted(lat for t, lat in self.completions if start <= t < end), q)

    @classmethod
    def build(cls, recorder: Recorder, duration: float, **extra: Any) -> "MetricsReport":
        done = [(t, lat) for t, lat in recorder.completions if t < duration]
        nwin = math.ceil(duration) if duration > 0 else 0
        windows = [0] * nwin
        for t, _ in done:
            windows[min(int(t), nwin - 1)] += 1
        lats = sorted(lat for _, lat in done)
        latency = {name: percentile(lats, q)
                   for name, q in (("p25", 25), ("p50", 50), ("p75", 75), ("p99", 99))}
        return cls(duration, len(done), windows, latency, redirects=recorder.redirects,
                   client_retries=recorder.client_retries,
                   commands=len(recorder.completions), completions=done, **extra)

    def rows(self, variant: str = "default") -> list[tuple[str, str, str, str]]:
        """Long-format rows: (variant, metric, scope, value)."""
        out = [(variant, key, "config", value) for key, value in self.meta.items()]
        out += [
            (variant, "ops", "cluster", str(self.ops)),
            (variant, "commands", "cluster", str(self.commands)),
            (variant, "throughput_ops_s", "cluster", _fmt(self.throughput)),
        ]
        for i, w in enumerate(self.windows):
            out.append((variant, "window_ops", f"t={i}s", str(w)))
        for name in ("p25", "p50", "p75", "p99"):
            out.append((variant, f"latency_{name}_ms", "cluster", _fmt(self.latency[name] * 1e3)))
        out += [
            (variant, "leader_retries", "cluster", str(self.retries)),
            (variant, "relay_timeouts", "cluster", str(self.relay_timeouts)),
            (variant, "client_retries", "cluster", str(self.client_retries)),
            (variant, "redirects", "cluster", str(self.redirects)),
        ]
        for node in sorted(self.per_node):
            c = self.per_node[node]
            out += [
                (variant, "sent", f"node={node}", str(c.sent)),
                (variant, "received", f"node={node}", str(c.received)),
                (variant, "handled", f"node={node}", str(c.handled)),
                (variant, "handled_replication", f"node={node}", str(c.handled_replication)),
            ]
        return out


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


METRICS_HEADER = ("variant", "metric", "scope", "value")


def write_metrics_csv(rows: Sequence[tuple], out: str | Path | IO[str]) -> None:
    def emit(fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)

    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            emit(fh)
    else:
        emit(out)


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- endpoints -----------------------------------------------------------------


@dataclass
class SimOutcome:
    report: MetricsReport
    simulator: Any
    recorder: Recorder
    clients: list[ClosedLoopClient]


@dataclass
class SimEndpoint:
    """Runs a workload against a fresh simulated cluster."""

    config: ClusterConfig
    mode: str = "pig"
    profile: Any = None
    seed: Optional[int] = None
    faults: Sequence[Any] = ()
    record_history: bool = False
    drain: float = 0.0
    client_timeout: float = 1.0
    check_invariants: bool = True
    trace: bool = False
    setup: Optional[Callable[[Any], None]] = None

    def run(self, spec: WorkloadSpec) -> SimOutcome:
        from .transport.sim import REPLICATION, Simulator

        seed = self.config.rng_seed if self.seed is None else self.seed
        sim = Simulator(self.config, mode=self.mode, profile=self.profile, seed=seed,
                        check_invariants=self.check_invariants, trace=self.trace)
        if self.setup is not None:
            self.setup(sim)
        sim.schedule_faults(self.faults)
        rec = Recorder(keep_history=self.record_history)
        target = self.config.bootstrap_leader or 0
        clients = []
        for cid in range(1, spec.client_count + 1):
            client = ClosedLoopClient(cid, spec, sim.client_io(cid), self.config.n,
                                      rng=random.Random(f"{seed}:client:{cid}"), recorder=rec,
                                      timeout=self.client_timeout, target=target)
            sim.add_client(cid, client)
            clients.append(client)
        # stagger starts by a few microseconds so clients do not move in lockstep
        for i, client in enumerate(clients):
            sim.call_at(i * 1e-6, client.start)

        def stop_all() -> None:
            for c in clients:
                c.stop()

        if spec.duration > 0:
            sim.call_at(spec.duration, stop_all)
            sim.run(spec.duration + self.drain)
        totals = sim.pig_totals()
        per_node = {
            i: NodeCounts(sim.sent_count(i), sim.received_count(i), sim.handled(i),
                          sim.handled(i, REPLICATION))
            for i in range(self.config.n)
        }
        meta = {"n": str(self.config.n), "relay_groups": str(self.config.r),
                "mode": self.mode, "leader": str(target), "seed": str(seed)}
        report = MetricsReport.build(rec, spec.duration, per_node=per_node,
                                     retries=totals["retries"],
                                     relay_timeouts=totals["relay_timeouts"], meta=meta)
        return SimOutcome(report, sim, rec, clients)


def run_clients(spec: WorkloadSpec, endpoint: Any) -> MetricsReport:
    """Drive ``spec`` against a simulator or socket endpoint and report metrics."""
    result = endpoint.run(spec)
    return result.report if isinstance(result, SimOutcome) else result


SWEEP_HEADER = ("clients", "throughput", "median", "p25", "p75")


@dataclass(frozen=True)
class SweepRow:
    clients: int
    throughput: float
    median_ms: float
    p25_ms: float
    p75_ms: float

    def cells(self) -> tuple[str, ...]:
        return (str(self.clients), _fmt(self.throughput), _fmt(self.median_ms),
                _fmt(self.p25_ms), _fmt(self.p75_ms))


def sweep(spec: WorkloadSpec, endpoint: Any, client_counts: Sequence[int]) -> list[SweepRow]:
    rows = []
    for count in client_counts:
        spec_i = WorkloadSpec(spec.key_space, spec.read_fraction, spec.payload_bytes, count,
                              spec.duration, spec.target_rate)
        rep = run_clients(spec_i, endpoint)
        rows.append(SweepRow(count, rep.throughput, rep.latency["p50"] * 1e3,
                             rep.latency["p25"] * 1e3, rep.latency["p75"] * 1e3))
        log.info("sweep clients=%d throughput=%.1f median=%.3fms", count, rep.throughput,
                 rep.latency["p50"] * 1e3)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], out: str | Path | IO[str]) -> None:
    def emit(fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.cells())

    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            emit(fh)
    else:
        emit(out)


def sweep_csv_text(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    write_sweep_csv(rows, buf)
    return buf.getvalue()


def median(values: Sequence[float]) -> float:
    return statistics.median(values) if values else math.nan
