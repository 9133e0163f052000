"""Scenario files: a cluster, a workload, a fault script and named variants."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .bench import MetricsReport, SimEndpoint, WorkloadSpec, write_metrics_csv
from .core import ClusterConfig, ConfigError
from .transport.sim import FaultEvent, InvariantViolation, NetworkProfile

log = logging.getLogger(__name__)

_FAULT = {
    "type": "object",
    "required": ["at_ms", "action"],
    "additionalProperties": False,
    "properties": {
        "at_ms": {"type": "number", "minimum": 0},
        "action": {"enum": list(FaultEvent.ACTIONS)},
        "nodes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}

_WORKLOAD = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "clients": {"type": "integer", "minimum": 0},
        "duration_ms": {"type": "number", "minimum": 0},
        "keys": {"type": "integer", "minimum": 1},
        "read_frac": {"type": "number", "minimum": 0, "maximum": 1},
        "payload": {"type": "integer", "minimum": 8, "maximum": 1280},
        "target_rate": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["name", "cluster", "workload"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "cluster": {"type": "object"},
        "network": {"type": "object"},
        "workload": _WORKLOAD,
        "seed": {"type": "integer"},
        "mode": {"enum": ["pig", "paxos"]},
        "drain_ms": {"type": "number", "minimum": 0},
        "client_timeout_ms": {"type": "number", "exclusiveMinimum": 0},
        "faults": {"type": "array", "items": _FAULT},
        "variants": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "mode": {"enum": ["pig", "paxos"]},
                    "cluster": {"type": "object"},
                    "workload": _WORKLOAD,
                    "faults": {"type": "array", "items": _FAULT},
                },
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metrics_csv": {"type": "string"},
                "figure": {"type": "string"},
                "trace": {"type": "string"},
            },
        },
    },
}


@dataclass
class Variant:
    name: str
    mode: str
    cluster: ClusterConfig
    workload: WorkloadSpec
    faults: list[FaultEvent]


@dataclass
class Scenario:
    name: str
    description: str
    seed: int
    variants: list[Variant]
    profile: NetworkProfile
    drain: float = 0.5
    client_timeout: float = 1.0
    outputs: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Scenario":
        try:
            jsonschema.validate(data, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"scenario {where}: {exc.message}") from None
        seed = data.get("seed", 0)
        base_cluster = data["cluster"]
        base_workload = data["workload"]
        base_faults = data.get("faults", [])
        mode = data.get("mode", "pig")
        raw_variants = data.get("variants") or [{"name": "default"}]
        variants = []
        for v in raw_variants:
            cluster = copy.deepcopy(base_cluster)
            cluster.update(v.get("cluster", {}))
            cluster.setdefault("seed", seed)
            workload = dict(base_workload)
            workload.update(v.get("workload", {}))
            try:
                cfg = ClusterConfig.from_json(cluster)
            except ConfigError as exc:
                raise ConfigError(f"variant {v['name']}: {exc}") from None
            variants.append(Variant(
                v["name"], v.get("mode", mode), cfg, WorkloadSpec.from_json(workload),
                [FaultEvent.from_json(f) for f in v.get("faults", base_faults)]))
        return cls(
            name=data["name"], description=data.get("description", ""), seed=seed,
            variants=variants, profile=NetworkProfile.from_json(data.get("network", {})),
            drain=data.get("drain_ms", 500.0) / 1000.0,
            client_timeout=data.get("client_timeout_ms", 1000.0) / 1000.0,
            outputs=dict(data.get("outputs", {})))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        if not path.exists():
            root = resources.files("pigpaxos") / "scenarios"
            for name in (path.name, path.name + ".json"):
                bundled = root / name
                if bundled.is_file():
                    return cls.from_json(json.loads(bundled.read_text()))
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_json(data)


def bundled_scenarios() -> list[str]:
    root = resources.files("pigpaxos") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


@dataclass
class ScenarioResult:
    scenario: Scenario
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    violation: Optional[InvariantViolation] = None
    violating_variant: Optional[str] = None
    trace: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violation is None

    def rows(self) -> list[tuple[str, str, str, str]]:
        out = []
        for name, rep in self.reports.items():
            out.extend(rep.rows(name))
        return out


def run_scenario(sc: Scenario, *, trace: bool = False) -> ScenarioResult:
    result = ScenarioResult(sc)
    for v in sc.variants:
        log.info("scenario %s: running variant %s", sc.name, v.name)
        endpoint = SimEndpoint(v.cluster, mode=v.mode, profile=sc.profile, seed=sc.seed,
                               faults=v.faults, drain=sc.drain,
                               client_timeout=sc.client_timeout, trace=trace)
        try:
            outcome = endpoint.run(v.workload)
        except InvariantViolation as exc:
            result.violation = exc
            result.violating_variant = v.name
            return result
        result.reports[v.name] = outcome.report
        if trace and outcome.simulator.trace:
            result.trace.extend(f"{v.name} {line}" for line in outcome.simulator.trace)
    return result


def write_outputs(result: ScenarioResult, csv_path: Optional[str | Path],
                  figure_path: Optional[str | Path]) -> list[Path]:
    written = []
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(result.rows(), csv_path)
        written.append(Path(csv_path))
    if figure_path and result.reports:
        from .plotting import plot_bars, plot_throughput_windows

        figure_path = Path(figure_path)
        written.append(plot_throughput_windows(
            {k: r.windows for k, r in result.reports.items()}, figure_path,
            title=f"{result.scenario.name}: throughput per 1 s window"))
        bars = figure_path.with_name(figure_path.stem + "_throughput" + figure_path.suffix)
        written.append(plot_bars({k: r.throughput for k, r in result.reports.items()}, bars,
                                 "ops/s", f"{result.scenario.name}: mean throughput"))
    return written
