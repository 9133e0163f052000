"""Command-line entry point: ``pigpaxos {node,sim,bench,model}``.

Log verbosity comes from the PIGPAXOS_LOG environment variable
(DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from .core import ClusterConfig, ConfigError, partition_followers

log = logging.getLogger("pigpaxos")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

SWEEP_COLUMNS_HELP = """\
CSV columns (one row per client count):
  clients     closed-loop clients in the run
  throughput  replied operations per second over the run
  median      median client-observed latency in ms
  p25         25th percentile latency in ms
  p75         75th percentile latency in ms
"""

METRICS_COLUMNS_HELP = """\
CSV columns (long format, one row per measurement):
  variant  scenario variant name
  metric   e.g. throughput_ops_s, window_ops, latency_p50_ms, handled_replication
  scope    cluster, config, t=<second>s or node=<id>
  value    measured value
"""


def _setup_logging() -> None:
    level = os.environ.get("PIGPAXOS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- node -------------------------------------------------------------------------


def cmd_node(args: argparse.Namespace) -> int:
    from .transport.sockets import NodeServer

    try:
        config = ClusterConfig.load(args.config)
        server = NodeServer(config, args.id, mode=args.mode)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        return EXIT_OK
    except (OSError, RuntimeError) as exc:
        print(f"error: node {args.id} failed to start: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# -- sim --------------------------------------------------------------------------


def cmd_sim(args: argparse.Namespace) -> int:
    from .scenario import Scenario, bundled_scenarios, run_scenario, write_outputs

    if args.list:
        for name in bundled_scenarios():
            print(name)
        return EXIT_OK
    if not args.scenario:
        print("error: a scenario file or bundled scenario name is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        sc = Scenario.load(args.scenario)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        sc.seed = args.seed
    out_dir = Path(args.out_dir)
    csv_path = args.out or (out_dir / sc.outputs["metrics_csv"]
                            if "metrics_csv" in sc.outputs else out_dir / f"{sc.name}.csv")
    fig_path = None
    if args.figures is not None:
        fig_name = sc.outputs.get("figure", f"{sc.name}.png")
        fig_path = Path(args.figures) / fig_name
    result = run_scenario(sc, trace=args.trace is not None)
    write_outputs(result, csv_path, fig_path)
    if args.trace is not None:
        Path(args.trace).write_text("\n".join(result.trace) + "\n")
    if not result.ok:
        v = result.violation
        print(f"{sc.name}/{result.violating_variant}: invariant {v.name} violated at "
              f"t={v.time:.6f}s: {v.detail}", file=sys.stderr)
        return EXIT_FAILED
    for name, rep in result.reports.items():
        print(f"{sc.name}/{name}: {rep.ops} ops, {rep.throughput:.1f} ops/s, "
              f"median {rep.latency['p50'] * 1e3:.3f} ms, leader retries {rep.retries}")
    print(f"metrics written to {csv_path}")
    return EXIT_OK


# -- bench ------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import SimEndpoint, WorkloadSpec, sweep, write_sweep_csv
    from .transport.sim import InvariantViolation

    try:
        spec = WorkloadSpec(key_space=args.keys, read_fraction=args.read_frac,
                            payload_bytes=args.payload, duration=args.duration,
                            target_rate=args.target_rate)
        if args.backend == "socket":
            from .transport.sockets import SocketEndpoint

            if not args.config:
                raise ConfigError("--config with a peers table is required for --backend socket")
            config = ClusterConfig.load(args.config)
            endpoint = SocketEndpoint(config.peers, target=config.bootstrap_leader or 0,
                                      seed=args.seed)
        else:
            if args.config:
                config = ClusterConfig.load(args.config)
            else:
                groups = args.n - 1 if args.mode == "paxos" else args.r
                config = ClusterConfig(args.n, relay_groups=groups, prc=args.prc,
                                       rng_seed=args.seed, bootstrap_leader=0)
            endpoint = SimEndpoint(config, mode=args.mode, seed=args.seed)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows = sweep(spec, endpoint, args.clients)
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.out:
        write_sweep_csv(rows, args.out)
    else:
        write_sweep_csv(rows, sys.stdout)
    if args.figures:
        from .plotting import plot_latency_throughput

        label = f"{args.mode} N={config.n} R={config.r}"
        path = plot_latency_throughput({label: rows}, Path(args.figures) / "latency_throughput.png")
        print(f"figure written to {path}", file=sys.stderr)
    return EXIT_OK


# -- model ------------------------------------------------------------------------


def cmd_model(args: argparse.Namespace) -> int:
    from . import model

    status = EXIT_OK
    did_something = False
    if args.tables:
        print(model.print_tables())
        did_something = True
    if args.validate_prc is not None:
        did_something = True
        if args.groups:
            sizes = args.groups
            n = args.n if args.n is not None else sum(sizes) + 1
        else:
            if args.n is None or args.r is None:
                print("error: --validate-prc needs --groups or both --n and --r", file=sys.stderr)
                return EXIT_USAGE
            n = args.n
            try:
                sizes = list(partition_followers(n, args.r, 0).group_sizes)
            except ConfigError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_USAGE
        verdict = model.validate_prc(sizes, args.validate_prc, n)
        print(f"N={n} groups={sizes} PRC={args.validate_prc}: "
              f"{'ok' if verdict.ok else 'violation'} ({verdict})")
        if not verdict.ok:
            status = EXIT_FAILED
    if args.cross_validate:
        did_something = True
        status = max(status, _cross_validate(args.cross_validate, args))
    if args.n is not None and args.r is not None and args.validate_prc is None:
        did_something = True
        try:
            row = model.LoadModelRow.compute(args.n, args.r)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        ml, mf, ratio = row.rendered()
        print(f"N={args.n} R={args.r}: M_l={ml} ({row.leader}) M_f={mf} ({row.follower}) "
              f"ratio={ratio} ({row.ratio}) total messages={model.total_messages(args.n)}")
    if not did_something:
        print(model.print_tables())
    if args.figures:
        from .plotting import plot_load_model

        n = args.n or model.TABLE_1[0]
        path = plot_load_model(n, list(range(1, n)), Path(args.figures) / f"load_model_n{n}.png")
        print(f"figure written to {path}", file=sys.stderr)
    return status


def _cross_validate(path: str, args: argparse.Namespace) -> int:
    from .bench import read_metrics_csv
    from .model import cross_validate

    try:
        rows = read_metrics_csv(path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    by_variant: dict[str, list[dict[str, str]]] = defaultdict(list)
    for row in rows:
        by_variant[row["variant"]].append(row)
    status = EXIT_OK
    for variant, vrows in by_variant.items():
        meta = {r["metric"]: r["value"] for r in vrows if r["scope"] == "config"}
        try:
            n = args.n if args.n is not None else int(meta["n"])
            r = args.r if args.r is not None else int(meta["relay_groups"])
            leader = int(meta.get("leader", 0))
            commands = int(next(x["value"] for x in vrows if x["metric"] == "commands"))
        except (KeyError, StopIteration, ValueError):
            print(f"error: {variant}: metrics lack n, relay_groups or commands", file=sys.stderr)
            return EXIT_USAGE
        handled = {int(x["scope"].split("=")[1]): int(x["value"])
                   for x in vrows if x["metric"] == "handled_replication"}
        try:
            report = cross_validate(handled, commands, n, r, leader)
        except ValueError as exc:
            print(f"{variant}: {exc}")
            status = EXIT_FAILED
            continue
        print(f"[{variant}]")
        for line in report.lines():
            print(line)
        if not report.ok:
            status = EXIT_FAILED
    return status


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pigpaxos", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run one replica over TCP")
    node.add_argument("--config", required=True, help="cluster JSON file with a peers table")
    node.add_argument("--id", type=int, required=True, help="this replica's node id")
    node.add_argument("--mode", choices=("pig", "paxos"), default="pig")
    node.set_defaults(func=cmd_node)

    sim = sub.add_parser("sim", help="run a deterministic simulation scenario",
                         epilog=METRICS_COLUMNS_HELP,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    sim.add_argument("scenario", nargs="?", help="scenario JSON path or bundled scenario name")
    sim.add_argument("--list", action="store_true", help="list bundled scenarios")
    sim.add_argument("--out", help="metrics CSV path (overrides the scenario's output name)")
    sim.add_argument("--out-dir", default=".", help="directory for scenario outputs")
    sim.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    sim.add_argument("--trace", metavar="PATH", help="write the send/fault event trace")
    sim.add_argument("--seed", type=int, help="override the scenario seed")
    sim.set_defaults(func=cmd_sim)

    bench = sub.add_parser("bench", help="closed-loop benchmark sweep",
                           epilog=SWEEP_COLUMNS_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
    bench.add_argument("--clients", type=_int_list, default=[1, 10, 20, 40, 80, 120],
                       help="comma-separated client counts to sweep")
    bench.add_argument("--duration", type=float, default=1.0, help="seconds per point")
    bench.add_argument("--keys", type=int, default=1000)
    bench.add_argument("--read-frac", type=float, default=0.5)
    bench.add_argument("--payload", type=int, default=8, help="value size in bytes (8-1280)")
    bench.add_argument("--target-rate", type=float, help="optional total ops/s cap")
    bench.add_argument("--out", help="CSV output path (default stdout)")
    bench.add_argument("--figures", metavar="DIR", help="render a latency/throughput figure")
    bench.add_argument("--backend", choices=("sim", "socket"), default="sim")
    bench.add_argument("--config", help="cluster JSON (required for the socket backend)")
    bench.add_argument("--n", type=int, default=25, help="simulated cluster size")
    bench.add_argument("--r", type=int, default=3, help="simulated relay groups")
    bench.add_argument("--prc", type=int, default=0)
    bench.add_argument("--mode", choices=("pig", "paxos"), default="pig")
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench)

    mdl = sub.add_parser("model", help="analytical message-load model")
    mdl.add_argument("--n", type=int, help="cluster size")
    mdl.add_argument("--r", type=int, help="relay group count")
    mdl.add_argument("--tables", action="store_true", help="print both load tables")
    mdl.add_argument("--validate-prc", type=int, metavar="PRC",
                     help="check the partial-response constraint for --n/--r or --groups")
    mdl.add_argument("--groups", type=_int_list, help="explicit group sizes, e.g. 8,8,8")
    mdl.add_argument("--cross-validate", metavar="METRICS_CSV",
                     help="compare simulator counters from `sim` output with the model")
    mdl.add_argument("--figures", metavar="DIR", help="render the load model chart")
    mdl.set_defaults(func=cmd_model)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
