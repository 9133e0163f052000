"""Figure rendering for reports. Always writes files; never opens windows."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import SweepRow  # noqa: E402
from .model import table_rows  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_throughput_windows(series: Mapping[str, Sequence[int]], path: str | Path,
                            title: str = "Throughput per 1 s window") -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, windows in series.items():
        ax.plot(range(len(windows)), windows, marker="o", label=label)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("ops per window")
    ax.set_title(title)
    ax.set_ylim(bottom=0)
    ax.legend()
    return _save(fig, path)


def plot_latency_throughput(curves: Mapping[str, Sequence[SweepRow]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, rows in curves.items():
        xs = [r.throughput for r in rows]
        ax.errorbar(xs, [r.median_ms for r in rows],
                    yerr=[[r.median_ms - r.p25_ms for r in rows],
                          [r.p75_ms - r.median_ms for r in rows]],
                    marker="o", capsize=3, label=label)
    ax.set_xlabel("throughput (ops/s)")
    ax.set_ylabel("median latency (ms)")
    ax.set_title("Latency vs throughput")
    ax.legend()
    return _save(fig, path)


def plot_bars(values: Mapping[str, float], path: str | Path, ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = list(values)
    ax.bar(labels, [values[k] for k in labels])
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def plot_load_model(n: int, rs: Sequence[int], path: str | Path) -> Path:
    rows = table_rows(n, rs)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([r.r for r in rows], [float(r.leader) for r in rows], marker="o", label="leader")
    ax.plot([r.r for r in rows], [float(r.follower) for r in rows], marker="s",
            label="follower (mean)")
    ax.set_xlabel("relay groups")
    ax.set_ylabel("messages per command")
    ax.set_title(f"Message load, N = {n}")
    ax.legend()
    return _save(fig, path)
