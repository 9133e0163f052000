"""Analytical per-command message-load model and simulator cross-validation.

Loads are counted as messages handled (sent plus received) by a node for one
replicated command, including the client request and reply at the leader.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .core import RelayGroupConfig, majority


def _check(n: int, r: int) -> None:
    if n < 2:
        raise ValueError(f"cluster size must be at least 2, got {n}")
    if not 1 <= r <= n - 1:
        raise ValueError(f"relay group count must be in 1..{n - 1}, got {r}")


def leader_load(r: int) -> Fraction:
    if r < 1:
        raise ValueError(f"relay group count must be >= 1, got {r}")
    return Fraction(2 * r + 2)


def follower_load(n: int, r: int) -> Fraction:
    _check(n, r)
    return Fraction(2 * (n - r - 1), n - 1) + 2


def follower_load_expanded(n: int, r: int) -> Fraction:
    """Relay probability times relay overhead, plus one round trip."""
    _check(n, r)
    return 2 * Fraction(r, n - 1) * Fraction(n - r - 1, r) + 2


def load_ratio(n: int, r: int) -> Fraction:
    return leader_load(r) / follower_load(n, r)


def total_messages(n: int, r: Optional[int] = None) -> int:
    """Messages sent cluster-wide for one command; independent of r."""
    if r is None:
        return 2 * n - 1
    _check(n, r)
    leader = r + 1
    relays = sum(s - 1 for s in _even_sizes(n - 1, r)) + r
    followers = n - 1 - r
    return leader + relays + followers


def _even_sizes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def asymptotic_follower_limit() -> Fraction:
    """Limit of the single-group follower load as the cluster grows."""
    return Fraction(4)


@dataclass(frozen=True)
class LoadModelRow:
    n: int
    r: int
    leader: Fraction
    follower: Fraction
    ratio: Fraction

    @classmethod
    def compute(cls, n: int, r: int) -> "LoadModelRow":
        return cls(n, r, leader_load(r), follower_load(n, r), load_ratio(n, r))

    def rendered(self) -> tuple[str, str, str]:
        """Table rendering: follower load to two decimals, ratio of the
        leader load to that rounded follower load to three decimals."""
        mf = _round(self.follower, 2)
        ratio = Fraction(self.leader) / Fraction(mf)
        return (_trim(Decimal(self.leader.numerator)), _trim(mf),
                _trim_ratio(_round(ratio, 3)))


def _round(x: Fraction, places: int, mode=ROUND_HALF_UP) -> Decimal:
    q = Decimal(1).scaleb(-places)
    return (Decimal(x.numerator) / Decimal(x.denominator)).quantize(q, rounding=mode)


def truncate(x: Fraction, places: int) -> Decimal:
    return _round(x, places, ROUND_DOWN)


def _trim(d: Decimal) -> str:
    s = format(d.normalize(), "f")
    return s


def _trim_ratio(d: Decimal) -> str:
    s = _trim(d)
    return s if "." in s else s + ".0"


TABLE_1 = (25, (1, 2, 3, 4, 5, 6, 24))
TABLE_2 = (5, (1, 2, 4))


def table_rows(n: int, rs: Sequence[int]) -> list[LoadModelRow]:
    return [LoadModelRow.compute(n, r) for r in rs]


def format_table(n: int, rs: Sequence[int]) -> str:
    head = f"{'R':>10} | {'M_l':>4} | {'M_f':>5} | {'M_l/M_f':>7}"
    lines = [f"N = {n}", head, "-" * len(head)]
    for row in table_rows(n, rs):
        label = f"{row.r} (Paxos)" if row.r == n - 1 else str(row.r)
        ml, mf, ratio = row.rendered()
        lines.append(f"{label:>10} | {ml:>4} | {mf:>5} | {ratio:>7}")
    return "\n".join(lines)


def print_tables() -> str:
    return format_table(*TABLE_1) + "\n\n" + format_table(*TABLE_2)


@dataclass(frozen=True)
class PrcVerdict:
    ok: bool
    total: int
    required: int

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        rel = ">=" if self.ok else "<"
        return f"sum of group thresholds {self.total} {rel} required {self.required}"


def validate_prc(groups: RelayGroupConfig | Sequence[int], prc: int, n: int) -> PrcVerdict:
    """Check that group thresholds n_i - prc can still add up to a majority.

    The leader's own vote is not counted, matching the published inequality.
    """
    sizes = groups.group_sizes if isinstance(groups, RelayGroupConfig) else tuple(groups)
    total = sum(max(s - prc, 0) for s in sizes)
    required = majority(n)
    return PrcVerdict(total >= required, total, required)


@dataclass
class CrossValidationReport:
    n: int
    r: int
    commands: int
    leader_per_command: Fraction
    follower_mean_per_command: Fraction
    expected_leader: Fraction
    expected_follower: Fraction
    tolerance: float = 0.02
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        verdict = "PASS" if self.ok else "FAIL"
        out = [
            f"cross-validation N={self.n} R={self.r} commands={self.commands}: {verdict}",
            f"  leader   {float(self.leader_per_command):.4f}/cmd"
            f" (model {float(self.expected_leader):.4f}, exact match required)",
            f"  follower {float(self.follower_mean_per_command):.4f}/cmd"
            f" (model {float(self.expected_follower):.4f}, within {self.tolerance:.0%})",
        ]
        out.extend(f"  violation: {f}" for f in self.failures)
        return out


def cross_validate(handled: Mapping[int, int], commands: int, n: int, r: int, leader: int = 0,
                   tolerance: float = 0.02) -> CrossValidationReport:
    """Compare per-node handled replication-message counters against the model.

    ``handled`` maps node id to sends plus receives of per-command traffic
    (client request/reply and phase-2 messages) over a fault-free run.
    """
    if commands <= 0:
        raise ValueError("cross-validation needs at least one committed command")
    leader_pc = Fraction(handled.get(leader, 0), commands)
    followers = [handled.get(i, 0) for i in range(n) if i != leader]
    follower_pc = Fraction(sum(followers), commands * len(followers))
    report = CrossValidationReport(
        n, r, commands, leader_pc, follower_pc, leader_load(r), follower_load(n, r), tolerance)
    if leader_pc != report.expected_leader:
        report.failures.append(
            f"handled_replication[node={leader}] = {float(leader_pc):.4f}/cmd,"
            f" expected {report.expected_leader}")
    rel = abs(follower_pc - report.expected_follower) / report.expected_follower
    if rel > tolerance:
        report.failures.append(
            f"handled_replication[followers] mean = {float(follower_pc):.4f}/cmd,"
            f" off by {float(rel):.2%}")
    return report
