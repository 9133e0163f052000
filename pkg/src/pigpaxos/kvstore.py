"""Replicated in-memory key-value state machine."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .core import Command, EntryState, LogEntry, Op


@dataclass(frozen=True, slots=True)
class ApplyResult:
    command: Command
    found: bool
    value: bytes
    duplicate: bool = False


@dataclass
class KvState:
    data: dict[bytes, bytes] = field(default_factory=dict)
    applied_up_to: int = 0
    # client_id -> (last applied request_seq, its result)
    sessions: dict[int, tuple[int, ApplyResult]] = field(default_factory=dict)


class KvStore:
    """Deterministic fold over the committed log prefix.

    ``applied_up_to`` is the next slot expected, so it equals the number of
    entries applied so far. Requests already applied for a client session are
    skipped and answered from the session cache, which keeps client retries
    at-most-once even when a retried command lands in two slots.
    """

    def __init__(self) -> None:
        self.state = KvState()

    @property
    def applied_up_to(self) -> int:
        return self.state.applied_up_to

    def apply(self, entry: LogEntry) -> ApplyResult:
        st = self.state
        if entry.slot != st.applied_up_to:
            raise AssertionError(
                f"out-of-order apply: slot {entry.slot}, expected {st.applied_up_to}")
        if entry.state < EntryState.COMMITTED:
            raise AssertionError(f"apply of uncommitted slot {entry.slot}")
        st.applied_up_to += 1
        return self._apply_command(entry.command)

    def _apply_command(self, cmd: Command) -> ApplyResult:
        st = self.state
        if cmd.op == Op.NOOP:
            return ApplyResult(cmd, False, b"")
        if cmd.client_id:
            prior = st.sessions.get(cmd.client_id)
            if prior is not None and cmd.request_seq <= prior[0]:
                cached = prior[1]
                if cmd.request_seq == prior[0]:
                    return ApplyResult(cmd, cached.found, cached.value, duplicate=True)
                return ApplyResult(cmd, False, b"", duplicate=True)
        if cmd.op == Op.PUT:
            st.data[cmd.key] = cmd.value
            result = ApplyResult(cmd, True, b"")
        else:
            value = st.data.get(cmd.key)
            result = ApplyResult(cmd, value is not None, value or b"")
        if cmd.client_id:
            st.sessions[cmd.client_id] = (cmd.request_seq, result)
        return result

    def get(self, key: bytes) -> bytes | None:
        return self.state.data.get(key)

    def cached(self, client_id: int) -> tuple[int, ApplyResult] | None:
        return self.state.sessions.get(client_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.state.applied_up_to.to_bytes(8, "big"))
        for k in sorted(self.state.data):
            v = self.state.data[k]
            h.update(len(k).to_bytes(4, "big") + k + len(v).to_bytes(4, "big") + v)
        return h.hexdigest()
