"""Length-prefixed binary framing for every protocol message.

Frame: u32 big-endian length of the rest, one type byte, then the body.
Integers are fixed-width big-endian, byte strings carry a u16 length, node
sets are sorted u16-counted lists. A relayed envelope ends with the nested
message's type byte and body.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterator

from ..core import Ballot, Command, Op
from ..engine import (AcceptedEntry, CatchupRequest, ClientReply, ClientRequest, P1a, P1b, P2a,
                      P2b, P3, ReplyStatus)
from ..pig import AggregatedReply, PigEnvelope, PigMsgId

MAX_FRAME = 64 * 1024 * 1024

T_P1A, T_P1B, T_P2A, T_P2B, T_P3 = 1, 2, 3, 4, 5
T_ENVELOPE, T_AGGREGATE, T_REQUEST, T_REPLY, T_CATCHUP = 6, 7, 8, 9, 10

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_I32 = struct.Struct(">i")
_I64 = struct.Struct(">q")
_BALLOT = struct.Struct(">QH")
_PIG_ID = struct.Struct(">HQ")
_CMD_HEAD = struct.Struct(">BQQ")
_REPLY_HEAD = struct.Struct(">QQBB")


class MalformedFrame(ValueError):
    """Raised for frames that cannot be decoded."""


# -- encoding ----------------------------------------------------------------


def _bytes(out: list, b: bytes) -> None:
    if len(b) > 0xFFFF:
        raise ValueError(f"byte string of {len(b)} bytes exceeds the 16-bit length prefix")
    out.append(_U16.pack(len(b)))
    out.append(b)


def _ballot(out: list, b: Ballot) -> None:
    out.append(_BALLOT.pack(b.round, b.proposer))


def _opt_ballot(out: list, b: Ballot | None) -> None:
    if b is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        _ballot(out, b)


def _command(out: list, c: Command) -> None:
    out.append(_CMD_HEAD.pack(c.op, c.client_id, c.request_seq))
    _bytes(out, c.key)
    _bytes(out, c.value)


def _nodes(out: list, ids) -> None:
    ids = sorted(ids)
    out.append(_U16.pack(len(ids)))
    out.append(struct.pack(f">{len(ids)}H", *ids))


def _entries(out: list, entries) -> None:
    out.append(_U32.pack(len(entries)))
    for e in entries:
        out.append(_I64.pack(e.slot))
        _ballot(out, e.ballot)
        out.append(b"\x01" if e.committed else b"\x00")
        _command(out, e.command)


def _body(out: list, msg) -> int:
    t = type(msg)
    if t is P2a:
        _ballot(out, msg.ballot)
        out.append(_I64.pack(msg.slot))
        out.append(_I64.pack(msg.commit_up_to))
        _command(out, msg.command)
        return T_P2A
    if t is P2b:
        _ballot(out, msg.ballot)
        out.append(_I64.pack(msg.slot))
        out.append(_U16.pack(msg.voter))
        _opt_ballot(out, msg.reject_ballot)
        return T_P2B
    if t is PigEnvelope:
        out.append(_PIG_ID.pack(msg.pig_id.initiator, msg.pig_id.sequence))
        _nodes(out, msg.group_members)
        inner: list = []
        code = _body(inner, msg.payload)
        out.append(_U8.pack(code))
        out.extend(inner)
        return T_ENVELOPE
    if t is AggregatedReply:
        out.append(_PIG_ID.pack(msg.pig_id.initiator, msg.pig_id.sequence))
        out.append(_U8.pack(msg.phase))
        _ballot(out, msg.ballot)
        out.append(_I64.pack(msg.slot))
        out.append(_U16.pack(msg.ack_count))
        _nodes(out, msg.missing_voters)
        _opt_ballot(out, msg.reject_ballot)
        _entries(out, msg.accepted)
        return T_AGGREGATE
    if t is ClientRequest:
        _command(out, msg.command)
        return T_REQUEST
    if t is ClientReply:
        out.append(_REPLY_HEAD.pack(msg.client_id, msg.request_seq, msg.status,
                                    1 if msg.found else 0))
        _bytes(out, msg.value)
        out.append(_I32.pack(msg.leader_hint))
        return T_REPLY
    if t is P3:
        out.append(_I64.pack(msg.slot))
        _command(out, msg.command)
        return T_P3
    if t is P1a:
        _ballot(out, msg.ballot)
        out.append(_I64.pack(msg.commit_up_to))
        return T_P1A
    if t is P1b:
        _ballot(out, msg.ballot)
        out.append(_U16.pack(msg.voter))
        _entries(out, msg.accepted)
        return T_P1B
    if t is CatchupRequest:
        out.append(_U16.pack(msg.voter))
        out.append(_I64.pack(msg.from_slot))
        return T_CATCHUP
    raise TypeError(f"no wire encoding for {t.__name__}")


def encode(msg) -> bytes:
    """Serialize ``msg`` into one complete frame, length prefix included."""
    out: list = []
    code = _body(out, msg)
    body = b"".join(out)
    return _U32.pack(len(body) + 1) + _U8.pack(code) + body


# -- decoding ----------------------------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf = buf
        self.pos = pos
        self.end = end

    def take(self, s: struct.Struct) -> tuple:
        p = self.pos
        if p + s.size > self.end:
            raise MalformedFrame("truncated frame")
        self.pos = p + s.size
        return s.unpack_from(self.buf, p)

    def u8(self) -> int:
        return self.take(_U8)[0]

    def u16(self) -> int:
        return self.take(_U16)[0]

    def i64(self) -> int:
        return self.take(_I64)[0]

    def flag(self) -> bool:
        v = self.u8()
        if v > 1:
            raise MalformedFrame(f"boolean byte {v} out of range")
        return v == 1

    def raw(self, n: int) -> bytes:
        p = self.pos
        if p + n > self.end:
            raise MalformedFrame("truncated frame")
        self.pos = p + n
        return bytes(self.buf[p:p + n])

    def bytestr(self) -> bytes:
        return self.raw(self.u16())

    def ballot(self) -> Ballot:
        r, p = self.take(_BALLOT)
        return Ballot(r, p)

    def opt_ballot(self) -> Ballot | None:
        return self.ballot() if self.flag() else None

    def command(self) -> Command:
        op, cid, seq = self.take(_CMD_HEAD)
        try:
            op = Op(op)
        except ValueError:
            raise MalformedFrame(f"unknown command op {op}") from None
        key = self.bytestr()
        return Command(op, key, self.bytestr(), cid, seq)

    def nodes(self) -> tuple[int, ...]:
        n = self.u16()
        if self.pos + 2 * n > self.end:
            raise MalformedFrame("truncated frame")
        ids = struct.unpack_from(f">{n}H", self.buf, self.pos)
        self.pos += 2 * n
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise MalformedFrame("node set is not strictly sorted")
        return ids

    def entries(self) -> tuple[AcceptedEntry, ...]:
        n = self.take(_U32)[0]
        out = []
        for _ in range(n):
            slot = self.i64()
            b = self.ballot()
            committed = self.flag()
            out.append(AcceptedEntry(slot, b, self.command(), committed))
        return tuple(out)


def _p1a(r: _Reader):
    return P1a(r.ballot(), r.i64())


def _p1b(r: _Reader):
    b = r.ballot()
    return P1b(b, r.u16(), r.entries())


def _p2a(r: _Reader):
    b = r.ballot()
    slot = r.i64()
    upto = r.i64()
    return P2a(b, slot, r.command(), upto)


def _p2b(r: _Reader):
    b = r.ballot()
    slot = r.i64()
    voter = r.u16()
    return P2b(b, slot, voter, r.opt_ballot())


def _p3(r: _Reader):
    slot = r.i64()
    return P3(slot, r.command())


def _envelope(r: _Reader):
    pig_id = PigMsgId(*r.take(_PIG_ID))
    members = r.nodes()
    code = r.u8()
    if code not in (T_P1A, T_P1B, T_P2A, T_P2B):
        raise MalformedFrame(f"envelope cannot carry message type {code}")
    return PigEnvelope(pig_id, members, _DECODERS[code](r))


def _aggregate(r: _Reader):
    pig_id = PigMsgId(*r.take(_PIG_ID))
    phase = r.u8()
    b = r.ballot()
    slot = r.i64()
    acks = r.u16()
    missing = r.nodes()
    reject = r.opt_ballot()
    return AggregatedReply(pig_id, phase, b, slot, acks, missing, reject, r.entries())


def _request(r: _Reader):
    return ClientRequest(r.command())


def _reply(r: _Reader):
    cid, seq, status, found = r.take(_REPLY_HEAD)
    try:
        status = ReplyStatus(status)
    except ValueError:
        raise MalformedFrame(f"unknown reply status {status}") from None
    if found > 1:
        raise MalformedFrame(f"boolean byte {found} out of range")
    value = r.bytestr()
    return ClientReply(cid, seq, status, found == 1, value, r.take(_I32)[0])


def _catchup(r: _Reader):
    voter = r.u16()
    return CatchupRequest(voter, r.i64())


_DECODERS: dict[int, Callable[[_Reader], object]] = {
    T_P1A: _p1a, T_P1B: _p1b, T_P2A: _p2a, T_P2B: _p2b, T_P3: _p3, T_ENVELOPE: _envelope,
    T_AGGREGATE: _aggregate, T_REQUEST: _request, T_REPLY: _reply, T_CATCHUP: _catchup,
}


def _decode_body(buf: bytes, start: int, end: int):
    if end <= start:
        raise MalformedFrame("frame has zero length")
    code = buf[start]
    fn = _DECODERS.get(code)
    if fn is None:
        raise MalformedFrame(f"unknown message type {code}")
    r = _Reader(buf, start + 1, end)
    msg = fn(r)
    if r.pos != end:
        raise MalformedFrame(f"{end - r.pos} trailing bytes after {type(msg).__name__}")
    return msg


def decode(frame: bytes):
    """Decode exactly one frame; the length prefix must match the buffer."""
    if len(frame) < 4:
        raise MalformedFrame("frame shorter than its length prefix")
    (length,) = _U32.unpack_from(frame, 0)
    if length == 0:
        raise MalformedFrame("frame has zero length")
    if length != len(frame) - 4:
        raise MalformedFrame(f"length prefix says {length} bytes, frame has {len(frame) - 4}")
    return _decode_body(frame, 4, len(frame))


class FrameBuffer:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[object]:
        self._buf += data
        buf = self._buf
        pos = 0
        try:
            while len(buf) - pos >= 4:
                (length,) = _U32.unpack_from(buf, pos)
                if length == 0 or length > MAX_FRAME:
                    raise MalformedFrame(f"bad frame length {length}")
                if len(buf) - pos - 4 < length:
                    break
                msg = _decode_body(bytes(buf[pos + 4:pos + 4 + length]), 0, length)
                pos += 4 + length
                yield msg
        finally:
            del buf[:pos]
