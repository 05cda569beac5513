"""Wire messages and their binary layout.

Every message encodes to a fixed layout per kind: a one-byte kind tag followed
by little-endian fields in the order listed in each class docstring. Keys are
fixed 8-byte strings, values fixed-width (configured per deployment), rmw-ids
and lids ride as their canonical 64-bit encodings.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

from .core import KEY_SIZE, RmwId, Timestamp

_TS = struct.Struct("<QH")
_U64 = struct.Struct("<Q")


class ReplyCode(Enum):
    ACK = 0
    ACK_BASE_TS_STALE = 1
    RMW_ID_COMMITTED = 2
    RMW_ID_COMMITTED_NO_BCAST = 3
    LOG_TOO_LOW = 4
    LOG_TOO_HIGH = 5
    SEEN_HIGHER_PROP = 6
    SEEN_HIGHER_ACC = 7
    SEEN_LOWER_ACC = 8


class ReadCode(Enum):
    CARSTAMP_TOO_LOW = 0
    CARSTAMP_EQUAL = 1
    CARSTAMP_TOO_HIGH = 2


NACK_CODES = frozenset(ReplyCode) - {ReplyCode.ACK, ReplyCode.ACK_BASE_TS_STALE}


def _ts_list(ts: Timestamp | None):
    return None if ts is None else [ts.version, ts.machine_id]


@dataclass(frozen=True)
class ProposeMsg:
    """key, lid, rmw-id, log-no, ts, base-ts"""

    key: bytes
    lid: int
    rmw_id: RmwId
    log_no: int
    ts: Timestamp
    base_ts: Timestamp

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid,
                "rmw": [self.rmw_id.counter, self.rmw_id.session],
                "log": self.log_no, "ts": _ts_list(self.ts),
                "base": _ts_list(self.base_ts)}


@dataclass(frozen=True)
class AcceptMsg:
    """key, lid, rmw-id, log-no, ts, base-ts, value"""

    key: bytes
    lid: int
    rmw_id: RmwId
    log_no: int
    ts: Timestamp
    base_ts: Timestamp
    value: bytes

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid,
                "rmw": [self.rmw_id.counter, self.rmw_id.session],
                "log": self.log_no, "ts": _ts_list(self.ts),
                "base": _ts_list(self.base_ts), "value": self.value.hex()}


@dataclass(frozen=True)
class CommitMsg:
    """key, lid, rmw-id, log-no, thin flag, [value, base-ts]"""

    key: bytes
    lid: int
    rmw_id: RmwId
    log_no: int
    value: bytes | None = None
    base_ts: Timestamp | None = None

    @property
    def thin(self) -> bool:
        return self.value is None

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid,
                "rmw": [self.rmw_id.counter, self.rmw_id.session],
                "log": self.log_no, "thin": self.thin,
                "value": None if self.value is None else self.value.hex(),
                "base": _ts_list(self.base_ts)}


@dataclass(frozen=True)
class CommitAckMsg:
    """lid"""

    lid: int

    def payload(self):
        return {"lid": self.lid}


@dataclass(frozen=True)
class ReplyMsg:
    """lid, opcode, then a payload fully determined by the opcode.

    Seen-higher-*: the blocking proposed-TS. Seen-lower-acc: the accepted RMW
    (accepted-TS, rmw-id, value, acc-base-TS). Log-too-low: the last committed
    record (log-no, rmw-id, value, base-TS). Ack-base-TS-stale: (value, base-TS).
    """

    lid: int
    code: ReplyCode
    is_accept_reply: bool = False
    ts: Timestamp | None = None
    rmw_id: RmwId | None = None
    log_no: int | None = None
    value: bytes | None = None
    base_ts: Timestamp | None = None

    def payload(self):
        out = {"lid": self.lid, "code": self.code.name.lower()}
        if self.ts is not None:
            out["ts"] = _ts_list(self.ts)
        if self.rmw_id is not None:
            out["rmw"] = [self.rmw_id.counter, self.rmw_id.session]
        if self.log_no is not None:
            out["log"] = self.log_no
        if self.value is not None:
            out["value"] = self.value.hex()
        if self.base_ts is not None:
            out["base"] = _ts_list(self.base_ts)
        return out


@dataclass(frozen=True)
class ReadMsg:
    """key, lid, reader's carstamp (base-ts, log-no)"""

    key: bytes
    lid: int
    base_ts: Timestamp
    log_no: int

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid,
                "base": _ts_list(self.base_ts), "log": self.log_no}


@dataclass(frozen=True)
class ReadReplyMsg:
    """lid, opcode; Carstamp-too-low carries (carstamp, value, last committed rmw-id)"""

    lid: int
    code: ReadCode
    base_ts: Timestamp | None = None
    log_no: int | None = None
    value: bytes | None = None
    rmw_id: RmwId | None = None

    def payload(self):
        out = {"lid": self.lid, "code": self.code.name.lower()}
        if self.base_ts is not None:
            out["base"] = _ts_list(self.base_ts)
            out["log"] = self.log_no
            out["value"] = self.value.hex()
            out["rmw"] = [self.rmw_id.counter, self.rmw_id.session]
        return out


@dataclass(frozen=True)
class TsRequestMsg:
    """key, lid"""

    key: bytes
    lid: int

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid}


@dataclass(frozen=True)
class TsReplyMsg:
    """lid, base-ts, log-no"""

    lid: int
    base_ts: Timestamp
    log_no: int

    def payload(self):
        return {"lid": self.lid, "base": _ts_list(self.base_ts), "log": self.log_no}


@dataclass(frozen=True)
class WriteValueMsg:
    """key, lid, value, carstamp (base-ts, log-no)"""

    key: bytes
    lid: int
    value: bytes
    base_ts: Timestamp
    log_no: int

    def payload(self):
        return {"key": self.key.hex(), "lid": self.lid, "value": self.value.hex(),
                "base": _ts_list(self.base_ts), "log": self.log_no}


@dataclass(frozen=True)
class WriteAckMsg:
    """lid"""

    lid: int

    def payload(self):
        return {"lid": self.lid}


_KINDS = [ProposeMsg, AcceptMsg, CommitMsg, CommitAckMsg, ReplyMsg,
          ReadMsg, ReadReplyMsg, TsRequestMsg, TsReplyMsg, WriteValueMsg, WriteAckMsg]
_TAG = {cls: i for i, cls in enumerate(_KINDS)}

KIND_NAMES = {ProposeMsg: "propose", AcceptMsg: "accept", CommitMsg: "commit",
              CommitAckMsg: "commit_ack", ReplyMsg: "reply", ReadMsg: "read",
              ReadReplyMsg: "read_reply", TsRequestMsg: "ts_request",
              TsReplyMsg: "ts_reply", WriteValueMsg: "write_value",
              WriteAckMsg: "write_ack"}


def _pack_ts(ts: Timestamp) -> bytes:
    return _TS.pack(ts.version, ts.machine_id)


def _unpack_ts(data: bytes, off: int) -> tuple[Timestamp, int]:
    v, m = _TS.unpack_from(data, off)
    return Timestamp(v, m), off + _TS.size


def encode_message(msg, value_size: int) -> bytes:
    """Serialize a message to its canonical wire form."""
    out = bytearray([_TAG[type(msg)]])
    if isinstance(msg, ProposeMsg):
        out += msg.key + _U64.pack(msg.lid) + _U64.pack(msg.rmw_id.encode())
        out += _U64.pack(msg.log_no) + _pack_ts(msg.ts) + _pack_ts(msg.base_ts)
    elif isinstance(msg, AcceptMsg):
        out += msg.key + _U64.pack(msg.lid) + _U64.pack(msg.rmw_id.encode())
        out += _U64.pack(msg.log_no) + _pack_ts(msg.ts) + _pack_ts(msg.base_ts)
        out += msg.value
    elif isinstance(msg, CommitMsg):
        out += msg.key + _U64.pack(msg.lid) + _U64.pack(msg.rmw_id.encode())
        out += _U64.pack(msg.log_no) + bytes([1 if msg.thin else 0])
        if not msg.thin:
            out += msg.value + _pack_ts(msg.base_ts)
    elif isinstance(msg, CommitAckMsg):
        out += _U64.pack(msg.lid)
    elif isinstance(msg, ReplyMsg):
        out += _U64.pack(msg.lid) + bytes([msg.code.value, 1 if msg.is_accept_reply else 0])
        if msg.code in (ReplyCode.SEEN_HIGHER_PROP, ReplyCode.SEEN_HIGHER_ACC):
            out += _pack_ts(msg.ts)
        elif msg.code is ReplyCode.SEEN_LOWER_ACC:
            out += _pack_ts(msg.ts) + _U64.pack(msg.rmw_id.encode())
            out += msg.value + _pack_ts(msg.base_ts)
        elif msg.code is ReplyCode.LOG_TOO_LOW:
            out += _U64.pack(msg.log_no) + _U64.pack(msg.rmw_id.encode())
            out += msg.value + _pack_ts(msg.base_ts)
        elif msg.code is ReplyCode.ACK_BASE_TS_STALE:
            out += msg.value + _pack_ts(msg.base_ts)
    elif isinstance(msg, ReadMsg):
        out += msg.key + _U64.pack(msg.lid) + _pack_ts(msg.base_ts) + _U64.pack(msg.log_no)
    elif isinstance(msg, ReadReplyMsg):
        out += _U64.pack(msg.lid) + bytes([msg.code.value])
        if msg.code is ReadCode.CARSTAMP_TOO_LOW:
            out += _pack_ts(msg.base_ts) + _U64.pack(msg.log_no)
            out += msg.value + _U64.pack(msg.rmw_id.encode())
    elif isinstance(msg, TsRequestMsg):
        out += msg.key + _U64.pack(msg.lid)
    elif isinstance(msg, TsReplyMsg):
        out += _U64.pack(msg.lid) + _pack_ts(msg.base_ts) + _U64.pack(msg.log_no)
    elif isinstance(msg, WriteValueMsg):
        out += msg.key + _U64.pack(msg.lid) + msg.value
        out += _pack_ts(msg.base_ts) + _U64.pack(msg.log_no)
    elif isinstance(msg, WriteAckMsg):
        out += _U64.pack(msg.lid)
    else:
        raise TypeError(f"unknown message {msg!r}")
    return bytes(out)


def decode_message(data: bytes, value_size: int):
    """Inverse of encode_message."""
    cls = _KINDS[data[0]]
    off = 1

    def key():
        nonlocal off
        k = data[off:off + KEY_SIZE]
        off += KEY_SIZE
        return k

    def u64():
        nonlocal off
        (v,) = _U64.unpack_from(data, off)
        off += 8
        return v

    def ts():
        nonlocal off
        t, off = _unpack_ts(data, off)
        return t

    def val():
        nonlocal off
        v = data[off:off + value_size]
        off += value_size
        return v

    if cls is ProposeMsg:
        return ProposeMsg(key(), u64(), RmwId.decode(u64()), u64(), ts(), ts())
    if cls is AcceptMsg:
        return AcceptMsg(key(), u64(), RmwId.decode(u64()), u64(), ts(), ts(), val())
    if cls is CommitMsg:
        k, lid, rmw, log = key(), u64(), RmwId.decode(u64()), u64()
        thin = data[off]
        off += 1
        if thin:
            return CommitMsg(k, lid, rmw, log)
        return CommitMsg(k, lid, rmw, log, val(), ts())
    if cls is CommitAckMsg:
        return CommitAckMsg(u64())
    if cls is ReplyMsg:
        lid = u64()
        code = ReplyCode(data[off])
        is_acc = bool(data[off + 1])
        off += 2
        if code in (ReplyCode.SEEN_HIGHER_PROP, ReplyCode.SEEN_HIGHER_ACC):
            return ReplyMsg(lid, code, is_acc, ts=ts())
        if code is ReplyCode.SEEN_LOWER_ACC:
            return ReplyMsg(lid, code, is_acc, ts=ts(), rmw_id=RmwId.decode(u64()),
                            value=val(), base_ts=ts())
        if code is ReplyCode.LOG_TOO_LOW:
            return ReplyMsg(lid, code, is_acc, log_no=u64(), rmw_id=RmwId.decode(u64()),
                            value=val(), base_ts=ts())
        if code is ReplyCode.ACK_BASE_TS_STALE:
            return ReplyMsg(lid, code, is_acc, value=val(), base_ts=ts())
        return ReplyMsg(lid, code, is_acc)
    if cls is ReadMsg:
        return ReadMsg(key(), u64(), ts(), u64())
    if cls is ReadReplyMsg:
        lid = u64()
        code = ReadCode(data[off])
        off += 1
        if code is ReadCode.CARSTAMP_TOO_LOW:
            return ReadReplyMsg(lid, code, base_ts=ts(), log_no=u64(), value=val(),
                                rmw_id=RmwId.decode(u64()))
        return ReadReplyMsg(lid, code)
    if cls is TsRequestMsg:
        return TsRequestMsg(key(), u64())
    if cls is TsReplyMsg:
        return TsReplyMsg(u64(), ts(), u64())
    if cls is WriteValueMsg:
        return WriteValueMsg(key(), u64(), val(), ts(), u64())
    if cls is WriteAckMsg:
        return WriteAckMsg(u64())
    raise TypeError(f"unknown tag {data[0]}")
