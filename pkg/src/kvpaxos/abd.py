"""Quorum reads and writes coexisting with the RMW engine over the same pairs.

Writes run the classic two rounds: query a majority for (base-ts, log-no),
then broadcast the value under a fresh carstamp. Reads query a majority and
write back via a commit when they cannot prove the chosen carstamp is already
majority-stored. Neither path ever emits a propose or an accept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .core import Carstamp, RmwId, Timestamp, session_of_lid
from .kvs import CommitInfo
from .messages import (
    CommitAckMsg,
    CommitMsg,
    ReadCode,
    ReadMsg,
    ReadReplyMsg,
    TsReplyMsg,
    TsRequestMsg,
    WriteAckMsg,
    WriteValueMsg,
)


class AbdPhase(Enum):
    IDLE = "idle"
    TS_QUERY = "ts_query"
    WRITE_ROUND = "write_round"
    READ_ROUND = "read_round"
    READ_COMMIT = "read_commit"


@dataclass
class AbdSession:
    session: int
    gsid: int
    phase: AbdPhase = AbdPhase.IDLE
    kind: str = ""
    key: bytes = b""
    value: bytes | None = None
    lid: int = 0
    invoke_tick: int = 0
    tally: dict[int, object] = field(default_factory=dict)
    commit_acks: set[int] = field(default_factory=set)
    outmsg: object = None
    last_bcast: int = 0
    # frozen local view at read start / chosen read result
    chosen_base: Timestamp | None = None
    chosen_log: int = 0
    chosen_value: bytes | None = None
    chosen_rmw: RmwId | None = None


class AbdRuntime:
    def __init__(self, machine):
        self.m = machine
        self.sessions = [AbdSession(s, machine.id * machine.cfg.sessions_per_machine + s)
                         for s in range(machine.cfg.sessions_per_machine)]

    def idle(self, session: int) -> bool:
        return self.sessions[session].phase is AbdPhase.IDLE

    # -- replica-side handlers ----------------------------------------------

    def on_ts_request(self, msg: TsRequestMsg) -> TsReplyMsg:
        pair = self.m.kvs.pair(msg.key)
        return TsReplyMsg(msg.lid, pair.base_ts, pair.last_committed_log_no)

    def on_read(self, msg: ReadMsg) -> ReadReplyMsg:
        pair = self.m.kvs.pair(msg.key)
        local = pair.carstamp()
        incoming = Carstamp(msg.base_ts, msg.log_no)
        if incoming < local:
            return ReadReplyMsg(msg.lid, ReadCode.CARSTAMP_TOO_LOW,
                                base_ts=pair.base_ts, log_no=pair.last_committed_log_no,
                                value=pair.value, rmw_id=pair.last_committed_rmw_id)
        if incoming == local:
            return ReadReplyMsg(msg.lid, ReadCode.CARSTAMP_EQUAL)
        return ReadReplyMsg(msg.lid, ReadCode.CARSTAMP_TOO_HIGH)

    def on_write_value(self, msg: WriteValueMsg) -> WriteAckMsg:
        if self.m.kvs.apply_write(msg.key, msg.value, msg.base_ts):
            self.m.emit("write_applied", {
                "key": msg.key.hex(), "value": msg.value.hex(),
                "base": [msg.base_ts.version, msg.base_ts.machine_id]})
        return WriteAckMsg(msg.lid)

    # -- client ops -----------------------------------------------------------

    def start_write(self, session: int, key: bytes, value: bytes) -> None:
        s = self.sessions[session]
        pair = self.m.kvs.pair(key)
        s.phase = AbdPhase.TS_QUERY
        s.kind = "write"
        s.key = key
        s.value = value
        s.invoke_tick = self.m.now
        s.lid = self.m.new_lid(session)
        self.m.emit("client_invoke", {"session": s.gsid, "kind": "write",
                                      "key": key.hex(), "value": value.hex()})
        msg = TsRequestMsg(key, s.lid)
        s.outmsg = msg
        s.last_bcast = self.m.now
        for dst in self.m.peers:
            self.m.send(dst, msg)
        s.tally = {self.m.id: TsReplyMsg(s.lid, pair.base_ts, pair.last_committed_log_no)}

    def start_read(self, session: int, key: bytes) -> None:
        s = self.sessions[session]
        pair = self.m.kvs.pair(key)
        s.phase = AbdPhase.READ_ROUND
        s.kind = "read"
        s.key = key
        s.invoke_tick = self.m.now
        s.lid = self.m.new_lid(session)
        # freeze the local view; it competes with too-low payloads below
        s.chosen_base = pair.base_ts
        s.chosen_log = pair.last_committed_log_no
        s.chosen_value = pair.value
        s.chosen_rmw = pair.last_committed_rmw_id
        self.m.emit("client_invoke", {"session": s.gsid, "kind": "read", "key": key.hex()})
        msg = ReadMsg(key, s.lid, pair.base_ts, pair.last_committed_log_no)
        s.outmsg = msg
        s.last_bcast = self.m.now
        for dst in self.m.peers:
            self.m.send(dst, msg)
        s.tally = {self.m.id: ReadReplyMsg(s.lid, ReadCode.CARSTAMP_EQUAL)}

    # -- reply folding ---------------------------------------------------------

    def fold(self, src: int, msg) -> None:
        s = self.sessions[session_of_lid(msg.lid)]
        if s.lid != msg.lid:
            return
        if isinstance(msg, TsReplyMsg) and s.phase is AbdPhase.TS_QUERY:
            s.tally[src] = msg
        elif isinstance(msg, ReadReplyMsg) and s.phase is AbdPhase.READ_ROUND:
            s.tally[src] = msg
        elif isinstance(msg, WriteAckMsg) and s.phase is AbdPhase.WRITE_ROUND:
            s.tally[src] = msg

    def fold_commit_ack(self, src: int, msg: CommitAckMsg) -> None:
        s = self.sessions[session_of_lid(msg.lid)]
        if s.phase is AbdPhase.READ_COMMIT and s.lid == msg.lid:
            s.commit_acks.add(src)

    # -- phase transitions -------------------------------------------------------

    def inspect_all(self) -> None:
        for s in self.sessions:
            if s.phase is not AbdPhase.IDLE:
                self._inspect(s)

    def _inspect(self, s: AbdSession) -> None:
        m = self.m
        quorum = m.cfg.quorum
        if s.phase is AbdPhase.TS_QUERY:
            if len(s.tally) >= quorum:
                ver = max(r.base_ts.version for r in s.tally.values())
                ver = max(ver, m.write_version) + 1
                m.write_version = ver
                wlog = max(r.log_no for r in s.tally.values())
                self._start_write_round(s, Timestamp(ver, m.id), wlog)
            else:
                self._resend(s)
        elif s.phase is AbdPhase.WRITE_ROUND:
            if len(s.tally) >= quorum:
                self._complete(s, s.value)
            else:
                self._resend(s)
        elif s.phase is AbdPhase.READ_ROUND:
            if len(s.tally) >= quorum:
                self._read_decide(s)
            else:
                self._resend(s)
        elif s.phase is AbdPhase.READ_COMMIT:
            if len(s.commit_acks) >= quorum - 1:
                self._complete(s, s.chosen_value)
            else:
                self._resend(s, acks=True)

    def _resend(self, s: AbdSession, acks: bool = False) -> None:
        if self.m.now - s.last_bcast < self.m.cfg.resend_interval:
            return
        replied = s.commit_acks if acks else s.tally.keys()
        for dst in self.m.peers:
            if dst not in replied:
                self.m.send(dst, s.outmsg)
        s.last_bcast = self.m.now

    def _start_write_round(self, s: AbdSession, base_ts: Timestamp, log_no: int) -> None:
        s.phase = AbdPhase.WRITE_ROUND
        s.lid = self.m.new_lid(s.session)
        msg = WriteValueMsg(s.key, s.lid, s.value, base_ts, log_no)
        s.outmsg = msg
        s.last_bcast = self.m.now
        for dst in self.m.peers:
            self.m.send(dst, msg)
        if self.m.kvs.apply_write(s.key, s.value, base_ts):
            self.m.emit("write_applied", {
                "key": s.key.hex(), "value": s.value.hex(),
                "base": [base_ts.version, base_ts.machine_id]})
        s.tally = {self.m.id: WriteAckMsg(s.lid)}

    def _read_decide(self, s: AbdSession) -> None:
        chosen = Carstamp(s.chosen_base, s.chosen_log)
        for r in s.tally.values():
            if isinstance(r, ReadReplyMsg) and r.code is ReadCode.CARSTAMP_TOO_LOW:
                c = Carstamp(r.base_ts, r.log_no)
                if c > chosen:
                    chosen = c
                    s.chosen_base, s.chosen_log = r.base_ts, r.log_no
                    s.chosen_value, s.chosen_rmw = r.value, r.rmw_id
        storers = 0
        local_stamp = Carstamp(*self._local_view(s))
        for r in s.tally.values():
            if r.code is ReadCode.CARSTAMP_EQUAL:
                # stores exactly the carstamp we broadcast (self replies equal)
                if local_stamp == chosen:
                    storers += 1
            elif r.code is ReadCode.CARSTAMP_TOO_LOW:
                if Carstamp(r.base_ts, r.log_no) == chosen:
                    storers += 1
        if storers >= self.m.cfg.quorum:
            self._complete(s, s.chosen_value)
            return
        # write back before reading: broadcast a commit for the chosen carstamp
        s.phase = AbdPhase.READ_COMMIT
        s.lid = self.m.new_lid(s.session)
        msg = CommitMsg(s.key, s.lid, s.chosen_rmw, s.chosen_log,
                        s.chosen_value, s.chosen_base)
        s.outmsg = msg
        s.last_bcast = self.m.now
        s.commit_acks = set()
        for dst in self.m.peers:
            self.m.send(dst, msg)
        self.m.apply_commit_and_trace(CommitInfo(s.key, s.chosen_log, s.chosen_rmw,
                                                 s.chosen_value, s.chosen_base))

    def _local_view(self, s: AbdSession):
        # the carstamp this session broadcast with its read round
        return s.outmsg.base_ts, s.outmsg.log_no

    def _complete(self, s: AbdSession, result: bytes | None) -> None:
        self.m.emit("client_complete", {
            "session": s.gsid, "kind": s.kind, "key": s.key.hex(), "rmw": None,
            "result": None if result is None else result.hex(),
            "ok": True, "path": "abd", "invoked": s.invoke_tick})
        self.m.completed_ops += 1
        s.phase = AbdPhase.IDLE
        s.tally = {}
        s.commit_acks = set()
        s.outmsg = None
        s.value = None
        s.chosen_value = None
