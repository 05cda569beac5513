"""Per-machine protocol engine for replicated per-key RMWs.

One Machine instance per simulated node. Each tick runs four phases in order:
poll inbound messages, inspect active local entries, emit enqueued messages,
pull new client requests. All state is owned by the machine and only mutated
inside its tick, so instances are safe to deep-copy for exhaustive exploration.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .abd import AbdRuntime
from .core import (
    ALL_ABOARD_VERSION,
    CP_START_VERSION,
    ConfigError,
    DEFAULT_VALUE_SIZE,
    RmwId,
    RmwKind,
    RmwOp,
    TS_ZERO,
    Timestamp,
    make_lid,
    rmw_compute,
    session_of_lid,
)
from .kvs import CommitInfo, KvStore, PairState
from .messages import (
    AcceptMsg,
    CommitAckMsg,
    CommitMsg,
    KIND_NAMES,
    ProposeMsg,
    ReadMsg,
    ReadReplyMsg,
    ReplyCode,
    ReplyMsg,
    TsReplyMsg,
    TsRequestMsg,
    WriteAckMsg,
    WriteValueMsg,
)
from .trace import Trace


class EntryState(Enum):
    INVALID = "invalid"
    PROPOSED = "proposed"
    ACCEPTED = "accepted"
    NEEDS_KV_PAIR = "needs_kv_pair"
    RETRY_WITH_HIGHER_TS = "retry_with_higher_ts"
    BCAST_COMMITS = "bcast_commits"
    BCAST_COMMITS_FROM_HELP = "bcast_commits_from_help"
    COMMITTED = "committed"


class HelpingFlag(Enum):
    NOT_HELPING = "not_helping"
    HELPING = "helping"
    PROPOSE_LOCALLY_ACCEPTED = "propose_locally_accepted"


@dataclass
class HelpRecord:
    """State of the RMW being helped, kept apart from the session's own RMW."""

    rmw_id: RmwId
    value: bytes
    log_no: int
    acc_base_ts: Timestamp
    accepted_ts: Timestamp


@dataclass
class ClientOp:
    """One queued client request for a session."""

    kind: str  # read | write | cas | faa
    key: bytes
    value: bytes | None = None  # write value, CAS swap value, FAA delta
    compare: bytes | None = None  # CAS only


@dataclass
class EngineConfig:
    machine_count: int = 5
    sessions_per_machine: int = 4
    back_off_threshold: int = 100
    all_aboard_timeout: int = 50
    log_too_high_limit: int = 3
    all_aboard_enabled: bool = True
    suspect_window: int = 500
    resend_interval: int = 25
    value_size: int = DEFAULT_VALUE_SIZE

    def __post_init__(self):
        if not 3 <= self.machine_count <= 7:
            raise ConfigError("machine_count must be in 3..7")
        if self.sessions_per_machine < 1:
            raise ConfigError("need at least one session per machine")

    @property
    def quorum(self) -> int:
        return self.machine_count // 2 + 1

    @property
    def total_sessions(self) -> int:
        return self.machine_count * self.sessions_per_machine


@dataclass
class LocalEntry:
    """Per-session RMW execution state machine."""

    session: int
    gsid: int
    state: EntryState = EntryState.INVALID
    key: bytes = b""
    op: RmwOp | None = None
    rmw_id: RmwId = RmwId(0, 0)
    ts: Timestamp = TS_ZERO
    log_no: int = 0
    accepted_value: bytes | None = None
    accepted_log_no: int = 0
    base_ts: Timestamp = TS_ZERO
    read_result: bytes | None = None
    cas_ok: bool = False
    back_off_counter: int = 0
    helping: HelpingFlag = HelpingFlag.NOT_HELPING
    help_rec: HelpRecord | None = None
    lid: int = 0
    all_aboard: bool = False
    path_all_aboard: bool = False
    aa_timeout_counter: int = 0
    fresh_base_seen: bool = False
    base_candidate: tuple[Timestamp, bytes] | None = None
    observed_fp: tuple | None = None
    tally: dict[int, ReplyMsg] = field(default_factory=dict)
    retry_floor: int = 0
    retry_bump: bool = False
    log_too_high_streak: int = 0
    invoke_tick: int = 0
    outmsg: object = None
    last_bcast: int = 0
    commit_wire: CommitMsg | None = None
    commit_local: CommitInfo | None = None
    commit_applied_local: bool = False
    commit_from_help: bool = False
    commit_acks: set[int] = field(default_factory=set)

    def reset_for_op(self):
        self.accepted_value = None
        self.accepted_log_no = 0
        self.base_ts = TS_ZERO
        self.read_result = None
        self.cas_ok = False
        self.back_off_counter = 0
        self.helping = HelpingFlag.NOT_HELPING
        self.help_rec = None
        self.all_aboard = False
        self.path_all_aboard = False
        self.aa_timeout_counter = 0
        self.fresh_base_seen = False
        self.base_candidate = None
        self.observed_fp = None
        self.tally = {}
        self.retry_floor = 0
        self.retry_bump = False
        self.log_too_high_streak = 0
        self.outmsg = None
        self.commit_wire = None
        self.commit_local = None
        self.commit_applied_local = False
        self.commit_from_help = False
        self.commit_acks = set()


_COMMITTED_CODES = frozenset((ReplyCode.RMW_ID_COMMITTED, ReplyCode.RMW_ID_COMMITTED_NO_BCAST))
_SEEN_HIGHER = frozenset((ReplyCode.SEEN_HIGHER_PROP, ReplyCode.SEEN_HIGHER_ACC))
_ACK_CODES = frozenset((ReplyCode.ACK, ReplyCode.ACK_BASE_TS_STALE))
_SHORT_CIRCUIT = _COMMITTED_CODES | {ReplyCode.LOG_TOO_LOW} | _SEEN_HIGHER


class Machine:
    """One replica: KV store plus the RMW and ABD protocol runtimes."""

    def __init__(self, machine_id: int, cfg: EngineConfig, trace: Trace):
        self.id = machine_id
        self.cfg = cfg
        self.trace = trace
        self.now = 0
        self.kvs = KvStore(cfg.total_sessions, cfg.value_size)
        self.entries = [
            LocalEntry(s, machine_id * cfg.sessions_per_machine + s)
            for s in range(cfg.sessions_per_machine)
        ]
        self.abd = AbdRuntime(self)
        self.pending_ops: list[deque[ClientOp]] = [deque() for _ in range(cfg.sessions_per_machine)]
        self.outbox: list[tuple[int, object]] = []
        self.peers = [m for m in range(cfg.machine_count) if m != machine_id]
        self.last_heard = {m: 0 for m in self.peers}
        self.lid_counters = [0] * cfg.sessions_per_machine
        self.rmw_counters = [0] * cfg.sessions_per_machine
        self.write_version = 1
        self.completed_ops = 0

    # -- plumbing ----------------------------------------------------------

    def emit(self, kind: str, payload: dict) -> None:
        self.trace.emit(self.now, self.id, kind, payload)

    def send(self, dst: int, msg) -> None:
        self.outbox.append((dst, msg))

    def new_lid(self, session: int) -> int:
        self.lid_counters[session] += 1
        return make_lid(session, self.lid_counters[session])

    def apply_commit_and_trace(self, ci: CommitInfo):
        out = self.kvs.apply_commit(ci)
        pair = self.kvs.pair(ci.key)
        if out.violation:
            self.emit("protocol_violation", {
                "key": ci.key.hex(), "log": ci.log_no,
                "rmw": [ci.rmw_id.counter, ci.rmw_id.session],
                "reason": "thin_commit_unresolvable"})
        if out.effective:
            rv = out.resolved_value
            rb = out.resolved_base_ts
            self.emit("commit_applied", {
                "key": ci.key.hex(), "log": ci.log_no,
                "rmw": [ci.rmw_id.counter, ci.rmw_id.session],
                "value": None if rv is None else rv.hex(),
                "base": None if rb is None else [rb.version, rb.machine_id],
                "lc_after": pair.last_committed_log_no})
        return out

    # -- the tick loop -----------------------------------------------------

    def tick(self, now: int, inbound: list[tuple[int, object]]) -> list[tuple[int, object]]:
        self.now = now
        for src, msg in inbound:
            self._dispatch(src, msg)
        for e in self.entries:
            self._inspect(e)
        self.abd.inspect_all()
        out = self.outbox
        self.outbox = []
        self._pull_clients()
        return out

    def _dispatch(self, src: int, msg) -> None:
        self.last_heard[src] = self.now
        if isinstance(msg, ProposeMsg):
            self.send(src, self.on_propose(msg))
        elif isinstance(msg, AcceptMsg):
            self.send(src, self.on_accept(msg))
        elif isinstance(msg, CommitMsg):
            self.on_commit(msg)
            self.send(src, CommitAckMsg(msg.lid))
        elif isinstance(msg, CommitAckMsg):
            self._fold_commit_ack(src, msg)
        elif isinstance(msg, ReplyMsg):
            e = self.entries[session_of_lid(msg.lid)]
            if e.lid == msg.lid and e.state in (EntryState.PROPOSED, EntryState.ACCEPTED):
                e.tally[src] = msg
        elif isinstance(msg, TsRequestMsg):
            self.send(src, self.abd.on_ts_request(msg))
        elif isinstance(msg, ReadMsg):
            self.send(src, self.abd.on_read(msg))
        elif isinstance(msg, WriteValueMsg):
            self.send(src, self.abd.on_write_value(msg))
        elif isinstance(msg, (TsReplyMsg, ReadReplyMsg, WriteAckMsg)):
            self.abd.fold(src, msg)
        else:
            raise TypeError(f"unroutable message {msg!r}")

    def _fold_commit_ack(self, src: int, msg: CommitAckMsg) -> None:
        e = self.entries[session_of_lid(msg.lid)]
        if e.state is EntryState.COMMITTED and e.lid == msg.lid:
            e.commit_acks.add(src)
        else:
            self.abd.fold_commit_ack(src, msg)

    # -- reply logic for inbound proposes/accepts/commits -------------------

    def on_propose(self, m: ProposeMsg) -> ReplyMsg:
        pair = self.kvs.pair(m.key)
        if self.kvs.is_registered(m.rmw_id):
            code = (ReplyCode.RMW_ID_COMMITTED_NO_BCAST
                    if pair.last_committed_log_no >= m.log_no
                    else ReplyCode.RMW_ID_COMMITTED)
            return ReplyMsg(m.lid, code)
        working = pair.working_log_no()
        if m.log_no < working:
            return ReplyMsg(m.lid, ReplyCode.LOG_TOO_LOW,
                            log_no=pair.last_committed_log_no,
                            rmw_id=pair.last_committed_rmw_id,
                            value=pair.value, base_ts=pair.base_ts)
        if m.log_no > working:
            return ReplyMsg(m.lid, ReplyCode.LOG_TOO_HIGH)
        if pair.state is PairState.PROPOSED and pair.proposed_ts >= m.ts:
            return ReplyMsg(m.lid, ReplyCode.SEEN_HIGHER_PROP, ts=pair.proposed_ts)
        if pair.state is PairState.ACCEPTED:
            if pair.proposed_ts >= m.ts:
                return ReplyMsg(m.lid, ReplyCode.SEEN_HIGHER_ACC, ts=pair.proposed_ts)
            if pair.rmw_id == m.rmw_id:
                # the proposer is retrying the RMW we already hold accepted
                pair.proposed_ts = m.ts
                return ReplyMsg(m.lid, ReplyCode.ACK)
            reply = ReplyMsg(m.lid, ReplyCode.SEEN_LOWER_ACC, ts=pair.accepted_ts,
                             rmw_id=pair.rmw_id, value=pair.accepted_value,
                             base_ts=pair.acc_base_ts)
            pair.proposed_ts = m.ts  # pair stays Accepted
            return reply
        # Invalid, or Proposed below the incoming TS: promise it
        stale = m.base_ts < pair.base_ts
        reply = (ReplyMsg(m.lid, ReplyCode.ACK_BASE_TS_STALE,
                          value=pair.value, base_ts=pair.base_ts)
                 if stale else ReplyMsg(m.lid, ReplyCode.ACK))
        pair.state = PairState.PROPOSED
        pair.rmw_id = m.rmw_id
        pair.log_no = m.log_no
        pair.proposed_ts = m.ts
        return reply

    def on_accept(self, m: AcceptMsg) -> ReplyMsg:
        pair = self.kvs.pair(m.key)
        if self.kvs.is_registered(m.rmw_id):
            code = (ReplyCode.RMW_ID_COMMITTED_NO_BCAST
                    if pair.last_committed_log_no >= m.log_no
                    else ReplyCode.RMW_ID_COMMITTED)
            return ReplyMsg(m.lid, code, is_accept_reply=True)
        working = pair.working_log_no()
        if m.log_no < working:
            return ReplyMsg(m.lid, ReplyCode.LOG_TOO_LOW, is_accept_reply=True,
                            log_no=pair.last_committed_log_no,
                            rmw_id=pair.last_committed_rmw_id,
                            value=pair.value, base_ts=pair.base_ts)
        if m.log_no > working:
            return ReplyMsg(m.lid, ReplyCode.LOG_TOO_HIGH, is_accept_reply=True)
        if pair.state is not PairState.INVALID and pair.proposed_ts > m.ts:
            code = (ReplyCode.SEEN_HIGHER_PROP if pair.state is PairState.PROPOSED
                    else ReplyCode.SEEN_HIGHER_ACC)
            return ReplyMsg(m.lid, code, is_accept_reply=True, ts=pair.proposed_ts)
        pair.state = PairState.ACCEPTED
        pair.rmw_id = m.rmw_id
        pair.log_no = m.log_no
        if m.ts > pair.proposed_ts:
            pair.proposed_ts = m.ts
        pair.accepted_ts = m.ts
        pair.accepted_value = m.value
        pair.acc_base_ts = m.base_ts
        return ReplyMsg(m.lid, ReplyCode.ACK, is_accept_reply=True)

    def on_commit(self, m: CommitMsg) -> None:
        self.apply_commit_and_trace(CommitInfo(m.key, m.log_no, m.rmw_id, m.value, m.base_ts))

    # -- entry inspection ----------------------------------------------------

    def _inspect(self, e: LocalEntry) -> None:
        if e.state is EntryState.INVALID:
            return
        if e.state is EntryState.PROPOSED:
            self._inspect_proposed(e)
        elif e.state is EntryState.ACCEPTED:
            self._inspect_accepted(e)
        elif e.state is EntryState.NEEDS_KV_PAIR:
            self._backoff_inspect(e)
        elif e.state is EntryState.RETRY_WITH_HIGHER_TS:
            self._retry(e)
        if e.state in (EntryState.BCAST_COMMITS, EntryState.BCAST_COMMITS_FROM_HELP):
            self._start_commit_broadcast(e)
        if e.state is EntryState.COMMITTED:
            self._inspect_committed(e)

    def _resend(self, e: LocalEntry) -> None:
        if self.now - e.last_bcast < self.cfg.resend_interval or e.outmsg is None:
            return
        for dst in self.peers:
            if dst not in e.tally:
                self.send(dst, e.outmsg)
        e.last_bcast = self.now

    def _inspect_proposed(self, e: LocalEntry) -> None:
        codes = {r.code for r in e.tally.values()}
        if not codes & _SHORT_CIRCUIT and len(e.tally) < self.cfg.quorum:
            self._resend(e)
            return
        if codes & _COMMITTED_CODES:
            self._rmw_id_committed(e, ReplyCode.RMW_ID_COMMITTED_NO_BCAST in codes)
            return
        if ReplyCode.LOG_TOO_LOW in codes:
            r = next(r for r in e.tally.values() if r.code is ReplyCode.LOG_TOO_LOW)
            self.apply_commit_and_trace(CommitInfo(e.key, r.log_no, r.rmw_id, r.value, r.base_ts))
            self._to_needs_kv(e)
            return
        if codes & _SEEN_HIGHER:
            e.retry_floor = max(r.ts.version for r in e.tally.values()
                                if r.code in _SEEN_HIGHER)
            e.retry_bump = True
            e.log_too_high_streak = 0
            self._to_retry(e)
            return
        acks = sum(1 for r in e.tally.values() if r.code in _ACK_CODES)
        if acks >= self.cfg.quorum:
            if not e.fresh_base_seen:
                for r in e.tally.values():
                    if r.code is ReplyCode.ACK_BASE_TS_STALE:
                        if e.base_candidate is None or r.base_ts > e.base_candidate[0]:
                            e.base_candidate = (r.base_ts, r.value)
                e.fresh_base_seen = True
            e.log_too_high_streak = 0
            self._local_accept_own(e)
            return
        slas = [r for r in e.tally.values() if r.code is ReplyCode.SEEN_LOWER_ACC]
        if slas:
            e.log_too_high_streak = 0
            cand = max(slas, key=lambda r: r.ts)
            if cand.rmw_id == e.rmw_id:
                self._self_help_accept(e)
            else:
                self._help_accept(e, cand)
            return
        if ReplyCode.LOG_TOO_HIGH in codes:
            e.log_too_high_streak += 1
            if e.log_too_high_streak >= self.cfg.log_too_high_limit:
                pair = self.kvs.pair(e.key)
                assert pair.last_committed_log_no >= 1
                e.help_rec = HelpRecord(pair.last_committed_rmw_id, pair.value,
                                        pair.last_committed_log_no, pair.base_ts, TS_ZERO)
                e.log_too_high_streak = 0
                e.state = EntryState.BCAST_COMMITS_FROM_HELP
                self.emit("state_transition", {"session": e.gsid,
                                               "reason": "log_too_high_recovery",
                                               "log": pair.last_committed_log_no})
            else:
                e.retry_bump = False
                e.retry_floor = 0
                self._to_retry(e)

    def _inspect_accepted(self, e: LocalEntry) -> None:
        if (e.helping is not HelpingFlag.HELPING
                and self.kvs.pair(e.key).last_committed_log_no >= e.log_no):
            # the slot we were accepting got committed under us; the retry
            # path resolves whether it was ours (registered) or not
            e.all_aboard = False
            e.path_all_aboard = False
            e.retry_bump = False
            e.retry_floor = 0
            self._to_retry(e)
            return
        codes = {r.code for r in e.tally.values()}
        acks = sum(1 for r in e.tally.values() if r.code is ReplyCode.ACK)
        nacks = codes - {ReplyCode.ACK}

        if e.helping is HelpingFlag.HELPING:
            if nacks:
                for r in e.tally.values():
                    if r.code is ReplyCode.LOG_TOO_LOW:
                        self.apply_commit_and_trace(
                            CommitInfo(e.key, r.log_no, r.rmw_id, r.value, r.base_ts))
                        break
                self.emit("state_transition", {"session": e.gsid, "reason": "help_cancelled"})
                self._to_needs_kv(e)
            elif acks >= self.cfg.quorum:
                self._decide_commit(e, thin=acks == self.cfg.machine_count, from_help=True)
            else:
                self._resend(e)
            return

        if e.all_aboard:
            if nacks:
                self._accept_nack_action(e, codes)
            elif acks == self.cfg.machine_count:
                self._decide_commit(e, thin=True, from_help=False)
            else:
                e.aa_timeout_counter += 1
                if e.aa_timeout_counter >= self.cfg.all_aboard_timeout:
                    e.all_aboard = False
                    e.path_all_aboard = False
                    e.retry_bump = True
                    e.retry_floor = 0
                    self._to_retry(e)
                else:
                    self._resend(e)
            return

        if codes & _COMMITTED_CODES:
            self._rmw_id_committed(e, ReplyCode.RMW_ID_COMMITTED_NO_BCAST in codes)
            return
        if ReplyCode.LOG_TOO_LOW in codes:
            r = next(r for r in e.tally.values() if r.code is ReplyCode.LOG_TOO_LOW)
            self.apply_commit_and_trace(CommitInfo(e.key, r.log_no, r.rmw_id, r.value, r.base_ts))
            self._to_needs_kv(e)
            return
        if len(e.tally) < self.cfg.quorum:
            self._resend(e)
            return
        if acks >= self.cfg.quorum:
            self._decide_commit(e, thin=acks == self.cfg.machine_count, from_help=False)
        elif codes & _SEEN_HIGHER:
            e.retry_floor = max(r.ts.version for r in e.tally.values() if r.code in _SEEN_HIGHER)
            e.retry_bump = True
            self._to_retry(e)
        elif ReplyCode.LOG_TOO_HIGH in codes:
            # accepts never trigger commit recovery, just a retry
            e.retry_bump = False
            e.retry_floor = 0
            self._to_retry(e)

    def _accept_nack_action(self, e: LocalEntry, codes: set) -> None:
        """All-aboard accepts react to the first nack without waiting for quorum."""
        e.all_aboard = False
        e.path_all_aboard = False
        if codes & _COMMITTED_CODES:
            self._rmw_id_committed(e, ReplyCode.RMW_ID_COMMITTED_NO_BCAST in codes)
            return
        if ReplyCode.LOG_TOO_LOW in codes:
            r = next(r for r in e.tally.values() if r.code is ReplyCode.LOG_TOO_LOW)
            self.apply_commit_and_trace(CommitInfo(e.key, r.log_no, r.rmw_id, r.value, r.base_ts))
            self._to_needs_kv(e)
            return
        e.retry_bump = True
        e.retry_floor = max((r.ts.version for r in e.tally.values() if r.code in _SEEN_HIGHER),
                            default=0)
        self._to_retry(e)

    # -- decisions -----------------------------------------------------------

    def _rmw_id_committed(self, e: LocalEntry, no_bcast: bool) -> None:
        assert e.accepted_log_no >= 1, "an RMW can only be helped after local accept"
        ci = CommitInfo(e.key, e.accepted_log_no, e.rmw_id, e.accepted_value, e.base_ts)
        self.apply_commit_and_trace(ci)
        pair = self.kvs.pair(e.key)
        if (e.accepted_log_no < e.log_no and pair.state is PairState.PROPOSED
                and pair.rmw_id == e.rmw_id and pair.log_no == e.log_no):
            # committed in an older slot; release the freshly grabbed pair
            pair.state = PairState.INVALID
            self.emit("state_transition", {"session": e.gsid, "reason": "release_unused_slot",
                                           "log": e.log_no})
        if no_bcast:
            self._complete(e)
        else:
            e.commit_wire = CommitMsg(e.key, 0, e.rmw_id, e.accepted_log_no,
                                      e.accepted_value, e.base_ts)
            e.commit_local = ci
            e.commit_applied_local = True
            e.commit_from_help = False
            e.state = EntryState.BCAST_COMMITS

    def _decide_commit(self, e: LocalEntry, thin: bool, from_help: bool) -> None:
        if from_help:
            h = e.help_rec
            ci = CommitInfo(e.key, h.log_no, h.rmw_id, h.value, h.acc_base_ts)
        else:
            ci = CommitInfo(e.key, e.accepted_log_no, e.rmw_id, e.accepted_value, e.base_ts)
        e.commit_local = ci
        e.commit_wire = CommitMsg(e.key, 0, ci.rmw_id, ci.log_no,
                                  None if thin else ci.value,
                                  None if thin else ci.base_ts)
        e.commit_applied_local = False
        e.commit_from_help = from_help
        e.state = (EntryState.BCAST_COMMITS_FROM_HELP if from_help
                   else EntryState.BCAST_COMMITS)

    def _start_commit_broadcast(self, e: LocalEntry) -> None:
        if e.state is EntryState.BCAST_COMMITS_FROM_HELP and e.commit_wire is None:
            # entered directly (log-too-high recovery): build from the help record
            h = e.help_rec
            ci = CommitInfo(e.key, h.log_no, h.rmw_id, h.value, h.acc_base_ts)
            e.commit_local = ci
            e.commit_wire = CommitMsg(e.key, 0, h.rmw_id, h.log_no, h.value, h.acc_base_ts)
            e.commit_applied_local = False
            e.commit_from_help = True
        e.lid = self.new_lid(e.session)
        wire = CommitMsg(e.commit_wire.key, e.lid, e.commit_wire.rmw_id,
                         e.commit_wire.log_no, e.commit_wire.value, e.commit_wire.base_ts)
        e.commit_wire = wire
        e.outmsg = wire
        e.tally = {}
        e.commit_acks = set()
        e.last_bcast = self.now
        for dst in self.peers:
            self.send(dst, wire)
        e.state = EntryState.COMMITTED

    def _inspect_committed(self, e: LocalEntry) -> None:
        if len(e.commit_acks) >= self.cfg.quorum - 1:
            if not e.commit_applied_local:
                self.apply_commit_and_trace(e.commit_local)
                e.commit_applied_local = True
            if e.commit_from_help:
                helped_self = e.help_rec is not None and e.help_rec.rmw_id == e.rmw_id
                e.helping = HelpingFlag.NOT_HELPING
                e.help_rec = None
                if helped_self:
                    self._complete(e)
                else:
                    self._to_needs_kv(e)
            else:
                self._complete(e)
            return
        if self.now - e.last_bcast >= self.cfg.resend_interval:
            for dst in self.peers:
                if dst not in e.commit_acks:
                    self.send(dst, e.outmsg)
            e.last_bcast = self.now

    def _complete(self, e: LocalEntry) -> None:
        self.emit("client_complete", {
            "session": e.gsid, "kind": e.op.kind.value, "key": e.key.hex(),
            "rmw": [e.rmw_id.counter, e.rmw_id.session],
            "result": None if e.read_result is None else e.read_result.hex(),
            "ok": e.cas_ok, "path": "all_aboard" if e.path_all_aboard else "cp",
            "invoked": e.invoke_tick})
        self.completed_ops += 1
        e.state = EntryState.INVALID
        e.reset_for_op()

    # -- local accepts -------------------------------------------------------

    def _local_accept_own(self, e: LocalEntry) -> None:
        if self.kvs.is_registered(e.rmw_id):
            self._rmw_id_committed(e, no_bcast=False)
            return
        pair = self.kvs.pair(e.key)
        own = (pair.state in (PairState.PROPOSED, PairState.ACCEPTED)
               and pair.rmw_id == e.rmw_id and pair.log_no == e.log_no
               and pair.proposed_ts == e.ts)
        overwrite = False
        if not own and e.helping is HelpingFlag.PROPOSE_LOCALLY_ACCEPTED:
            # proposed over a stuck accepted RMW and a majority of remote
            # machines acked without reporting any accept: the quorum blocks
            # the stuck RMW, so our own may take the slot
            remote_acks = sum(1 for src, r in e.tally.items()
                              if src != self.id and r.code in _ACK_CODES)
            overwrite = (pair.state is PairState.ACCEPTED and pair.log_no == e.log_no
                         and pair.proposed_ts == e.ts
                         and remote_acks >= self.cfg.quorum)
        if not (own or overwrite):
            self._to_needs_kv(e)
            return
        e.helping = HelpingFlag.NOT_HELPING
        pair.rmw_id = e.rmw_id
        if e.accepted_log_no != e.log_no:
            base, val = pair.base_ts, pair.value
            if e.base_candidate is not None and e.base_candidate[0] > base:
                base, val = e.base_candidate
            new_value, read_result, ok = rmw_compute(e.op, val, self.cfg.value_size)
            e.accepted_value = new_value
            e.base_ts = base
            e.read_result = read_result
            e.cas_ok = ok
            e.accepted_log_no = e.log_no
        pair.state = PairState.ACCEPTED
        pair.accepted_ts = e.ts
        pair.accepted_value = e.accepted_value
        pair.acc_base_ts = e.base_ts
        self._trace_local_accept(e, e.rmw_id, e.accepted_value, e.base_ts, helping=False)
        e.state = EntryState.ACCEPTED
        self._broadcast_accept(e, e.rmw_id, e.accepted_value, e.base_ts)

    def _self_help_accept(self, e: LocalEntry) -> None:
        pair = self.kvs.pair(e.key)
        if not (pair.state is PairState.ACCEPTED and pair.rmw_id == e.rmw_id
                and pair.log_no == e.log_no and pair.proposed_ts == e.ts):
            self._to_needs_kv(e)
            return
        assert e.accepted_log_no == e.log_no
        pair.accepted_ts = e.ts
        pair.accepted_value = e.accepted_value
        pair.acc_base_ts = e.base_ts
        e.helping = HelpingFlag.NOT_HELPING
        self._trace_local_accept(e, e.rmw_id, e.accepted_value, e.base_ts, helping=False)
        e.state = EntryState.ACCEPTED
        self._broadcast_accept(e, e.rmw_id, e.accepted_value, e.base_ts)

    def _help_accept(self, e: LocalEntry, cand: ReplyMsg) -> None:
        pair = self.kvs.pair(e.key)
        same_slot = pair.log_no == e.log_no
        ok = False
        if (same_slot and pair.state is PairState.PROPOSED and pair.rmw_id == e.rmw_id
                and pair.proposed_ts == e.ts):
            ok = True  # pair still proposed for us, exactly as we left it
        elif (pair.state is PairState.INVALID
              and pair.last_committed_log_no == e.log_no - 1):
            ok = True  # released without advancing its last committed slot
        elif (same_slot and pair.state is PairState.ACCEPTED and pair.proposed_ts <= e.ts
              and pair.rmw_id == cand.rmw_id):
            ok = True  # the stuck accepted RMW we timed out on
        elif (same_slot and pair.state is PairState.ACCEPTED and pair.proposed_ts <= e.ts
              and pair.rmw_id == e.rmw_id and cand.ts > pair.accepted_ts):
            ok = True  # our own accept is outranked by the one we must help
        if not ok:
            self.emit("state_transition", {"session": e.gsid, "reason": "help_cancelled"})
            self._to_needs_kv(e)
            return
        e.helping = HelpingFlag.HELPING
        e.help_rec = HelpRecord(cand.rmw_id, cand.value, e.log_no, cand.base_ts, cand.ts)
        pair.state = PairState.ACCEPTED
        pair.rmw_id = cand.rmw_id
        pair.log_no = e.log_no
        if e.ts > pair.proposed_ts:
            pair.proposed_ts = e.ts
        pair.accepted_ts = e.ts
        pair.accepted_value = cand.value
        pair.acc_base_ts = cand.base_ts
        self._trace_local_accept(e, cand.rmw_id, cand.value, cand.base_ts, helping=True)
        e.state = EntryState.ACCEPTED
        self._broadcast_accept(e, cand.rmw_id, cand.value, cand.base_ts)

    def _trace_local_accept(self, e, rmw_id, value, base_ts, helping):
        self.emit("local_accept", {
            "key": e.key.hex(), "log": e.log_no,
            "rmw": [rmw_id.counter, rmw_id.session],
            "ts": [e.ts.version, e.ts.machine_id],
            "value": value.hex(), "base": [base_ts.version, base_ts.machine_id],
            "helping": helping, "aa": e.all_aboard})

    # -- back-off, stealing, retrying ----------------------------------------

    def _to_needs_kv(self, e: LocalEntry) -> None:
        e.state = EntryState.NEEDS_KV_PAIR
        e.helping = HelpingFlag.NOT_HELPING
        e.observed_fp = self.kvs.pair(e.key).fingerprint()
        e.back_off_counter = 0
        e.all_aboard = False

    def _to_retry(self, e: LocalEntry) -> None:
        e.state = EntryState.RETRY_WITH_HIGHER_TS
        self.emit("retry", {"session": e.gsid, "key": e.key.hex(), "log": e.log_no,
                            "lid": e.lid, "floor": e.retry_floor, "bump": e.retry_bump})

    def _backoff_inspect(self, e: LocalEntry) -> None:
        if e.accepted_log_no >= 1 and self.kvs.is_registered(e.rmw_id):
            # got helped while waiting; finish instead of grabbing again
            self._rmw_id_committed(e, no_bcast=False)
            return
        pair = self.kvs.pair(e.key)
        if pair.state is PairState.INVALID:
            self._grab_and_propose(e, Timestamp(CP_START_VERSION, self.id))
            return
        if pair.state is PairState.PROPOSED and pair.rmw_id == e.rmw_id:
            # the stale holder is this very session; no point deferring to it
            ts = Timestamp(max(CP_START_VERSION, pair.proposed_ts.version + 1), self.id)
            pair.proposed_ts = ts
            e.ts = ts
            e.log_no = pair.log_no
            e.log_too_high_streak = 0
            e.state = EntryState.PROPOSED
            self._broadcast_propose(e)
            return
        fp = pair.fingerprint()
        if fp != e.observed_fp:
            e.observed_fp = fp
            e.back_off_counter = 0
            return
        e.back_off_counter += 1
        if e.back_off_counter < self.cfg.back_off_threshold:
            return
        e.back_off_counter = 0
        ts = Timestamp(max(CP_START_VERSION, pair.proposed_ts.version + 1), self.id)
        if pair.state is PairState.PROPOSED:
            # stale holder: steal the slot
            pair.rmw_id = e.rmw_id
            pair.proposed_ts = ts
            e.ts = ts
            e.log_no = pair.log_no
            e.log_too_high_streak = 0
            self.emit("state_transition", {"session": e.gsid, "reason": "steal",
                                           "key": e.key.hex(), "log": e.log_no})
            e.state = EntryState.PROPOSED
            self._broadcast_propose(e)
        else:
            # accepted RMWs cannot be stolen; propose over them to help
            pair.proposed_ts = ts
            e.ts = ts
            e.log_no = pair.log_no
            e.log_too_high_streak = 0
            e.helping = HelpingFlag.PROPOSE_LOCALLY_ACCEPTED
            self.emit("state_transition", {"session": e.gsid, "reason": "help_after_wait",
                                           "key": e.key.hex(), "log": e.log_no})
            e.state = EntryState.PROPOSED
            self._broadcast_propose(e, self_reply=ReplyMsg(
                0, ReplyCode.SEEN_LOWER_ACC, ts=pair.accepted_ts, rmw_id=pair.rmw_id,
                value=pair.accepted_value, base_ts=pair.acc_base_ts))

    def _retry(self, e: LocalEntry) -> None:
        if self.kvs.is_registered(e.rmw_id):
            self._rmw_id_committed(e, no_bcast=False)
            return
        pair = self.kvs.pair(e.key)
        ver = e.ts.version
        if e.retry_bump:
            ver = max(ver, e.retry_floor) + 1
        ver = max(ver, CP_START_VERSION)
        if (pair.state is PairState.PROPOSED and pair.rmw_id == e.rmw_id
                and pair.log_no == e.log_no):
            ts = Timestamp(ver, self.id)
            pair.proposed_ts = ts
            e.ts = ts
            e.state = EntryState.PROPOSED
            self._broadcast_propose(e)
        elif (pair.state is PairState.ACCEPTED and pair.rmw_id == e.rmw_id
              and pair.log_no == e.log_no):
            # still accepted locally: propose again and prepare to help ourselves
            ver = max(ver, pair.proposed_ts.version + 1)
            ts = Timestamp(ver, self.id)
            pair.proposed_ts = ts
            e.ts = ts
            e.helping = HelpingFlag.PROPOSE_LOCALLY_ACCEPTED
            e.state = EntryState.PROPOSED
            self._broadcast_propose(e, self_reply=ReplyMsg(
                0, ReplyCode.SEEN_LOWER_ACC, ts=pair.accepted_ts, rmw_id=e.rmw_id,
                value=pair.accepted_value, base_ts=pair.acc_base_ts))
        elif pair.state is PairState.INVALID:
            self._grab_and_propose(e, Timestamp(ver, self.id))
        else:
            self._to_needs_kv(e)

    def _grab_and_propose(self, e: LocalEntry, ts: Timestamp) -> None:
        pair = self.kvs.pair(e.key)
        slot = pair.working_log_no()
        pair.state = PairState.PROPOSED
        pair.rmw_id = e.rmw_id
        pair.log_no = slot
        pair.proposed_ts = ts
        e.ts = ts
        e.log_no = slot
        e.helping = HelpingFlag.NOT_HELPING
        e.log_too_high_streak = 0
        e.fresh_base_seen = False
        e.state = EntryState.PROPOSED
        self._broadcast_propose(e)

    def _broadcast_propose(self, e: LocalEntry, self_reply: ReplyMsg | None = None) -> None:
        e.lid = self.new_lid(e.session)
        pair = self.kvs.pair(e.key)
        base = pair.base_ts
        if e.base_candidate is not None and e.base_candidate[0] > base:
            base = e.base_candidate[0]
        msg = ProposeMsg(e.key, e.lid, e.rmw_id, e.log_no, e.ts, base)
        e.outmsg = msg
        e.last_bcast = self.now
        for dst in self.peers:
            self.send(dst, msg)
        if self_reply is None:
            self_reply = ReplyMsg(e.lid, ReplyCode.ACK)
        else:
            self_reply = ReplyMsg(e.lid, self_reply.code, ts=self_reply.ts,
                                  rmw_id=self_reply.rmw_id, value=self_reply.value,
                                  base_ts=self_reply.base_ts)
        e.tally = {self.id: self_reply}

    def _broadcast_accept(self, e: LocalEntry, rmw_id, value, base_ts) -> None:
        e.lid = self.new_lid(e.session)
        msg = AcceptMsg(e.key, e.lid, rmw_id, e.log_no, e.ts, base_ts, value)
        e.outmsg = msg
        e.last_bcast = self.now
        for dst in self.peers:
            self.send(dst, msg)
        e.tally = {self.id: ReplyMsg(e.lid, ReplyCode.ACK, is_accept_reply=True)}

    # -- client request intake -----------------------------------------------

    def _pull_clients(self) -> None:
        for s, e in enumerate(self.entries):
            if not self.pending_ops[s]:
                continue
            if e.state is not EntryState.INVALID or not self.abd.idle(s):
                continue
            op = self.pending_ops[s].popleft()
            if op.kind in ("cas", "faa"):
                self._start_rmw(s, op)
            elif op.kind == "write":
                self.abd.start_write(s, op.key, op.value)
            elif op.kind == "read":
                self.abd.start_read(s, op.key)
            else:
                raise ConfigError(f"unknown op kind {op.kind}")

    def _start_rmw(self, session: int, op: ClientOp) -> None:
        e = self.entries[session]
        self.rmw_counters[session] += 1
        e.reset_for_op()
        e.rmw_id = RmwId(self.rmw_counters[session], e.gsid)
        e.key = op.key
        e.op = (RmwOp(RmwKind.CAS, op.compare, op.value) if op.kind == "cas"
                else RmwOp(RmwKind.FAA, None, op.value))
        e.invoke_tick = self.now
        self.emit("client_invoke", {
            "session": e.gsid, "kind": op.kind, "key": op.key.hex(),
            "rmw": [e.rmw_id.counter, e.rmw_id.session],
            "value": op.value.hex(),
            "compare": None if op.compare is None else op.compare.hex()})
        pair = self.kvs.pair(e.key)
        if pair.state is not PairState.INVALID:
            self.emit("state_transition", {"session": e.gsid, "reason": "blocked",
                                           "key": e.key.hex()})
            self._to_needs_kv(e)
            return
        if self._all_aboard_ok():
            slot = pair.working_log_no()
            ts = Timestamp(ALL_ABOARD_VERSION, self.id)
            new_value, read_result, ok = rmw_compute(e.op, pair.value, self.cfg.value_size)
            e.ts = ts
            e.log_no = slot
            e.accepted_value = new_value
            e.accepted_log_no = slot
            e.base_ts = pair.base_ts
            e.read_result = read_result
            e.cas_ok = ok
            e.all_aboard = True
            e.path_all_aboard = True
            pair.state = PairState.ACCEPTED
            pair.rmw_id = e.rmw_id
            pair.log_no = slot
            pair.proposed_ts = ts
            pair.accepted_ts = ts
            pair.accepted_value = new_value
            pair.acc_base_ts = pair.base_ts
            self._trace_local_accept(e, e.rmw_id, new_value, e.base_ts, helping=False)
            e.state = EntryState.ACCEPTED
            self._broadcast_accept(e, e.rmw_id, new_value, e.base_ts)
        else:
            self._grab_and_propose(e, Timestamp(CP_START_VERSION, self.id))

    def _all_aboard_ok(self) -> bool:
        if not self.cfg.all_aboard_enabled:
            return False
        return all(self.now - t <= self.cfg.suspect_window for t in self.last_heard.values())
