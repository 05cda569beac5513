"""Exhaustive exploration of message delivery interleavings on a small model.

Branches on which pending message is delivered next; between deliveries every
machine runs until quiescent, so purely local progress does not blow up the
state space. Visited states are memoized together with the decided-slot map,
which keeps slot agreement and exactly-once checkable across merged paths.
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from enum import Enum

from .core import int_to_value
from .engine import ClientOp, EngineConfig, Machine

# rounds of silence after which a machine set counts as quiescent; any
# pending internal transition emits within one round of going silent (decide
# then send, complete then pull then send), so two silent rounds are enough
QUIET_ROUNDS = 2
QUIESCE_BOUND = 200


class _Collector:
    """Trace stand-in that only retains the events the explorer verifies."""

    KEEP = ("commit_applied", "local_accept", "client_complete")

    def __init__(self):
        self.buf = []

    def emit(self, tick, machine, kind, payload):
        if kind in self.KEEP:
            self.buf.append((kind, machine, payload))

    def drain(self):
        out = self.buf
        self.buf = []
        return out


@dataclass
class ExploreStats:
    states: int = 0
    leaves: int = 0
    truncated: int = 0
    stuck: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and self.stuck == 0 and self.leaves > 0


def _freeze(obj):
    if isinstance(obj, Enum):
        return obj.name
    if isinstance(obj, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in obj.items()))
    if isinstance(obj, (list, tuple)):
        return tuple(_freeze(v) for v in obj)
    if isinstance(obj, set):
        return tuple(sorted(_freeze(v) for v in obj))
    if hasattr(obj, "__dict__"):
        # timers are disabled in the explorer, so the counters driving them
        # are inert and must not split states
        return tuple(sorted((k, _freeze(v)) for k, v in vars(obj).items()
                            if k not in ("trace", "m", "cfg",
                                         "back_off_counter", "aa_timeout_counter",
                                         "last_bcast", "invoke_tick")))
    return obj


def _machine_key(m: Machine):
    pairs = tuple(sorted((k, _freeze(p)) for k, p in m.kvs.pairs.items()))
    return (pairs, tuple(m.kvs.registered.highest), _freeze(m.entries),
            _freeze(m.abd.sessions), tuple(m.lid_counters), tuple(m.rmw_counters),
            tuple(tuple(q) for q in m.pending_ops), m.write_version, m.completed_ops)


def explore(machine_count: int = 3, ops: dict[int, ClientOp] | None = None,
            max_depth: int = 48, max_states: int = 400_000,
            all_aboard: bool = True) -> ExploreStats:
    """Run every delivery interleaving of the given single-key contention.

    ops maps machine id to the one RMW that machine's only session issues.
    """
    if ops is None:
        key = (7).to_bytes(8, "little")
        ops = {0: ClientOp("faa", key, int_to_value(1)),
               1: ClientOp("faa", key, int_to_value(2))}
    cfg = EngineConfig(machine_count=machine_count, sessions_per_machine=1,
                       back_off_threshold=10 ** 9, all_aboard_timeout=10 ** 9,
                       resend_interval=10 ** 9, suspect_window=10 ** 9,
                       all_aboard_enabled=all_aboard)
    collector = _Collector()
    machines = [Machine(i, cfg, collector) for i in range(machine_count)]
    for mid, op in ops.items():
        machines[mid].pending_ops[0].append(op)
    total_ops = len(ops)

    stats = ExploreStats()
    decided: dict = {}  # (key, log) -> (rmw, value, base)
    slot_of_rmw: dict = {}

    def apply_events(events) -> bool:
        for kind, machine, p in events:
            if kind != "commit_applied":
                continue
            slot = (p["key"], p["log"])
            rec = (tuple(p["rmw"]), p["value"], None if p["base"] is None
                   else tuple(p["base"]))
            old = decided.get(slot)
            if old is None:
                decided[slot] = rec
            elif old[0] != rec[0] or (rec[1] is not None and old[1] is not None
                                      and old[1:] != rec[1:]):
                stats.violations.append(("slot_disagreement", slot, old, rec))
                return False
            rmw = tuple(p["rmw"])
            prev = slot_of_rmw.get(rmw)
            if prev is None:
                slot_of_rmw[rmw] = slot
            elif prev != slot:
                stats.violations.append(("double_commit", rmw, prev, slot))
                return False
        return True

    def quiesce(ms: list[Machine], pending: list) -> bool:
        quiet = 0
        for _ in range(QUIESCE_BOUND):
            emitted = False
            for m in ms:
                out = m.tick(m.now + 1, ())
                for dst, msg in out:
                    pending.append((m.id, dst, msg))
                    emitted = True
            if not apply_events(collector.drain()):
                return False
            quiet = 0 if emitted else quiet + 1
            if quiet >= QUIET_ROUNDS:
                return True
        raise RuntimeError("machines did not quiesce; timers not disabled?")

    def prune_inert(ms: list[Machine], pending: list) -> list:
        """Discard replies whose target already moved to a newer broadcast.

        Delivering them is a no-op for every reachable future (lids only move
        forward), so they only multiply interleavings.
        """
        from .engine import EntryState
        from .messages import (CommitAckMsg, ReadReplyMsg, ReplyMsg,
                               TsReplyMsg, WriteAckMsg)
        from .abd import AbdPhase

        def inert(dst: Machine, msg) -> bool:
            if isinstance(msg, ReplyMsg):
                e = dst.entries[msg.lid & ((1 << 10) - 1)]
                return not (e.lid == msg.lid and
                            e.state in (EntryState.PROPOSED, EntryState.ACCEPTED))
            if isinstance(msg, CommitAckMsg):
                e = dst.entries[msg.lid & ((1 << 10) - 1)]
                s = dst.abd.sessions[msg.lid & ((1 << 10) - 1)]
                return not ((e.state is EntryState.COMMITTED and e.lid == msg.lid)
                            or (s.phase is AbdPhase.READ_COMMIT and s.lid == msg.lid))
            if isinstance(msg, (ReadReplyMsg, TsReplyMsg, WriteAckMsg)):
                s = dst.abd.sessions[msg.lid & ((1 << 10) - 1)]
                return s.lid != msg.lid
            return False

        return [(src, dst, msg) for src, dst, msg in pending
                if not inert(ms[dst], msg)]

    def clone(ms: list[Machine]) -> list[Machine]:
        for m in ms:
            m.trace = None
        blob = pickle.dumps(ms, protocol=pickle.HIGHEST_PROTOCOL)
        for m in ms:
            m.trace = collector
        ms2 = pickle.loads(blob)
        for m in ms2:
            m.trace = collector
        return ms2

    def snapshot(ms, pending):
        return (tuple(_machine_key(m) for m in ms),
                tuple(sorted((s, d, repr(msg)) for s, d, msg in pending)),
                tuple(sorted(decided.items())),
                tuple(sorted(slot_of_rmw.items())))

    seen: set = set()

    def dfs(ms: list[Machine], pending: list, depth: int) -> None:
        if stats.violations or stats.states >= max_states:
            return
        done = sum(m.completed_ops for m in ms)
        if done >= total_ops:
            stats.leaves += 1
            return
        if not pending:
            stats.stuck += 1
            stats.violations.append(("stuck", depth))
            return
        if depth >= max_depth:
            stats.truncated += 1
            return
        key = snapshot(ms, pending)
        if key in seen:
            return
        seen.add(key)
        stats.states += 1
        tried = set()
        for i, (src, dst, msg) in enumerate(pending):
            sig = (src, dst, repr(msg))
            if sig in tried:
                continue
            tried.add(sig)
            saved_decided = dict(decided)
            saved_slots = dict(slot_of_rmw)
            ms2 = clone(ms)
            pend2 = pending[:i] + pending[i + 1:]
            out = ms2[dst].tick(ms2[dst].now + 1, [(src, msg)])
            for d2, m2 in out:
                pend2.append((dst, d2, m2))
            ok = apply_events(collector.drain()) and quiesce(ms2, pend2)
            if ok:
                dfs(ms2, prune_inert(ms2, pend2), depth + 1)
            decided.clear()
            decided.update(saved_decided)
            slot_of_rmw.clear()
            slot_of_rmw.update(saved_slots)
            if stats.violations and stats.violations[0][0] != "stuck":
                return

    if not quiesce(machines, pending := []):
        return stats
    dfs(machines, prune_inert(machines, pending), 0)
    return stats
