"""Offline safety and liveness oracles over traces.

Each checker is a pure function of the trace and returns a Verdict carrying a
minimal counter-witness on failure. Re-running a checker on the same trace
always yields the same verdict.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .core import session_of_lid, value_to_int


@dataclass
class Verdict:
    name: str
    ok: bool | None  # None: checker refused (advisory), does not fail a run
    details: list[str] = field(default_factory=list)

    def __str__(self):
        state = "PASS" if self.ok else ("REFUSED" if self.ok is None else "FAIL")
        out = f"{self.name}: {state}"
        if self.details:
            out += "\n  " + "\n  ".join(self.details[:8])
        return out


def _fail(name, details):
    return Verdict(name, False, details)


def check_exactly_once(trace) -> Verdict:
    """Every rmw-id commits into at most one (key, slot); every completed RMW
    into exactly one."""
    slots: dict[tuple, set] = {}
    for r in trace:
        if r.kind == "commit_applied":
            rmw = tuple(r.p["rmw"])
            if rmw[0] == 0:
                continue
            slots.setdefault(rmw, set()).add((r.p["key"], r.p["log"]))
    bad = [f"rmw {rmw} committed at slots {sorted(s)}"
           for rmw, s in slots.items() if len(s) > 1]
    if bad:
        return _fail("exactly_once", bad)
    for r in trace:
        if r.kind == "client_complete" and r.p["kind"] in ("cas", "faa"):
            rmw = tuple(r.p["rmw"])
            if len(slots.get(rmw, ())) != 1:
                bad.append(f"completed rmw {rmw} has {len(slots.get(rmw, ()))} slots")
    if bad:
        return _fail("exactly_once", bad)
    return Verdict("exactly_once", True,
                   [f"{len(slots)} committed rmw-ids, one slot each"])


def check_slot_agreement(trace) -> Verdict:
    """All commits of one (key, slot) name the same rmw-id, and any two
    updates sharing a carstamp carry the same bytes."""
    details = []
    rmw_by_slot: dict[tuple, tuple] = {}
    value_by_commit_stamp: dict[tuple, str] = {}
    value_by_write_stamp: dict[tuple, str] = {}
    for r in trace:
        if r.kind == "commit_applied":
            slot = (r.p["key"], r.p["log"])
            rmw = tuple(r.p["rmw"])
            if slot in rmw_by_slot and rmw_by_slot[slot] != rmw:
                details.append(f"slot {slot}: rmw {rmw_by_slot[slot]} vs {rmw} (seq {r.seq})")
            rmw_by_slot[slot] = rmw
            if r.p["value"] is not None:
                stamp = (r.p["key"], tuple(r.p["base"]), r.p["log"])
                v = value_by_commit_stamp.setdefault(stamp, r.p["value"])
                if v != r.p["value"]:
                    details.append(f"carstamp {stamp}: value {v} vs {r.p['value']} (seq {r.seq})")
        elif r.kind == "write_applied":
            stamp = (r.p["key"], tuple(r.p["base"]))
            v = value_by_write_stamp.setdefault(stamp, r.p["value"])
            if v != r.p["value"]:
                details.append(f"write base {stamp}: value {v} vs {r.p['value']} (seq {r.seq})")
        elif r.kind == "protocol_violation":
            details.append(f"protocol violation at seq {r.seq}: {r.p}")
    if details:
        return _fail("slot_agreement", details)
    return Verdict("slot_agreement", True, [f"{len(rmw_by_slot)} decided slots agree"])


def check_paper_invariants(trace) -> Verdict:
    """Trace forms of the three protocol invariants.

    inv-1: work on slot X only after commits (anywhere) of every slot < X.
    inv-2: a machine works on slot X only after locally committing X-1.
    inv-3: no local accept of an RMW at slot X after it committed at Y < X.
    """
    details = []
    contiguous: dict[str, int] = {}
    committed: dict[str, set] = {}
    local_lc: dict[tuple, int] = {}
    rmw_slot_min: dict[tuple, int] = {}
    for r in trace:
        if r.kind == "send" and r.p.get("kind") in ("propose", "accept"):
            key, x = r.p["key"], r.p["log"]
            if x - 1 > contiguous.get(key, 0):
                details.append(
                    f"inv-1: seq {r.seq} machine {r.machine} sent {r.p['kind']} for "
                    f"({key}, {x}) but only slots <= {contiguous.get(key, 0)} committed")
            if x - 1 > local_lc.get((r.machine, key), 0):
                details.append(
                    f"inv-2: seq {r.seq} machine {r.machine} sent {r.p['kind']} for "
                    f"({key}, {x}) knowing only slot {local_lc.get((r.machine, key), 0)}")
        elif r.kind == "local_accept":
            rmw = tuple(r.p["rmw"])
            if rmw in rmw_slot_min and rmw_slot_min[rmw] < r.p["log"]:
                details.append(
                    f"inv-3: seq {r.seq} machine {r.machine} locally accepted rmw {rmw} "
                    f"at slot {r.p['log']} after it committed at {rmw_slot_min[rmw]}")
        elif r.kind == "commit_applied":
            key, x = r.p["key"], r.p["log"]
            s = committed.setdefault(key, set())
            s.add(x)
            c = contiguous.get(key, 0)
            while c + 1 in s:
                c += 1
            contiguous[key] = c
            mk = (r.machine, key)
            if r.p["lc_after"] > local_lc.get(mk, 0):
                local_lc[mk] = r.p["lc_after"]
            rmw = tuple(r.p["rmw"])
            if rmw[0] != 0:
                if rmw not in rmw_slot_min or x < rmw_slot_min[rmw]:
                    rmw_slot_min[rmw] = x
        if len(details) > 20:
            break
    if details:
        return _fail("paper_invariants", details)
    return Verdict("paper_invariants", True, ["inv-1, inv-2, inv-3 hold at every event"])


def check_ts_discipline(trace) -> Verdict:
    """Fast-path accepts use the reserved version; proposes sit strictly above
    it; every retried propose outranks the nacks its predecessor received.

    A nack counts as received only if it was the sender's latest reply for the
    entry's in-flight lid when the retry was decided; later deliveries are
    stale and dropped by the engine.
    """
    details = []
    # (dst machine, lid) -> {src: latest (code, ts) in trace order}
    last_reply: dict[tuple, dict] = {}
    retries: list[tuple] = []  # (machine, session, lid, floor, bump, seq, nack_ts...)
    proposes: dict[tuple, list] = {}  # (machine, session) -> [(seq, rmw, key, log, ts)]
    fast_accepts: set[tuple] = set()  # (machine, key, log, rmw) accepted via fast path
    for r in trace:
        if r.kind == "local_accept":
            ver = r.p["ts"][0]
            if r.p["aa"]:
                if ver != 2:
                    details.append(f"seq {r.seq}: fast-path accept version {ver}")
                fast_accepts.add((r.machine, r.p["key"], r.p["log"], tuple(r.p["rmw"])))
            elif ver < 3:
                details.append(f"seq {r.seq}: regular local accept version {ver}")
        elif r.kind == "send":
            k = r.p.get("kind")
            if k == "propose":
                if r.p["ts"][0] < 3:
                    details.append(f"seq {r.seq}: propose with version {r.p['ts'][0]}")
                sess = session_of_lid(r.p["lid"])
                proposes.setdefault((r.machine, sess), []).append(
                    (r.seq, tuple(r.p["rmw"]), r.p["key"], r.p["log"], tuple(r.p["ts"])))
            elif k == "accept":
                ver = r.p["ts"][0]
                if ver == 2:
                    if (r.machine, r.p["key"], r.p["log"],
                            tuple(r.p["rmw"])) not in fast_accepts:
                        details.append(f"seq {r.seq}: version-2 accept without a "
                                       f"fast-path local accept")
                elif ver < 3:
                    details.append(f"seq {r.seq}: accept with version {ver}")
        elif r.kind == "deliver" and r.p.get("kind") == "reply":
            last_reply.setdefault((r.machine, r.p["lid"]), {})[r.p["src"]] = (
                r.p["code"], tuple(r.p["ts"]) if "ts" in r.p else None)
        elif r.kind == "retry":
            nacks = [v[1] for v in last_reply.get((r.machine, r.p["lid"]), {}).values()
                     if v[0] in ("seen_higher_prop", "seen_higher_acc")]
            retries.append((r.machine, r.p["session"], r.p["lid"], r.p["floor"],
                            r.p["bump"], r.seq, nacks,
                            r.p["key"], r.p["log"]))
    for machine, gsid, lid, floor, bump, seq, nacks, key, log in retries:
        sess = session_of_lid(lid)
        nxt = next((p for p in proposes.get((machine, sess), ())
                    if p[0] > seq and p[2] == key), None)
        if nxt is None:
            continue
        _, rmw, _, nlog, ts = nxt
        for nack in nacks:
            if nlog == log and ts <= nack:
                details.append(
                    f"machine {machine} session {gsid}: retried propose for "
                    f"({key}, {log}) at ts {ts} does not exceed received nack {nack}")
    if details:
        return _fail("ts_discipline", details)
    return Verdict("ts_discipline", True, ["timestamp discipline holds"])


def check_carstamp_visibility(trace, snapshots) -> Verdict:
    """Replaying each machine's applied updates reproduces its final value,
    and machines sharing a final carstamp hold identical bytes."""
    details = []
    state: dict[tuple, tuple] = {}  # (machine, key) -> (base, lc, value)
    for r in trace:
        if r.kind == "commit_applied":
            mk = (r.machine, r.p["key"])
            base, lc, value = state.get(mk, ((1, 0), 0, None))
            if r.p["value"] is not None:
                cb = tuple(r.p["base"])
                if (cb, r.p["log"]) > (base, lc):
                    base, value = cb, r.p["value"]
            if r.p["log"] > lc:
                lc = r.p["log"]
            state[mk] = (base, lc, value)
        elif r.kind == "write_applied":
            mk = (r.machine, r.p["key"])
            base, lc, value = state.get(mk, ((1, 0), 0, None))
            wb = tuple(r.p["base"])
            if wb > base:
                base, value = wb, r.p["value"]
            state[mk] = (base, lc, value)
    finals: dict[tuple, dict] = {}
    for machine, snap in enumerate(snapshots):
        for key, p in snap["pairs"].items():
            mk = (machine, key)
            base, lc, value = state.get(mk, ((1, 0), 0, None))
            if (tuple(p["base_ts"]) != base or p["last_committed_log_no"] != lc
                    or (value is not None and p["value"] != value)):
                details.append(
                    f"machine {machine} key {key}: snapshot "
                    f"({p['base_ts']}, {p['last_committed_log_no']}) != replay ({base}, {lc})")
            stamp = (key, tuple(p["base_ts"]), p["last_committed_log_no"])
            other = finals.setdefault(stamp, {"value": p["value"], "machine": machine})
            if other["value"] != p["value"]:
                details.append(
                    f"key {key}: machines {other['machine']} and {machine} share carstamp "
                    f"{stamp[1:]} with different values")
    if details:
        return _fail("carstamp_visibility", details)
    return Verdict("carstamp_visibility", True,
                   ["every machine holds its max-carstamp update"])


def check_message_conservation(trace) -> Verdict:
    """Every deliver/drop references a prior send; crashed machines are silent."""
    details = []
    sends = set()
    crashed_at: dict[int, int] = {}
    windows: dict[int, list] = {}
    for r in trace:
        if r.kind == "send":
            sends.add(r.seq)
        elif r.kind in ("deliver", "drop"):
            if r.p["ref"] not in sends:
                details.append(f"seq {r.seq}: {r.kind} references unknown send {r.p['ref']}")
        if r.kind == "crash":
            crashed_at[r.machine] = r.tick
        elif r.kind == "recover":
            windows.setdefault(r.machine, []).append((crashed_at.pop(r.machine), r.tick))
    for m, t in crashed_at.items():
        windows.setdefault(m, []).append((t, None))
    for r in trace:
        if r.machine < 0 or r.kind in ("crash", "recover", "drop"):
            continue
        for lo, hi in windows.get(r.machine, ()):
            if r.tick > lo and (hi is None or r.tick < hi):
                details.append(f"seq {r.seq}: {r.kind} from machine {r.machine} while crashed")
    if details:
        return _fail("message_conservation", details)
    return Verdict("message_conservation", True, [f"{len(sends)} sends accounted for"])


# -- linearizability ---------------------------------------------------------

@dataclass
class HistoryOp:
    session: int
    key: str
    kind: str
    invoke: int
    complete: int | None = None
    result: str | None = None
    ok: bool = True
    value: str | None = None  # write value / cas swap / faa delta
    compare: str | None = None


def extract_history(trace) -> list[HistoryOp]:
    """Client op timeline, matched per session (sessions are sequential)."""
    ops: list[HistoryOp] = []
    open_by_session: dict[int, HistoryOp] = {}
    for r in trace:
        if r.kind == "client_invoke":
            op = HistoryOp(r.p["session"], r.p["key"], r.p["kind"], r.tick,
                           value=r.p.get("value"), compare=r.p.get("compare"))
            ops.append(op)
            open_by_session[r.p["session"]] = op
        elif r.kind == "client_complete":
            op = open_by_session.pop(r.p["session"], None)
            if op is not None:
                op.complete = r.tick
                op.result = r.p["result"]
                op.ok = r.p["ok"]
    return ops


def check_linearizability(history: list[HistoryOp], value_size: int = 32,
                          max_ops_per_key: int = 12) -> Verdict:
    """Exhaustive sequential-witness search per key with memoized pruning."""
    details = []
    by_key: dict[str, list[HistoryOp]] = {}
    for op in history:
        by_key.setdefault(op.key, []).append(op)
    zero = bytes(value_size).hex()
    for key, ops in by_key.items():
        if len(ops) > max_ops_per_key:
            return Verdict("linearizability", None,
                           [f"key {key} has {len(ops)} ops; witness search is "
                            f"exponential and refuses above {max_ops_per_key} "
                            f"(shrink the workload)"])
        if not _linearizable(ops, zero):
            details.append(f"key {key}: no sequential witness over {len(ops)} ops")
    if details:
        return _fail("linearizability", details)
    return Verdict("linearizability", True,
                   [f"{len(by_key)} keys linearizable"])


def _apply(op: HistoryOp, state: str):
    """Replay one op on a sequential register; None means a completed op's
    recorded result contradicts this placement."""
    if op.kind == "read":
        if op.complete is not None and op.result != state:
            return None
        return state
    if op.kind == "write":
        return op.value
    if op.kind == "cas":
        succ = state == op.compare
        if op.complete is not None and (succ != op.ok or op.result != state):
            return None
        return op.value if succ else state
    # faa
    if op.complete is not None and op.result != state:
        return None
    total = (value_to_int(bytes.fromhex(state)) + value_to_int(bytes.fromhex(op.value)))
    new = (total % (1 << 64)).to_bytes(8, "little") + bytes.fromhex(state)[8:]
    return new.hex()


def _linearizable(ops: list[HistoryOp], zero: str) -> bool:
    n = len(ops)
    completed_mask = 0
    preds = [0] * n
    for i, a in enumerate(ops):
        if a.complete is not None:
            completed_mask |= 1 << i
        for j, b in enumerate(ops):
            if b.complete is not None and b.complete < a.invoke:
                preds[i] |= 1 << j
    seen: set[tuple[int, str]] = set()

    def dfs(done: int, state: str) -> bool:
        if done & completed_mask == completed_mask:
            return True
        if (done, state) in seen:
            return False
        seen.add((done, state))
        for i in range(n):
            bit = 1 << i
            if done & bit or (preds[i] & ~done):
                continue
            nxt = _apply(ops[i], state)
            if nxt is None:
                continue
            if dfs(done | bit, nxt):
                return True
        return False

    return dfs(0, zero)


CHECKERS = {
    "exactly_once": check_exactly_once,
    "slot_agreement": check_slot_agreement,
    "paper_invariants": check_paper_invariants,
    "ts_discipline": check_ts_discipline,
}


def run_checks(trace, snapshots=None, names=("all",), value_size: int = 32) -> list[Verdict]:
    wanted = set(names)
    run_all = "all" in wanted
    out = []
    for name, fn in CHECKERS.items():
        if run_all or name in wanted:
            out.append(fn(trace))
    if run_all or "carstamp_visibility" in wanted:
        if snapshots is not None:
            out.append(check_carstamp_visibility(trace, snapshots))
    if run_all or "linearizability" in wanted:
        out.append(check_linearizability(extract_history(trace), value_size))
    return out
