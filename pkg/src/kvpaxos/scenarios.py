"""Scripted regression scenarios driven through a hand-routed network.

The harness delivers chosen messages to chosen machines in a chosen order,
which lets each scenario pin the exact interleaving it is about. Every
scenario returns the trace plus named observations asserted by tests and
surfaced by the CLI.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .core import int_to_value, value_to_int, zero_value
from .engine import ClientOp, EngineConfig, Machine
from .messages import (
    AcceptMsg,
    ReplyCode,
    CommitAckMsg,
    CommitMsg,
    KIND_NAMES,
    ProposeMsg,
    ReplyMsg,
)
from .trace import Trace

KEY = (0xA5).to_bytes(8, "little")


@dataclass
class Env:
    seq: int
    src: int
    dst: int
    msg: object


@dataclass
class ScenarioResult:
    name: str
    trace: Trace
    snapshots: list[dict]
    completed: int
    total: int
    notes: dict = field(default_factory=dict)


class Harness:
    """Manual network: nothing moves unless the script moves it."""

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.trace = Trace()
        self.machines = [Machine(i, cfg, self.trace) for i in range(cfg.machine_count)]
        self.pending: list[Env] = []
        self.crashed: set[int] = set()
        self.now = 0

    def enqueue(self, machine: int, session: int, op: ClientOp) -> None:
        self.machines[machine].pending_ops[session].append(op)

    def tick(self, mid: int, deliver: list[Env] = ()) -> None:
        inbound = []
        for env in deliver:
            if isinstance(env.msg, ReplyMsg):
                self.trace.emit(self.now, env.dst, "deliver",
                                {"ref": env.seq, "src": env.src, "kind": "reply",
                                 **env.msg.payload()})
            else:
                self.trace.emit(self.now, env.dst, "deliver",
                                {"ref": env.seq, "src": env.src,
                                 "kind": KIND_NAMES[type(env.msg)]})
            inbound.append((env.src, env.msg))
        out = self.machines[mid].tick(self.now, inbound)
        for dst, msg in out:
            rec = self.trace.emit(self.now, mid, "send",
                                  {"dst": dst, "kind": KIND_NAMES[type(msg)],
                                   **msg.payload()})
            if dst in self.crashed:
                self.trace.emit(self.now, -1, "drop", {"ref": rec.seq, "reason": "crash"})
            else:
                self.pending.append(Env(rec.seq, mid, dst, msg))
        self.now += 1

    def pump(self, mids, rounds: int = 1) -> None:
        for _ in range(rounds):
            for mid in mids:
                if mid not in self.crashed:
                    self.tick(mid)

    def take(self, kind=None, src=None, dst=None, pred=None) -> list[Env]:
        def match(e: Env) -> bool:
            if kind is not None and not isinstance(e.msg, kind):
                return False
            if src is not None and e.src != src:
                return False
            if dst is not None and e.dst != dst:
                return False
            return pred is None or pred(e)

        got = [e for e in self.pending if match(e)]
        self.pending = [e for e in self.pending if not match(e)]
        return got

    def drop(self, envs: list[Env]) -> None:
        for e in envs:
            self.trace.emit(self.now, -1, "drop", {"ref": e.seq, "reason": "script"})

    def route(self, envs: list[Env]) -> None:
        """Deliver the given messages, one destination machine per tick."""
        by_dst: dict[int, list[Env]] = {}
        for e in envs:
            by_dst.setdefault(e.dst, []).append(e)
        for dst in sorted(by_dst):
            if dst in self.crashed:
                self.drop(by_dst[dst])
            else:
                self.tick(dst, by_dst[dst])

    def crash(self, mid: int) -> None:
        self.crashed.add(mid)
        self.trace.emit(self.now, mid, "crash", {})
        doomed = self.take(dst=mid)
        self.drop(doomed)

    def completed(self) -> int:
        return sum(m.completed_ops for m in self.machines)

    def run_open(self, total: int, max_rounds: int = 4000) -> None:
        """Deliver everything every tick until all client ops complete."""
        for _ in range(max_rounds):
            if self.completed() >= total:
                return
            envs = self.take()
            by_dst: dict[int, list[Env]] = {}
            for e in envs:
                if e.dst in self.crashed:
                    self.drop([e])
                else:
                    by_dst.setdefault(e.dst, []).append(e)
            for mid in range(self.cfg.machine_count):
                if mid in self.crashed:
                    continue
                self.tick(mid, by_dst.get(mid, []))

    def result(self, name: str, total: int, notes=None) -> ScenarioResult:
        return ScenarioResult(name, self.trace,
                              [m.kvs.snapshot() for m in self.machines],
                              self.completed(), total, notes or {})


def _cfg(**kw) -> EngineConfig:
    base = dict(machine_count=5, sessions_per_machine=1, back_off_threshold=3,
                all_aboard_timeout=5, log_too_high_limit=3,
                all_aboard_enabled=False, suspect_window=10 ** 6,
                resend_interval=30)
    base.update(kw)
    return EngineConfig(**base)


def counterexample_double_commit() -> ScenarioResult:
    """Helped RMW retried by its issuer in a later slot.

    Machine 0 locally accepts its RMW in slot 1 but the accept broadcast is
    lost. Machine 1 times out on the slot, proposes over it, learns of the
    accept and helps it to commitment; the commit reaches only machine 2.
    Machine 2 then drives slot 2. Machine 0 later learns slot 2 without ever
    seeing slot 1's commit, retries its RMW in slot 3, and must be stopped by
    an Rmw-id-committed reply, completing with its slot-1 read result.
    """
    h = Harness(_cfg())
    h.enqueue(0, 0, ClientOp("faa", KEY, int_to_value(5)))
    h.enqueue(1, 0, ClientOp("faa", KEY, int_to_value(7)))
    h.enqueue(2, 0, ClientOp("faa", KEY, int_to_value(9)))

    # slot 1: machine 0 proposes, wins a quorum with 1 and 2, accepts locally;
    # the accept broadcast dies entirely
    h.pump([0], 2)
    props = h.take(kind=ProposeMsg, src=0)
    h.route([e for e in props if e.dst in (1, 2)])
    h.drop([e for e in props if e.dst in (3, 4)])
    h.route(h.take(kind=ReplyMsg, dst=0))
    h.pump([0])
    h.drop(h.take(kind=AcceptMsg, src=0))

    # machine 1 backs off on the proposed pair, steals, and hears about the
    # lower accept only from machine 0 (machine 2 just acks)
    h.pump([1], h.cfg.back_off_threshold + 2)
    props = h.take(kind=ProposeMsg, src=1)
    h.route([e for e in props if e.dst in (0, 2)])
    h.drop([e for e in props if e.dst in (3, 4)])
    h.route(h.take(kind=ReplyMsg, dst=1))
    h.pump([1])

    # the help: accepts for machine 0's RMW reach machines 2 and 3 only
    accs = h.take(kind=AcceptMsg, src=1)
    h.route([e for e in accs if e.dst in (2, 3)])
    h.drop([e for e in accs if e.dst in (0, 4)])
    h.route(h.take(kind=ReplyMsg, dst=1))
    h.pump([1])

    # commits for the helped RMW reach only machine 2
    comms = h.take(kind=CommitMsg, src=1)
    h.route([e for e in comms if e.dst == 2])
    h.drop([e for e in comms if e.dst != 2])
    h.route(h.take(kind=CommitAckMsg, dst=1))

    # machine 2 now drives slot 2 and runs into log-too-high nacks from
    # machines that never saw slot 1's commit
    h.pump([2], 2)
    for _ in range(h.cfg.log_too_high_limit):
        props = h.take(kind=ProposeMsg, src=2)
        h.route([e for e in props if e.dst in (0, 3, 4)])
        h.drop([e for e in props if e.dst == 1])
        h.route(h.take(kind=ReplyMsg, dst=2))
        h.pump([2])

    # recovery: machine 2 rebroadcasts slot 1's commit; keep machine 0 dark
    comms = h.take(kind=CommitMsg, src=2)
    h.route([e for e in comms if e.dst in (3, 4)])
    h.drop([e for e in comms if e.dst in (0, 1)])
    h.route(h.take(kind=CommitAckMsg, dst=2))
    h.pump([2], 2)

    # slot 2 proper: propose and accept through machines 3 and 4
    for kind in (ProposeMsg, AcceptMsg):
        msgs = h.take(kind=kind, src=2)
        h.route([e for e in msgs if e.dst in (3, 4)])
        h.drop([e for e in msgs if e.dst in (0, 1)])
        h.route(h.take(kind=ReplyMsg, dst=2))
        h.pump([2])

    # slot 2's commit reaches machine 0: it jumps to slot 2 without ever
    # registering the helped RMW from slot 1
    comms = h.take(kind=CommitMsg, src=2)
    h.route([e for e in comms if e.dst in (0, 3)])
    h.drop([e for e in comms if e.dst in (1, 4)])
    h.route(h.take(kind=CommitAckMsg, dst=2))

    # machine 0 saw slot 2 commit under its stuck accept: it retries its RMW
    # in slot 3 without ever having registered it
    assert h.machines[0].kvs.pair(KEY).last_committed_log_no == 2
    h.drop(h.take(kind=AcceptMsg, src=0))  # clear stale resends of the old accept
    h.pump([0], 2)

    slot3 = h.take(kind=ProposeMsg, src=0)
    retried_in_slot3 = bool(slot3) and all(e.msg.log_no == 3 for e in slot3)

    # the retried propose meets machines that registered the RMW when they
    # committed slot 1, so it is answered with rmw-id-committed
    h.route([e for e in slot3 if e.dst in (2, 4)])
    h.drop([e for e in slot3 if e.dst in (1, 3)])
    replies = h.take(kind=ReplyMsg, dst=0)
    got_committed = any(e.msg.code in (ReplyCode.RMW_ID_COMMITTED,
                                       ReplyCode.RMW_ID_COMMITTED_NO_BCAST)
                        for e in replies)
    h.route(replies)
    h.pump([0])

    # open the network and drain everything
    h.run_open(total=3)
    # machine 4 could not ack slot 2 before committing and registering slot 1
    m4_log_too_high = any(
        r.kind == "deliver" and r.machine == 2 and r.p.get("code") == "log_too_high"
        and r.p.get("src") == 4 for r in h.trace)
    return h.result("counterexample_double_commit", 3,
                    {"retried_in_slot3": retried_in_slot3,
                     "m4_log_too_high": m4_log_too_high,
                     "rmw_id_committed_reply": got_committed})


def single_commit_receiver_crash() -> ScenarioResult:
    """The committer dies after one peer got the commit; that peer recovers
    the slot for everyone via consecutive log-too-high nacks."""
    h = Harness(_cfg())
    h.enqueue(0, 0, ClientOp("faa", KEY, int_to_value(3)))
    h.enqueue(1, 0, ClientOp("faa", KEY, int_to_value(4)))

    # machine 0 commits slot 1 everywhere it can, but only machine 1
    # receives the commit; then machine 0 dies
    h.pump([0], 2)
    h.route(h.take(kind=ProposeMsg, src=0))
    h.route(h.take(kind=ReplyMsg, dst=0))
    h.pump([0])
    h.route(h.take(kind=AcceptMsg, src=0))
    h.route(h.take(kind=ReplyMsg, dst=0))
    h.pump([0])
    comms = h.take(kind=CommitMsg, src=0)
    h.route([e for e in comms if e.dst == 1])
    h.drop([e for e in comms if e.dst != 1])
    h.crash(0)

    # machine 1 proposes slot 2 and sees only log-too-high until it times out
    # and rebroadcasts slot 1's commit
    h.pump([1], 2)
    nack_rounds = 0
    for _ in range(h.cfg.log_too_high_limit):
        props = h.take(kind=ProposeMsg, src=1)
        assert props and all(e.msg.log_no == 2 for e in props)
        h.route(props)
        h.route(h.take(kind=ReplyMsg, dst=1))
        nack_rounds += 1
        h.pump([1])

    recovery = h.take(kind=CommitMsg, src=1)
    recovered_slot1 = bool(recovery) and all(e.msg.log_no == 1 for e in recovery)
    h.route(recovery)
    h.route(h.take(kind=CommitAckMsg, dst=1))

    h.run_open(total=2)
    return h.result("single_commit_receiver_crash", 2,
                    {"nack_rounds": nack_rounds, "recovered_slot1": recovered_slot1,
                     "crashed": [0]})


def backoff_steal() -> ScenarioResult:
    """A proposed pair whose holder died is stolen after the back-off."""
    h = Harness(_cfg())
    h.enqueue(0, 0, ClientOp("faa", KEY, int_to_value(1)))
    h.enqueue(1, 0, ClientOp("faa", KEY, int_to_value(2)))

    h.pump([0], 2)
    h.route(h.take(kind=ProposeMsg, src=0))  # everyone promises machine 0
    h.crash(0)

    h.pump([1], h.cfg.back_off_threshold + 3)
    h.run_open(total=2)
    stole = any(r.kind == "state_transition" and r.p.get("reason") == "steal"
                for r in h.trace)
    return h.result("backoff_steal", 2, {"stole": stole, "crashed": [0]})


def backoff_help() -> ScenarioResult:
    """An accepted pair whose issuer died is helped, preserving its value."""
    h = Harness(_cfg())
    h.enqueue(0, 0, ClientOp("faa", KEY, int_to_value(5)))
    h.enqueue(1, 0, ClientOp("faa", KEY, int_to_value(2)))

    # machine 0 gets its RMW accepted locally and at machine 1 only, then dies
    h.pump([0], 2)
    h.route(h.take(kind=ProposeMsg, src=0))
    h.route(h.take(kind=ReplyMsg, dst=0))
    h.pump([0])
    accs = h.take(kind=AcceptMsg, src=0)
    h.route([e for e in accs if e.dst == 1])
    h.drop([e for e in accs if e.dst != 1])
    h.route(h.take(kind=ReplyMsg, dst=0))
    h.crash(0)

    helped_value = h.machines[1].kvs.pair(KEY).accepted_value

    # machine 1 times out on the accepted pair and proposes over it, but only
    # two remote acks arrive, forcing the help branch
    h.pump([1], h.cfg.back_off_threshold + 3)
    props = h.take(kind=ProposeMsg, src=1)
    h.route([e for e in props if e.dst in (2, 3)])
    h.drop([e for e in props if e.dst == 4])
    h.route(h.take(kind=ReplyMsg, dst=1))
    h.pump([1])

    h.run_open(total=2)
    helped = any(r.kind == "state_transition" and r.p.get("reason") == "help_after_wait"
                 for r in h.trace)
    return h.result("backoff_help", 2,
                    {"helped": helped, "helped_value": helped_value.hex(),
                     "crashed": [0]})


SCRIPTED = {
    "sec_counterexample": counterexample_double_commit,
    "sec_recovery": single_commit_receiver_crash,
    "backoff_steal": backoff_steal,
    "backoff_help": backoff_help,
}
