"""Deterministic discrete-event simulation of machines and the network.

Time is integer ticks; every machine ticks once per simulation tick in
machine-id order. All randomness (delays, loss, duplication) comes from one
seeded generator, so a (config, workload) pair always produces a bit-identical
trace.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .core import ConfigError
from .engine import ClientOp, EngineConfig, Machine
from .messages import KIND_NAMES, ReplyMsg
from .trace import Trace

RNG_ALGO = "python-mt19937"


@dataclass(frozen=True)
class FaultAction:
    tick: int
    kind: str  # crash | recover | partition | heal
    machine: int | None = None
    groups: tuple[frozenset[int], ...] | None = None


@dataclass
class NetConfig:
    seed: int = 1
    machine_count: int = 5
    delay_min: int = 1
    delay_max: int = 3
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    fault_plan: tuple[FaultAction, ...] = ()
    max_ticks: int = 20000
    rng_algo: str = RNG_ALGO

    def __post_init__(self):
        if self.delay_min < 1 or self.delay_max < self.delay_min:
            raise ConfigError("need 1 <= delay_min <= delay_max")
        if not 0 <= self.loss_prob < 1 or not 0 <= self.dup_prob < 1:
            raise ConfigError("probabilities must be in [0, 1)")
        if self.rng_algo != RNG_ALGO:
            raise ConfigError(f"unknown rng algorithm {self.rng_algo}")


@dataclass
class WorkloadSpec:
    """Client ops per global session id."""

    ops: dict[int, list[ClientOp]]

    def total(self) -> int:
        return sum(len(v) for v in self.ops.values())


@dataclass
class RunResult:
    trace: Trace
    snapshots: list[dict]
    completed: int
    total: int
    ticks: int
    inconclusive: bool


def validate_fault_plan(plan, machine_count: int) -> None:
    crashed: set[int] = set()
    for a in sorted(plan, key=lambda a: a.tick):
        if a.kind in ("crash", "recover"):
            if a.machine is None or not 0 <= a.machine < machine_count:
                raise ConfigError(f"fault action names unknown machine: {a}")
            if a.kind == "crash":
                if a.machine in crashed:
                    raise ConfigError(f"machine {a.machine} crashed twice")
                crashed.add(a.machine)
            else:
                if a.machine not in crashed:
                    raise ConfigError(f"machine {a.machine} recovered while up")
                crashed.discard(a.machine)
        elif a.kind == "partition":
            if not a.groups:
                raise ConfigError("partition needs groups")
            seen = set()
            for g in a.groups:
                if seen & g:
                    raise ConfigError("partition groups overlap")
                seen |= g
            if seen != set(range(machine_count)):
                raise ConfigError("partition groups must cover all machines")
        elif a.kind != "heal":
            raise ConfigError(f"unknown fault action {a.kind}")


class Simulator:
    def __init__(self, net: NetConfig, eng: EngineConfig):
        if net.machine_count != eng.machine_count:
            raise ConfigError("machine counts disagree")
        validate_fault_plan(net.fault_plan, net.machine_count)
        self.net = net
        self.eng = eng

    def run(self, workload: WorkloadSpec) -> RunResult:
        net, eng = self.net, self.eng
        trace = Trace()
        machines = [Machine(i, eng, trace) for i in range(net.machine_count)]
        for gsid, ops in workload.ops.items():
            m, s = divmod(gsid, eng.sessions_per_machine)
            machines[m].pending_ops[s].extend(ops)
        total = workload.total()

        rng = random.Random(net.seed)
        pending: dict[int, list[tuple[int, int, int, object]]] = {}
        faults: dict[int, list[FaultAction]] = {}
        for a in net.fault_plan:
            faults.setdefault(a.tick, []).append(a)
        crashed: set[int] = set()
        groups: tuple[frozenset[int], ...] | None = None

        def cut(src: int, dst: int) -> bool:
            if groups is None:
                return False
            for g in groups:
                if src in g:
                    return dst not in g
            return False

        span = net.delay_max - net.delay_min + 1
        now = 0
        finished = False
        for now in range(net.max_ticks):
            for a in faults.get(now, ()):
                if a.kind == "crash":
                    crashed.add(a.machine)
                    trace.emit(now, a.machine, "crash", {})
                    for t, lst in pending.items():
                        kept = []
                        for env in lst:
                            if env[2] == a.machine:
                                trace.emit(now, -1, "drop",
                                           {"ref": env[0], "reason": "crash"})
                            else:
                                kept.append(env)
                        pending[t] = kept
                elif a.kind == "recover":
                    crashed.discard(a.machine)
                    trace.emit(now, a.machine, "recover", {})
                elif a.kind == "partition":
                    groups = a.groups
                    trace.emit(now, -1, "partition",
                               {"groups": [sorted(g) for g in a.groups]})
                else:
                    groups = None
                    trace.emit(now, -1, "heal", {})

            inbound: dict[int, list[tuple[int, object]]] = {}
            for seq, src, dst, msg in pending.pop(now, ()):
                if dst in crashed:
                    trace.emit(now, -1, "drop", {"ref": seq, "reason": "crash"})
                    continue
                if cut(src, dst):
                    trace.emit(now, -1, "drop", {"ref": seq, "reason": "partition"})
                    continue
                if isinstance(msg, ReplyMsg):
                    trace.emit(now, dst, "deliver",
                               {"ref": seq, "src": src, "kind": "reply",
                                **msg.payload()})
                else:
                    trace.emit(now, dst, "deliver",
                               {"ref": seq, "src": src,
                                "kind": KIND_NAMES[type(msg)]})
                inbound.setdefault(dst, []).append((src, msg))

            for m in machines:
                if m.id in crashed:
                    continue
                out = m.tick(now, inbound.get(m.id, ()))
                for dst, msg in out:
                    rec = trace.emit(now, m.id, "send",
                                     {"dst": dst, "kind": KIND_NAMES[type(msg)],
                                      **msg.payload()})
                    if dst in crashed:
                        trace.emit(now, -1, "drop", {"ref": rec.seq, "reason": "crash"})
                        continue
                    if net.loss_prob and rng.random() < net.loss_prob:
                        trace.emit(now, -1, "drop", {"ref": rec.seq, "reason": "loss"})
                        continue
                    copies = 2 if net.dup_prob and rng.random() < net.dup_prob else 1
                    for _ in range(copies):
                        delay = net.delay_min + int(rng.random() * span)
                        pending.setdefault(now + delay, []).append(
                            (rec.seq, m.id, dst, msg))

            if sum(m.completed_ops for m in machines) >= total:
                finished = True
                break

        return RunResult(trace=trace,
                         snapshots=[m.kvs.snapshot() for m in machines],
                         completed=sum(m.completed_ops for m in machines),
                         total=total, ticks=now + 1, inconclusive=not finished)


def build_workload(seed: int, machine_count: int, sessions_per_machine: int,
                   key_count: int, op_count: int, mix: dict[str, int],
                   skew: float = 0.0, value_range: int = 8,
                   max_ops_per_key: int = 0,
                   value_size: int = 32) -> WorkloadSpec:
    """Deterministic client workload from a scenario config.

    mix maps op kind to a percentage and must sum to 100. Key selection uses a
    power-law skew (0 = uniform). max_ops_per_key caps per-key history length
    for linearizability-checked runs.
    """
    from .core import int_to_value

    if sum(mix.values()) != 100:
        raise ConfigError("op mix must sum to 100")
    rng = random.Random(seed ^ 0x9E3779B9)
    kinds = [k for k in ("read", "write", "cas", "faa") if mix.get(k, 0) > 0]
    weights = [mix[k] for k in kinds]
    keys = [k.to_bytes(8, "little") for k in range(key_count)]
    key_weights = [1.0 / (i + 1) ** skew for i in range(key_count)]
    per_key: dict[bytes, int] = {k: 0 for k in keys}
    total_sessions = machine_count * sessions_per_machine
    ops: dict[int, list[ClientOp]] = {g: [] for g in range(total_sessions)}
    for i in range(op_count):
        gsid = i % total_sessions
        kind = rng.choices(kinds, weights)[0]
        key = rng.choices(keys, key_weights)[0]
        if max_ops_per_key:
            tries = 0
            while per_key[key] >= max_ops_per_key and tries < 4 * key_count:
                key = rng.choices(keys, key_weights)[0]
                tries += 1
            if per_key[key] >= max_ops_per_key:
                continue
        per_key[key] += 1
        if kind == "read":
            op = ClientOp("read", key)
        elif kind == "write":
            op = ClientOp("write", key, int_to_value(rng.randrange(value_range), value_size))
        elif kind == "cas":
            op = ClientOp("cas", key,
                          int_to_value(rng.randrange(value_range), value_size),
                          int_to_value(rng.randrange(value_range), value_size))
        else:
            op = ClientOp("faa", key, int_to_value(1 + rng.randrange(3), value_size))
        ops[gsid].append(op)
    return WorkloadSpec(ops)
