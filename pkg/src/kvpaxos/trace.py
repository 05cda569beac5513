"""Append-only event log consumed by the checkers and the report generator.

Serialized form is one self-describing JSON record per line with a stable
field order: seq, tick, machine, kind, then the event payload under "p".
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class TraceRecord:
    __slots__ = ("seq", "tick", "machine", "kind", "p")
    seq: int
    tick: int
    machine: int
    kind: str
    p: dict


class Trace:
    """Totally ordered by (tick, seq); seq is globally unique and monotone."""

    def __init__(self):
        self.records: list[TraceRecord] = []
        self._seq = 0

    def emit(self, tick: int, machine: int, kind: str, payload: dict) -> TraceRecord:
        rec = TraceRecord(self._seq, tick, machine, kind, payload)
        self._seq += 1
        self.records.append(rec)
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps(
                {"seq": r.seq, "tick": r.tick, "machine": r.machine,
                 "kind": r.kind, "p": r.p},
                separators=(",", ":"), sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        t = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            t.records.append(TraceRecord(d["seq"], d["tick"], d["machine"],
                                         d["kind"], d["p"]))
        t._seq = (t.records[-1].seq + 1) if t.records else 0
        return t
