"""Value types shared by every layer: logical timestamps, carstamps, RMW identities.

Everything here is an immutable value; instances are safe to copy between
simulated machines.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

DEFAULT_VALUE_SIZE = 32
KEY_SIZE = 8

# An RMW's very first attempt may use the fast path, whose timestamp version
# is reserved below every regular proposal version.
ALL_ABOARD_VERSION = 2
CP_START_VERSION = 3

# lid layout: local session index in the low bits, attempt counter above.
LID_SESSION_BITS = 10

# rmw-id layout: global session id in the low bits, per-session counter above.
RMW_SESSION_BITS = 16
RMW_TOTAL_BITS = 64


class MalformedOpError(ValueError):
    """An RMW op's value widths do not match the configured value size."""


class ConfigError(ValueError):
    """Invalid static configuration (session counts, fault plans, ...)."""


@dataclass(frozen=True, order=True)
class Timestamp:
    """Lamport clock; ordered by version with machine id as tie breaker."""

    version: int
    machine_id: int

    def bump(self, machine_id: int) -> "Timestamp":
        return Timestamp(self.version + 1, machine_id)


TS_ZERO = Timestamp(0, 0)
INITIAL_BASE_TS = Timestamp(1, 0)


@dataclass(frozen=True, order=True)
class Carstamp:
    """Orders writes against RMW commits: base timestamp dominant, slot breaks ties."""

    base_ts: Timestamp
    log_no: int


def ts_compare(a: Timestamp, b: Timestamp) -> int:
    """-1/0/+1 three-way comparison."""
    return -1 if a < b else (0 if a == b else 1)


def carstamp_compare(a: Carstamp, b: Carstamp) -> int:
    return -1 if a < b else (0 if a == b else 1)


@dataclass(frozen=True)
class RmwId:
    """Globally unique RMW identity: per-session counter + global session id."""

    counter: int
    session: int

    def encode(self) -> int:
        if self.session >= (1 << RMW_SESSION_BITS):
            raise ConfigError(f"session {self.session} exceeds rmw-id width")
        raw = (self.counter << RMW_SESSION_BITS) | self.session
        if raw >= (1 << RMW_TOTAL_BITS):
            raise ConfigError("rmw-id counter overflow")
        return raw

    @classmethod
    def decode(cls, raw: int) -> "RmwId":
        return cls(raw >> RMW_SESSION_BITS, raw & ((1 << RMW_SESSION_BITS) - 1))


NULL_RMW_ID = RmwId(0, 0)


def make_lid(session: int, attempt: int, session_bits: int = LID_SESSION_BITS) -> int:
    """Pack a broadcast identifier; the session index sits in the low bits."""
    if session >= (1 << session_bits):
        raise ConfigError(f"session {session} exceeds {session_bits}-bit lid field")
    return (attempt << session_bits) | session


def session_of_lid(lid: int, session_bits: int = LID_SESSION_BITS) -> int:
    return lid & ((1 << session_bits) - 1)


class RmwKind(Enum):
    CAS = "cas"
    FAA = "faa"


@dataclass(frozen=True)
class RmwOp:
    """A compare-and-swap or fetch-and-add over a fixed-width opaque value."""

    kind: RmwKind
    compare_value: bytes | None  # CAS only
    argument_value: bytes  # CAS swap value, or FAA delta


def int_to_value(n: int, size: int = DEFAULT_VALUE_SIZE) -> bytes:
    """Encode an integer into the first 8 bytes (little endian) of a value."""
    return (n % (1 << 64)).to_bytes(8, "little") + bytes(size - 8)


def value_to_int(value: bytes) -> int:
    return int.from_bytes(value[:8], "little")


def zero_value(size: int = DEFAULT_VALUE_SIZE) -> bytes:
    return bytes(size)


def rmw_compute(op: RmwOp, current: bytes, value_size: int = DEFAULT_VALUE_SIZE):
    """Apply an RMW to the previous committed value.

    Returns (new_value, read_result, cas_success). Deterministic; a failed CAS
    keeps the current value and still reports the value it read.
    """
    if len(current) != value_size or len(op.argument_value) != value_size:
        raise MalformedOpError("value width mismatch")
    if op.kind is RmwKind.FAA:
        total = (value_to_int(current) + value_to_int(op.argument_value)) % (1 << 64)
        new = total.to_bytes(8, "little") + current[8:]
        return new, current, True
    if op.compare_value is None or len(op.compare_value) != value_size:
        raise MalformedOpError("CAS compare value width mismatch")
    if current == op.compare_value:
        return op.argument_value, current, True
    return current, current, False
