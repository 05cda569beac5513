"""Per-machine in-memory KV store: KV-pair metadata, the registered-rmw-id
table and the commit application rules."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .core import (
    Carstamp,
    ConfigError,
    INITIAL_BASE_TS,
    NULL_RMW_ID,
    RmwId,
    TS_ZERO,
    Timestamp,
    zero_value,
)


class PairState(Enum):
    INVALID = "invalid"
    PROPOSED = "proposed"
    ACCEPTED = "accepted"


@dataclass
class KvPair:
    """Replica-local metadata for one key: committed state plus the in-flight slot."""

    key: bytes
    value: bytes
    accepted_value: bytes
    state: PairState = PairState.INVALID
    log_no: int = 0
    last_committed_log_no: int = 0
    proposed_ts: Timestamp = TS_ZERO
    accepted_ts: Timestamp = TS_ZERO
    rmw_id: RmwId = NULL_RMW_ID
    last_committed_rmw_id: RmwId = NULL_RMW_ID
    base_ts: Timestamp = INITIAL_BASE_TS
    acc_base_ts: Timestamp = TS_ZERO

    def working_log_no(self) -> int:
        """The slot any new propose/accept for this key must target."""
        return self.last_committed_log_no + 1

    def carstamp(self) -> Carstamp:
        return Carstamp(self.base_ts, self.last_committed_log_no)

    def fingerprint(self) -> tuple:
        """Progress marker inspected by the back-off mechanism."""
        return (self.state, self.log_no, self.proposed_ts, self.accepted_ts, self.rmw_id)


@dataclass(frozen=True)
class CommitInfo:
    """A commit to apply; thin commits omit value and base timestamp."""

    key: bytes
    log_no: int
    rmw_id: RmwId
    value: bytes | None = None
    base_ts: Timestamp | None = None

    @property
    def thin(self) -> bool:
        return self.value is None


@dataclass
class CommitOutcome:
    """What applying a commit did to the local pair."""

    advanced: bool = False  # log counters moved forward
    value_applied: bool = False
    invalidated: bool = False  # in-flight slot released
    violation: bool = False  # thin commit with no usable accepted state
    resolved_value: bytes | None = None
    resolved_base_ts: Timestamp | None = None

    @property
    def effective(self) -> bool:
        return self.advanced or self.value_applied or self.invalidated


class RegisteredRmwTable:
    """Highest committed rmw-id counter per global session; entries never regress."""

    def __init__(self, total_sessions: int):
        self.total_sessions = total_sessions
        self.highest = [0] * total_sessions

    def register(self, rmw_id: RmwId) -> None:
        if rmw_id.session >= self.total_sessions:
            raise ConfigError(f"unknown session {rmw_id.session}")
        if rmw_id.counter > self.highest[rmw_id.session]:
            self.highest[rmw_id.session] = rmw_id.counter

    def is_registered(self, rmw_id: RmwId) -> bool:
        if rmw_id.session >= self.total_sessions:
            raise ConfigError(f"unknown session {rmw_id.session}")
        return self.highest[rmw_id.session] >= rmw_id.counter

    def snapshot(self) -> list[int]:
        return list(self.highest)


class KvStore:
    """One machine's store. Owned by a single engine; mutated only inside its tick."""

    def __init__(self, total_sessions: int, value_size: int):
        self.value_size = value_size
        self.pairs: dict[bytes, KvPair] = {}
        self.registered = RegisteredRmwTable(total_sessions)

    def pair(self, key: bytes) -> KvPair:
        p = self.pairs.get(key)
        if p is None:
            p = KvPair(key=key, value=zero_value(self.value_size),
                       accepted_value=zero_value(self.value_size))
            self.pairs[key] = p
        return p

    def apply_commit(self, c: CommitInfo) -> CommitOutcome:
        """Unconditionally commit an RMW: register it, advance the log counters
        and make the value visible unless a newer carstamp already is."""
        pair = self.pair(c.key)
        out = CommitOutcome()
        if c.rmw_id.counter > 0:
            self.registered.register(c.rmw_id)

        value, base_ts = c.value, c.base_ts
        if value is None:
            if (pair.state is PairState.ACCEPTED and pair.log_no == c.log_no
                    and pair.rmw_id == c.rmw_id):
                value, base_ts = pair.accepted_value, pair.acc_base_ts
            elif c.log_no > pair.last_committed_log_no + 1:
                out.violation = True
        out.resolved_value, out.resolved_base_ts = value, base_ts

        if value is not None and Carstamp(base_ts, c.log_no) > pair.carstamp():
            pair.value = value
            pair.base_ts = base_ts
            out.value_applied = True
        if c.log_no > pair.last_committed_log_no:
            pair.last_committed_log_no = c.log_no
            pair.last_committed_rmw_id = c.rmw_id
            out.advanced = True
        if pair.state is not PairState.INVALID and pair.log_no <= pair.last_committed_log_no:
            pair.state = PairState.INVALID
            out.invalidated = True
        return out

    def apply_write(self, key: bytes, value: bytes, base_ts: Timestamp) -> bool:
        """ABD write visibility: applied iff it carries a strictly newer base."""
        pair = self.pair(key)
        if base_ts > pair.base_ts:
            pair.value = value
            pair.base_ts = base_ts
            return True
        return False

    def is_registered(self, rmw_id: RmwId) -> bool:
        return self.registered.is_registered(rmw_id)

    def snapshot(self) -> dict:
        """Canonical serialization, sorted by key / session."""
        pairs = {}
        for key in sorted(self.pairs):
            p = self.pairs[key]
            pairs[key.hex()] = {
                "value": p.value.hex(),
                "state": p.state.value,
                "log_no": p.log_no,
                "last_committed_log_no": p.last_committed_log_no,
                "proposed_ts": [p.proposed_ts.version, p.proposed_ts.machine_id],
                "accepted_ts": [p.accepted_ts.version, p.accepted_ts.machine_id],
                "accepted_value": p.accepted_value.hex(),
                "rmw_id": [p.rmw_id.counter, p.rmw_id.session],
                "last_committed_rmw_id": [p.last_committed_rmw_id.counter,
                                          p.last_committed_rmw_id.session],
                "base_ts": [p.base_ts.version, p.base_ts.machine_id],
                "acc_base_ts": [p.acc_base_ts.version, p.acc_base_ts.machine_id],
            }
        return {"pairs": pairs, "registered": self.registered.snapshot()}
