"""Per-session call-stack verification for nested tool invocations.

Every push is checked in a fixed order and the first failing check is the
one reported: rate limit, depth, circularity, blocked chain, chain
allowlist, privilege escalation. Root calls (no caller) skip the three
chain checks.
"""

from __future__ import annotations

import enum
import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import CallerMismatch, InvalidPolicy, StackMismatch, StoreIOError
from .tokens import check_scope_adherence

Pair = tuple[str, str]


class Violation(str, enum.Enum):
    RATE_LIMITED = "RATE_LIMITED"
    DEPTH_EXCEEDED = "DEPTH_EXCEEDED"
    CIRCULAR_CALL = "CIRCULAR_CALL"
    CHAIN_BLOCKED = "CHAIN_BLOCKED"
    CHAIN_NOT_ALLOWLISTED = "CHAIN_NOT_ALLOWLISTED"
    PRIVILEGE_ESCALATION = "PRIVILEGE_ESCALATION"


@dataclass(frozen=True)
class RateLimit:
    max_calls: int
    window: int

    def __post_init__(self) -> None:
        if self.max_calls < 0 or self.window < 1:
            raise InvalidPolicy(f"bad rate limit {self}")


def _pairs(values: Iterable[Iterable[str]]) -> frozenset[Pair]:
    out = set()
    for v in values:
        a, b = v
        out.add((a, b))
    return frozenset(out)


@dataclass(frozen=True)
class CallStackPolicy:
    max_depth: int = 8
    allowed_chains: frozenset[Pair] = frozenset()
    blocked_chains: frozenset[Pair] = frozenset()
    allow_reentrancy: bool = False
    permitted_elevations: frozenset[Pair] = frozenset()
    rate_limits: Mapping[str, RateLimit] = field(default_factory=dict)
    # violation classes that are only logged instead of blocking the call
    log_only: frozenset[Violation] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "allowed_chains", _pairs(self.allowed_chains))
        object.__setattr__(self, "blocked_chains", _pairs(self.blocked_chains))
        object.__setattr__(self, "permitted_elevations", _pairs(self.permitted_elevations))
        object.__setattr__(self, "log_only", frozenset(Violation(v) for v in self.log_only))
        object.__setattr__(
            self,
            "rate_limits",
            {k: v if isinstance(v, RateLimit) else RateLimit(*v) for k, v in dict(self.rate_limits).items()},
        )

    def validate(self) -> None:
        if isinstance(self.max_depth, bool) or not isinstance(self.max_depth, int) or self.max_depth < 1:
            raise InvalidPolicy(f"max_depth must be a positive integer, got {self.max_depth!r}")
        overlap = self.allowed_chains & self.blocked_chains
        if overlap:
            raise InvalidPolicy(f"chains both allowed and blocked: {sorted(overlap)}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_depth": self.max_depth,
            "allowed_chains": sorted(list(p) for p in self.allowed_chains),
            "blocked_chains": sorted(list(p) for p in self.blocked_chains),
            "allow_reentrancy": self.allow_reentrancy,
            "permitted_elevations": sorted(list(p) for p in self.permitted_elevations),
            "rate_limits": {
                k: {"max_calls": v.max_calls, "window": v.window} for k, v in sorted(self.rate_limits.items())
            },
            "log_only": sorted(v.value for v in self.log_only),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CallStackPolicy:
        try:
            return cls(
                max_depth=data.get("max_depth", 8),
                allowed_chains=data.get("allowed_chains", ()),
                blocked_chains=data.get("blocked_chains", ()),
                allow_reentrancy=bool(data.get("allow_reentrancy", False)),
                permitted_elevations=data.get("permitted_elevations", ()),
                rate_limits={
                    k: RateLimit(int(v["max_calls"]), int(v["window"]))
                    for k, v in (data.get("rate_limits") or {}).items()
                },
                log_only=data.get("log_only", ()),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidPolicy):
                raise
            raise InvalidPolicy(f"malformed call-stack policy: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> CallStackPolicy:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise StoreIOError(f"cannot read call-stack policy {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidPolicy(f"call-stack policy {path} is not JSON: {exc}") from exc


@dataclass(frozen=True)
class Frame:
    tool_id: str
    granted_scopes: frozenset[str]
    entered_at_tick: int


@dataclass(frozen=True)
class ViolationRecord:
    tick: int
    session_id: str
    caller: str | None
    callee: str
    violation: Violation
    blocked: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "session_id": self.session_id,
            "caller": self.caller,
            "callee": self.callee,
            "violation": self.violation.value,
            "blocked": self.blocked,
        }


@dataclass(frozen=True)
class CallVerdict:
    violation: Violation | None = None
    logged: tuple[Violation, ...] = ()

    @property
    def allowed(self) -> bool:
        return self.violation is None

    def __bool__(self) -> bool:
        return self.allowed

    def to_dict(self) -> dict[str, Any]:
        return {
            "allowed": self.allowed,
            "violation": self.violation.value if self.violation else None,
            "logged": [v.value for v in self.logged],
        }


ALLOW = CallVerdict()


@dataclass
class CallSession:
    session_id: str
    policy: CallStackPolicy
    stack: list[Frame] = field(default_factory=list)
    call_log: list[tuple[str, int]] = field(default_factory=list)
    clock: int = 0
    violations: list[ViolationRecord] = field(default_factory=list)
    # per-tool ticks of admitted calls, trimmed to the rate window
    _recent: dict[str, deque[int]] = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return len(self.stack)

    @property
    def top(self) -> Frame | None:
        return self.stack[-1] if self.stack else None

    def on_stack(self, tool_id: str) -> bool:
        return any(f.tool_id == tool_id for f in self.stack)

    def recent_calls(self, tool_id: str) -> int:
        limit = self.policy.rate_limits.get(tool_id)
        ticks = self._recent.get(tool_id)
        if limit is None or not ticks:
            return 0
        horizon = self.clock - limit.window
        while ticks and ticks[0] <= horizon:
            ticks.popleft()
        return len(ticks)


def begin_session(policy: CallStackPolicy, session_id: str = "session-0") -> CallSession:
    policy.validate()
    return CallSession(session_id=session_id, policy=policy)


def _first_violation(
    session: CallSession,
    caller_id: str | None,
    callee_id: str,
    caller_scopes: frozenset[str],
    callee_scopes: frozenset[str],
) -> Iterable[Violation]:
    policy = session.policy
    limit = policy.rate_limits.get(callee_id)
    if limit is not None and session.recent_calls(callee_id) >= limit.max_calls:
        yield Violation.RATE_LIMITED
    if session.depth + 1 > policy.max_depth:
        yield Violation.DEPTH_EXCEEDED
    if not policy.allow_reentrancy and session.on_stack(callee_id):
        yield Violation.CIRCULAR_CALL
    if caller_id is None:
        return
    pair = (caller_id, callee_id)
    if pair in policy.blocked_chains:
        yield Violation.CHAIN_BLOCKED
    if policy.allowed_chains and pair not in policy.allowed_chains:
        yield Violation.CHAIN_NOT_ALLOWLISTED
    if pair not in policy.permitted_elevations and not check_scope_adherence(callee_scopes, caller_scopes):
        yield Violation.PRIVILEGE_ESCALATION


def push_call(
    session: CallSession,
    caller_id: str | None,
    callee_id: str,
    caller_scopes: Iterable[str] | None = None,
    callee_scopes: Iterable[str] = (),
) -> CallVerdict:
    """Check a call against the session policy and push it if admitted.

    ``caller_id`` must name the current top of stack (``None`` only on an
    empty stack). ``caller_scopes`` defaults to the scopes recorded for the
    caller's frame.
    """
    top = session.top
    if caller_id is None:
        if top is not None:
            raise CallerMismatch(f"root call to {callee_id!r} while {top.tool_id!r} is executing")
    elif top is None or top.tool_id != caller_id:
        raise CallerMismatch(f"caller {caller_id!r} is not the top of stack ({top.tool_id if top else None!r})")
    if caller_scopes is None:
        caller_scopes = top.granted_scopes if top is not None else frozenset()
    caller_set, callee_set = frozenset(caller_scopes), frozenset(callee_scopes)

    logged: list[Violation] = []
    for violation in _first_violation(session, caller_id, callee_id, caller_set, callee_set):
        blocking = violation not in session.policy.log_only
        session.violations.append(
            ViolationRecord(session.clock, session.session_id, caller_id, callee_id, violation, blocking)
        )
        if blocking:
            return CallVerdict(violation, tuple(logged))
        logged.append(violation)

    session.stack.append(Frame(callee_id, callee_set, session.clock))
    session.call_log.append((callee_id, session.clock))
    if callee_id in session.policy.rate_limits:
        session._recent.setdefault(callee_id, deque()).append(session.clock)
    return CallVerdict(None, tuple(logged))


def pop_call(session: CallSession, tool_id: str) -> None:
    top = session.top
    if top is None or top.tool_id != tool_id:
        raise StackMismatch(f"cannot pop {tool_id!r}; top of stack is {top.tool_id if top else None!r}")
    session.stack.pop()


def advance_clock(session: CallSession, ticks: int) -> None:
    if ticks < 0:
        raise ValueError("clock cannot move backwards")
    session.clock += ticks


def write_violation_log(records: Iterable[ViolationRecord], path: str | os.PathLike[str]) -> None:
    try:
        with open(path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
    except OSError as exc:
        raise StoreIOError(f"cannot append to violation log {path}: {exc}") from exc
