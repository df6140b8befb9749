"""User consent records and the tool verification/approval decision tree.

:func:`evaluate_tool` is the read-only classifier; :func:`verify_and_approve`
adds the consent prompt and persistence on top of it.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping

from .crypto import SignedToolDefinition, TrustStore, VerificationResult, verify_signed_definition
from .errors import NotFound, StoreIOError, SubsetViolation
from .model import ChangeReport, Ordering, SemVer, ToolDefinition, compare_versions, content_hash, diff_definitions

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None  # type: ignore[assignment]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApprovalRecord:
    tool_id: str
    version: SemVer
    content_hash: str
    granted_permissions: frozenset[str]
    approved_at: int
    revoked: bool = False
    # Snapshot of what was approved, so later versions can be diffed against it.
    definition: ToolDefinition | None = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "tool_id": self.tool_id,
            "version": str(self.version),
            "content_hash": self.content_hash,
            "granted_permissions": sorted(self.granted_permissions),
            "approved_at": self.approved_at,
            "revoked": self.revoked,
        }
        if self.definition is not None:
            out["definition"] = self.definition.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ApprovalRecord:
        definition = data.get("definition")
        return cls(
            tool_id=data["tool_id"],
            version=SemVer.parse(data["version"]),
            content_hash=data["content_hash"],
            granted_permissions=frozenset(data.get("granted_permissions", ())),
            approved_at=int(data["approved_at"]),
            revoked=bool(data.get("revoked", False)),
            definition=ToolDefinition.from_dict(definition) if definition else None,
        )


def _check_record(rec: ApprovalRecord) -> None:
    if rec.definition is not None and not rec.revoked:
        extra = rec.granted_permissions - rec.definition.permissions
        if extra:
            raise SubsetViolation(f"{rec.tool_id}: granted {sorted(extra)} never declared")


class ApprovalStore:
    """Append-only approval history, optionally mirrored to a JSON-lines file.

    A record with ``revoked=True`` withdraws every approval of that tool
    written before it. The current approval is the highest-version record
    after the last withdrawal (latest wins between equal versions).
    """

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.RLock()
        self._records: list[ApprovalRecord] = []
        if self.path is not None and self.path.exists():
            self._records = list(self._read_file(self.path))

    @staticmethod
    def _read_file(path: Path) -> Iterator[ApprovalRecord]:
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StoreIOError(f"cannot read approval store {path}: {exc}") from exc
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = ApprovalRecord.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise StoreIOError(f"{path}:{n}: malformed approval record: {exc}") from exc
            try:
                _check_record(rec)
            except SubsetViolation as exc:
                raise StoreIOError(f"{path}:{n}: {exc}") from exc
            yield rec

    def _append(self, rec: ApprovalRecord) -> None:
        with self._lock:
            if self.path is not None:
                try:
                    with open(self.path, "a", encoding="utf-8") as fh:
                        if fcntl is not None:
                            fcntl.flock(fh, fcntl.LOCK_EX)
                        fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                except OSError as exc:
                    raise StoreIOError(f"cannot write approval store {self.path}: {exc}") from exc
            self._records.append(rec)

    def history(self, tool_id: str | None = None) -> list[ApprovalRecord]:
        with self._lock:
            return [r for r in self._records if tool_id is None or r.tool_id == tool_id]

    def tool_ids(self) -> list[str]:
        with self._lock:
            return sorted({r.tool_id for r in self._records})

    def current(self, tool_id: str) -> ApprovalRecord | None:
        best: ApprovalRecord | None = None
        for rec in self.history(tool_id):
            if rec.revoked:
                best = None
            elif best is None or rec.version >= best.version:
                best = rec
        if best is not None:
            _check_record(best)
        return best

    def __len__(self) -> int:
        return len(self._records)


class Outcome(str, enum.Enum):
    ALLOWED_EXISTING = "ALLOWED_EXISTING"
    NEEDS_APPROVAL_NEW_TOOL = "NEEDS_APPROVAL_NEW_TOOL"
    NEEDS_APPROVAL_NEW_VERSION = "NEEDS_APPROVAL_NEW_VERSION"
    NEEDS_APPROVAL_TAMPERED = "NEEDS_APPROVAL_TAMPERED"
    REJECTED_SIGNATURE = "REJECTED_SIGNATURE"
    DOWNGRADE_WARNING = "DOWNGRADE_WARNING"

    @property
    def needs_approval(self) -> bool:
        return self.value.startswith("NEEDS_APPROVAL")


class DowngradePolicy(str, enum.Enum):
    ALLOW = "allow"
    WARN = "warn"
    BLOCK = "block"


@dataclass(frozen=True)
class ApprovalConfig:
    strict: bool = True
    downgrade: DowngradePolicy = DowngradePolicy.BLOCK
    # Reject same-version content changes outright instead of prompting.
    tamper_hard_fail: bool = False


@dataclass(frozen=True)
class VerificationOutcome:
    status: Outcome
    verification: VerificationResult
    report: ChangeReport | None = None
    current: ApprovalRecord | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "verification": self.verification.to_dict(),
            "report": self.report.to_dict() if self.report is not None else None,
        }


def evaluate_tool(
    sd: SignedToolDefinition,
    ts: TrustStore,
    store: ApprovalStore,
    *,
    strict: bool = True,
) -> VerificationOutcome:
    """Classify a presented tool against its signature and the approval history.

    Never modifies ``store``.
    """
    verification = verify_signed_definition(sd, ts)
    if not verification:
        log.info("Tool definition signature invalid for %s", sd.tool_id)
        return VerificationOutcome(Outcome.REJECTED_SIGNATURE, verification)

    definition = sd.definition
    current = store.current(definition.id)
    if current is None:
        return VerificationOutcome(Outcome.NEEDS_APPROVAL_NEW_TOOL, verification)

    report = None
    if current.definition is not None:
        report = diff_definitions(current.definition, definition, strict=strict)

    order = compare_versions(definition.version, current.version)
    if order is Ordering.EQUAL:
        if content_hash(definition) == current.content_hash:
            return VerificationOutcome(Outcome.ALLOWED_EXISTING, verification, report, current)
        log.warning("Tampering detected for %s version %s", definition.id, definition.version)
        return VerificationOutcome(Outcome.NEEDS_APPROVAL_TAMPERED, verification, report, current)
    if order is Ordering.LESS:
        log.warning("Older version %s of tool %s presented", definition.version, definition.id)
        return VerificationOutcome(Outcome.DOWNGRADE_WARNING, verification, report, current)
    return VerificationOutcome(Outcome.NEEDS_APPROVAL_NEW_VERSION, verification, report, current)


def record_approval(
    sd: SignedToolDefinition,
    granted_permissions: Iterable[str] | None,
    store: ApprovalStore,
    *,
    now: int = 0,
) -> ApprovalRecord:
    """Persist consent for ``sd``; ``None`` grants everything it declares."""
    definition = sd.definition
    granted = definition.permissions if granted_permissions is None else frozenset(granted_permissions)
    extra = granted - definition.permissions
    if extra:
        raise SubsetViolation(f"cannot grant undeclared permissions {sorted(extra)} to {definition.id}")
    rec = ApprovalRecord(
        tool_id=definition.id,
        version=definition.version,
        content_hash=content_hash(definition),
        granted_permissions=granted,
        approved_at=now,
        definition=definition,
    )
    store._append(rec)
    return rec


def revoke_approval(tool_id: str, store: ApprovalStore, *, now: int = 0) -> None:
    current = store.current(tool_id)
    if current is None:
        raise NotFound(f"no current approval for {tool_id!r}")
    store._append(
        ApprovalRecord(
            tool_id=tool_id,
            version=current.version,
            content_hash=current.content_hash,
            granted_permissions=frozenset(),
            approved_at=now,
            revoked=True,
        )
    )


def approval_prompt(outcome: VerificationOutcome, definition: ToolDefinition) -> str:
    if outcome.status is Outcome.NEEDS_APPROVAL_TAMPERED:
        return f"Tool {definition.id} content changed. Re-approve?"
    if outcome.status is Outcome.NEEDS_APPROVAL_NEW_VERSION:
        return f"New version {definition.version} for tool {definition.id}. Approve?"
    return f"Approve new tool {definition.id}?"


ConsentCallback = Callable[[str, VerificationOutcome, ToolDefinition], bool]


@dataclass(frozen=True)
class ApprovalResult:
    outcome: VerificationOutcome
    usable: bool
    prompted: bool = False
    record: ApprovalRecord | None = None


def verify_and_approve(
    sd: SignedToolDefinition,
    ts: TrustStore,
    store: ApprovalStore,
    consent: ConsentCallback,
    *,
    now: int = 0,
    config: ApprovalConfig = ApprovalConfig(),
) -> ApprovalResult:
    """Full client-side flow: classify, prompt when needed, store on consent."""
    outcome = evaluate_tool(sd, ts, store, strict=config.strict)
    status = outcome.status
    if status is Outcome.REJECTED_SIGNATURE:
        return ApprovalResult(outcome, usable=False)
    if status is Outcome.ALLOWED_EXISTING:
        return ApprovalResult(outcome, usable=True)
    if status is Outcome.DOWNGRADE_WARNING:
        return ApprovalResult(outcome, usable=config.downgrade is not DowngradePolicy.BLOCK)
    if status is Outcome.NEEDS_APPROVAL_TAMPERED and config.tamper_hard_fail:
        return ApprovalResult(outcome, usable=False)

    report = outcome.report
    if report is not None and not report.requires_reapproval and outcome.current is not None:
        # lenient mode, cosmetic-only change: carry the previous grant forward
        granted = outcome.current.granted_permissions & sd.definition.permissions
        rec = record_approval(sd, granted, store, now=now)
        return ApprovalResult(outcome, usable=True, record=rec)

    if not consent(approval_prompt(outcome, sd.definition), outcome, sd.definition):
        return ApprovalResult(outcome, usable=False, prompted=True)
    rec = record_approval(sd, None, store, now=now)
    return ApprovalResult(outcome, usable=True, prompted=True, record=rec)
