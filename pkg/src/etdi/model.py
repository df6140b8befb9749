"""Tool definitions, canonical encoding, content hashing and version ordering.

Everything that gets signed, hashed or diffed goes through
:func:`canonical_json` first, so two processes that agree on the logical
document always agree on the bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import EncodingError, IdMismatch, InvalidDefinition

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def _check_canonical(value: Any, path: str = "$") -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodingError(f"non-finite number at {path}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_canonical(item, f"{path}[{i}]")
        return
    if isinstance(value, Mapping):
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodingError(f"non-string key {key!r} at {path}")
            _check_canonical(item, f"{path}.{key}")
        return
    raise EncodingError(f"unsupported value of type {type(value).__name__} at {path}")


def canonical_json(obj: Any) -> bytes:
    """Deterministic JSON: sorted keys, no whitespace, UTF-8, finite numbers only."""
    _check_canonical(obj)
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


_SEMVER = re.compile(r"(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)")


@dataclass(frozen=True, order=True)
class SemVer:
    major: int
    minor: int = 0
    patch: int = 0

    def __post_init__(self) -> None:
        for part in (self.major, self.minor, self.patch):
            if isinstance(part, bool) or not isinstance(part, int) or part < 0:
                raise InvalidDefinition(f"version parts must be non-negative integers: {self!r}")

    @classmethod
    def parse(cls, text: str) -> SemVer:
        m = _SEMVER.fullmatch(text) if isinstance(text, str) else None
        if m is None:
            raise InvalidDefinition(f"not a MAJOR.MINOR.PATCH version: {text!r}")
        return cls(*(int(p) for p in m.groups()))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SemVer:
        try:
            return cls(data["major"], data["minor"], data["patch"])
        except (KeyError, TypeError) as exc:
            raise InvalidDefinition(f"bad version object: {data!r}") from exc

    def to_dict(self) -> dict[str, int]:
        return {"major": self.major, "minor": self.minor, "patch": self.patch}

    def __str__(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"


def compare_versions(a: SemVer, b: SemVer) -> Ordering:
    ka, kb = (a.major, a.minor, a.patch), (b.major, b.minor, b.patch)
    if ka < kb:
        return Ordering.LESS
    if ka > kb:
        return Ordering.GREATER
    return Ordering.EQUAL


def _scope_set(values: Iterable[str], what: str) -> frozenset[str]:
    if isinstance(values, str):
        raise InvalidDefinition(f"{what} must be a collection of strings, not a string")
    items = list(values)
    for v in items:
        if not isinstance(v, str) or not v:
            raise InvalidDefinition(f"{what} entries must be non-empty strings: {v!r}")
    if not isinstance(values, (set, frozenset)) and len(set(items)) != len(items):
        raise InvalidDefinition(f"{what} contains duplicates: {sorted(items)}")
    return frozenset(items)


@dataclass(frozen=True, eq=True)
class ToolDefinition:
    id: str
    name: str
    description: str
    provider_id: str
    version: SemVer
    input_schema: Any = field(default_factory=dict)
    output_schema: Any = field(default_factory=dict)
    permissions: frozenset[str] = frozenset()
    required_caller_entitlements: frozenset[str] = frozenset()
    api_contract_hash: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id or any(c.isspace() for c in self.id):
            raise InvalidDefinition(f"tool id must be non-empty with no whitespace: {self.id!r}")
        for attr in ("name", "description", "provider_id"):
            if not isinstance(getattr(self, attr), str):
                raise InvalidDefinition(f"{attr} must be a string")
        if not isinstance(self.version, SemVer):
            raise InvalidDefinition("version must be a SemVer")
        object.__setattr__(self, "permissions", _scope_set(self.permissions, "permissions"))
        object.__setattr__(
            self,
            "required_caller_entitlements",
            _scope_set(self.required_caller_entitlements, "required_caller_entitlements"),
        )
        if self.api_contract_hash is not None and not (
            isinstance(self.api_contract_hash, str) and _HEX64.match(self.api_contract_hash)
        ):
            raise InvalidDefinition("api_contract_hash must be 64 lowercase hex characters")

    __hash__ = None  # type: ignore[assignment]  # schemas are mutable documents

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "provider_id": self.provider_id,
            "version": self.version.to_dict(),
            "input_schema": self.input_schema,
            "output_schema": self.output_schema,
            "permissions": sorted(self.permissions),
            "required_caller_entitlements": sorted(self.required_caller_entitlements),
            "api_contract_hash": self.api_contract_hash,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ToolDefinition:
        if not isinstance(data, Mapping):
            raise InvalidDefinition("tool definition must be an object")
        try:
            return cls(
                id=data["id"],
                name=data["name"],
                description=data["description"],
                provider_id=data["provider_id"],
                version=SemVer.from_dict(data["version"]),
                input_schema=data.get("input_schema", {}),
                output_schema=data.get("output_schema", {}),
                permissions=data.get("permissions", []),
                required_caller_entitlements=data.get("required_caller_entitlements", []),
                api_contract_hash=data.get("api_contract_hash"),
            )
        except KeyError as exc:
            raise InvalidDefinition(f"missing field {exc.args[0]!r}") from exc

    def replace(self, **changes: Any) -> ToolDefinition:
        data = {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "provider_id": self.provider_id,
            "version": self.version,
            "input_schema": self.input_schema,
            "output_schema": self.output_schema,
            "permissions": self.permissions,
            "required_caller_entitlements": self.required_caller_entitlements,
            "api_contract_hash": self.api_contract_hash,
        }
        data.update(changes)
        return ToolDefinition(**data)


def canonical_encode(definition: ToolDefinition) -> bytes:
    return canonical_json(definition.to_dict())


def decode_definition(data: bytes | str) -> ToolDefinition:
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidDefinition(f"not a JSON document: {exc}") from exc
    return ToolDefinition.from_dict(doc)


def content_hash(definition: ToolDefinition) -> str:
    return sha256_hex(canonical_encode(definition))


class ChangeKind(str, enum.Enum):
    SECURITY_RELEVANT = "SECURITY_RELEVANT"
    COSMETIC = "COSMETIC"


# provider_id is treated as identity, hence security relevant; a bare version
# bump carries no capability change by itself.
FIELD_KINDS: dict[str, ChangeKind] = {
    "name": ChangeKind.COSMETIC,
    "description": ChangeKind.COSMETIC,
    "version": ChangeKind.COSMETIC,
    "provider_id": ChangeKind.SECURITY_RELEVANT,
    "permissions": ChangeKind.SECURITY_RELEVANT,
    "required_caller_entitlements": ChangeKind.SECURITY_RELEVANT,
    "input_schema": ChangeKind.SECURITY_RELEVANT,
    "output_schema": ChangeKind.SECURITY_RELEVANT,
    "api_contract_hash": ChangeKind.SECURITY_RELEVANT,
}
_SET_FIELDS = ("permissions", "required_caller_entitlements")


@dataclass(frozen=True)
class FieldChange:
    field: str
    kind: ChangeKind
    old: Any
    new: Any
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"field": self.field, "kind": self.kind.value, "old": self.old, "new": self.new}
        if self.field in _SET_FIELDS:
            out["added"] = list(self.added)
            out["removed"] = list(self.removed)
        return out


@dataclass(frozen=True)
class ChangeReport:
    tool_id: str
    changes: tuple[FieldChange, ...]
    old_hash: str
    new_hash: str
    strict: bool = True

    @property
    def security_relevant(self) -> bool:
        return any(c.kind is ChangeKind.SECURITY_RELEVANT for c in self.changes)

    @property
    def requires_reapproval(self) -> bool:
        if self.strict:
            return self.old_hash != self.new_hash
        return self.security_relevant

    @property
    def added_permissions(self) -> tuple[str, ...]:
        for c in self.changes:
            if c.field == "permissions":
                return c.added
        return ()

    def __bool__(self) -> bool:
        return bool(self.changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_id": self.tool_id,
            "old_hash": self.old_hash,
            "new_hash": self.new_hash,
            "strict": self.strict,
            "requires_reapproval": self.requires_reapproval,
            "changes": [c.to_dict() for c in self.changes],
        }

    def summary(self) -> str:
        if not self.changes:
            return f"{self.tool_id}: no changes"
        lines = [f"{self.tool_id}: {self.old_hash[:12]} -> {self.new_hash[:12]}"]
        for c in self.changes:
            if c.field in _SET_FIELDS:
                detail = f"+{list(c.added)} -{list(c.removed)}"
            else:
                detail = f"{c.old!r} -> {c.new!r}"
            lines.append(f"  [{c.kind.value}] {c.field}: {detail}")
        return "\n".join(lines)


def diff_definitions(old: ToolDefinition, new: ToolDefinition, *, strict: bool = True) -> ChangeReport:
    """Field-by-field comparison of two definitions of the same tool.

    With ``strict`` any content change requires re-approval; otherwise only
    security relevant ones do.
    """
    if old.id != new.id:
        raise IdMismatch(f"cannot diff {old.id!r} against {new.id!r}")
    a, b = old.to_dict(), new.to_dict()
    changes = []
    for name, kind in FIELD_KINDS.items():
        if canonical_json(a[name]) == canonical_json(b[name]):
            continue
        if name in _SET_FIELDS:
            before, after = set(a[name]), set(b[name])
            changes.append(
                FieldChange(name, kind, a[name], b[name],
                            added=tuple(sorted(after - before)),
                            removed=tuple(sorted(before - after)))
            )
        else:
            changes.append(FieldChange(name, kind, a[name], b[name]))
    return ChangeReport(
        tool_id=old.id,
        changes=tuple(changes),
        old_hash=content_hash(old),
        new_hash=content_hash(new),
        strict=strict,
    )
