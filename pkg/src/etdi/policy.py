"""Embedded policy decision point with signed policy documents.

Semantics follow the usual forbid-overrides-permit model: a request is
allowed iff at least one PERMIT rule matches and no FORBID rule does.
Nothing matching means deny.

Conditions are written as nested arrays::

    ["and", ["eq", "user.department", "finance"], ["lt", "request.time", 1700000000]]

Operators: ``eq neq lt lte gt gte in`` and the combinators ``and or not``.
A condition that mentions an attribute missing from the context is false.
Otherwise every comparison is evaluated (no short-circuit), so a type
mismatch anywhere in the tree is reported regardless of operand order.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

from .crypto import (
    ALGORITHM,
    Invalid,
    KeyPair,
    TrustStore,
    VerificationResult,
    b64decode,
    b64encode,
    verify_detached,
)
from .errors import ConditionSyntaxError, ConditionTypeError, EmptyStore, PolicyError, StoreIOError
from .model import Ordering, SemVer, canonical_json, compare_versions

COMPARISONS = ("eq", "neq", "lt", "lte", "gt", "gte", "in")
ORDERING_OPS = ("lt", "lte", "gt", "gte")
Scalar = Union[str, int, float, bool]


def _kind(value: Any) -> str | None:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    return None


class _Missing(Exception):
    pass


def lookup(context: Mapping[str, Any], path: str) -> Any:
    """Resolve a dotted attribute path; flat dotted keys take precedence."""
    if path in context:
        return context[path]
    node: Any = context
    for part in path.split("."):
        if not isinstance(node, Mapping) or part not in node:
            raise _Missing(path)
        node = node[part]
    return node


@dataclass(frozen=True)
class Compare:
    op: str
    path: str
    value: Any

    def paths(self) -> Iterator[str]:
        yield self.path

    def to_raw(self) -> list[Any]:
        return [self.op, self.path, list(self.value) if self.op == "in" else self.value]

    def evaluate(self, context: Mapping[str, Any]) -> bool:
        actual = lookup(context, self.path)
        ak = _kind(actual)
        if self.op == "in":
            if ak != "string" or any(_kind(v) != "string" for v in self.value):
                raise ConditionTypeError(f"'in' needs a string attribute and string list: {self.path}={actual!r}")
            return actual in self.value
        lk = _kind(self.value)
        if ak is None or ak != lk:
            raise ConditionTypeError(f"{self.op} compares {ak} with {lk} at {self.path}")
        if self.op == "eq":
            return actual == self.value
        if self.op == "neq":
            return actual != self.value
        if ak != "number":
            raise ConditionTypeError(f"{self.op} needs numbers at {self.path}")
        if self.op == "lt":
            return actual < self.value
        if self.op == "lte":
            return actual <= self.value
        if self.op == "gt":
            return actual > self.value
        return actual >= self.value


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or" | "not"
    items: tuple[Condition, ...]

    def paths(self) -> Iterator[str]:
        for item in self.items:
            yield from item.paths()

    def to_raw(self) -> list[Any]:
        return [self.op, *(i.to_raw() for i in self.items)]

    def evaluate(self, context: Mapping[str, Any]) -> bool:
        values = [item.evaluate(context) for item in self.items]
        if self.op == "and":
            return all(values)
        if self.op == "or":
            return any(values)
        return not values[0]


Condition = Union[Compare, BoolOp]


def parse_condition(raw: Any) -> Condition:
    if not isinstance(raw, (list, tuple)) or not raw or not isinstance(raw[0], str):
        raise ConditionSyntaxError(f"condition must be [operator, ...]: {raw!r}")
    op, args = raw[0], raw[1:]
    if op in ("and", "or"):
        if not args:
            raise ConditionSyntaxError(f"{op} needs at least one operand")
        return BoolOp(op, tuple(parse_condition(a) for a in args))
    if op == "not":
        if len(args) != 1:
            raise ConditionSyntaxError("not takes exactly one operand")
        return BoolOp(op, (parse_condition(args[0]),))
    if op in COMPARISONS:
        if len(args) != 2 or not isinstance(args[0], str) or not args[0]:
            raise ConditionSyntaxError(f"{op} takes an attribute path and a literal: {raw!r}")
        literal = args[1]
        if op == "in":
            if not isinstance(literal, (list, tuple)):
                raise ConditionSyntaxError(f"'in' needs a list literal: {raw!r}")
            literal = tuple(literal)
            if any(_kind(v) is None for v in literal):
                raise ConditionSyntaxError(f"'in' list must hold scalars: {raw!r}")
        elif _kind(literal) is None:
            raise ConditionSyntaxError(f"literal must be a string, number or boolean: {raw!r}")
        return Compare(op, args[0], literal)
    raise ConditionSyntaxError(f"unknown operator {op!r}")


def static_type_issues(expr: Condition) -> list[str]:
    """Type problems detectable without a context (used by strict loading)."""
    issues: list[str] = []
    seen: dict[str, set[str]] = {}

    def walk(node: Condition) -> None:
        if isinstance(node, BoolOp):
            for item in node.items:
                walk(item)
            return
        if node.op == "in":
            kinds = {_kind(v) for v in node.value}
            if kinds - {"string"}:
                issues.append(f"'in' list for {node.path} must contain only strings")
            kind = "string"
        else:
            kind = _kind(node.value) or "?"
            if node.op in ORDERING_OPS and kind != "number":
                issues.append(f"{node.op} on {node.path} needs a numeric literal, got {kind}")
        seen.setdefault(node.path, set()).add(kind)

    walk(expr)
    for path, kinds in sorted(seen.items()):
        if len(kinds) > 1:
            issues.append(f"{path} compared against {sorted(kinds)}")
    return issues


def eval_condition(expr: Condition | Sequence[Any], context: Mapping[str, Any]) -> bool:
    """Evaluate a condition; raises :class:`ConditionTypeError` on mismatched types."""
    if not isinstance(expr, (Compare, BoolOp)):
        expr = parse_condition(expr)
    try:
        for path in expr.paths():
            lookup(context, path)
    except _Missing:
        return False
    return expr.evaluate(context)


class Effect(str, enum.Enum):
    PERMIT = "permit"
    FORBID = "forbid"


def pattern_matches(pattern: str, value: str) -> bool:
    if pattern.endswith("*"):
        return value.startswith(pattern[:-1])
    return value == pattern


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    effect: Effect
    principal: str
    action: str
    resource: str
    condition: Condition | None = None

    def __post_init__(self) -> None:
        if not self.rule_id:
            raise PolicyError("rule_id must be non-empty")
        for attr in ("principal", "action", "resource"):
            if not isinstance(getattr(self, attr), str) or not getattr(self, attr):
                raise PolicyError(f"rule {self.rule_id}: {attr} matcher must be non-empty")
        object.__setattr__(self, "effect", Effect(self.effect))
        if self.condition is not None and not isinstance(self.condition, (Compare, BoolOp)):
            object.__setattr__(self, "condition", parse_condition(self.condition))

    def targets(self, req: AuthorizationRequest) -> bool:
        return (
            pattern_matches(self.principal, req.principal)
            and pattern_matches(self.action, req.action)
            and pattern_matches(self.resource, req.resource)
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "rule_id": self.rule_id,
            "effect": self.effect.value,
            "principal": self.principal,
            "action": self.action,
            "resource": self.resource,
        }
        if self.condition is not None:
            out["condition"] = self.condition.to_raw()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PolicyRule:
        try:
            return cls(
                rule_id=data["rule_id"],
                effect=Effect(data["effect"]),
                principal=data["principal"],
                action=data["action"],
                resource=data["resource"],
                condition=data.get("condition"),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, PolicyError):
                raise
            raise PolicyError(f"malformed rule {data!r}: {exc}") from exc


@dataclass(frozen=True)
class PolicyDocument:
    policy_store_id: str
    version: SemVer
    author_provider_id: str
    rules: tuple[PolicyRule, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise PolicyError(f"duplicate rule ids in {self.policy_store_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy_store_id": self.policy_store_id,
            "version": self.version.to_dict(),
            "author_provider_id": self.author_provider_id,
            "rules": [r.to_dict() for r in self.rules],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PolicyDocument:
        try:
            return cls(
                policy_store_id=data["policy_store_id"],
                version=SemVer.from_dict(data["version"]),
                author_provider_id=data["author_provider_id"],
                rules=tuple(PolicyRule.from_dict(r) for r in data.get("rules", [])),
            )
        except (KeyError, TypeError) as exc:
            raise PolicyError(f"malformed policy document: {exc}") from exc

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class SignedPolicyDocument:
    document: PolicyDocument
    signature: bytes
    key_id: str
    algorithm: str = ALGORITHM
    signed_bytes_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "definition": self.document.to_dict(),
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "signature": b64encode(self.signature),
            "signed_bytes_hash": self.signed_bytes_hash,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SignedPolicyDocument:
        body = data.get("definition", data.get("document"))
        if body is None:
            # a bare policy document: loadable, but it will never verify
            return cls(PolicyDocument.from_dict(data), b"", "")
        try:
            return cls(
                document=PolicyDocument.from_dict(body),
                signature=b64decode(data.get("signature") or ""),
                key_id=data.get("key_id") or "",
                algorithm=data.get("algorithm") or ALGORITHM,
                signed_bytes_hash=data.get("signed_bytes_hash") or "",
            )
        except ValueError as exc:
            if isinstance(exc, PolicyError):
                raise
            raise PolicyError(f"malformed policy envelope: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> SignedPolicyDocument:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise StoreIOError(f"cannot read policy file {path}: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, PolicyError):
                raise
            raise PolicyError(f"policy file {path} is not JSON: {exc}") from exc


def sign_policy(doc: PolicyDocument, pair: KeyPair) -> SignedPolicyDocument:
    payload = doc.canonical_bytes()
    return SignedPolicyDocument(doc, pair.sign(payload), pair.key_id, pair.algorithm,
                                hashlib.sha256(payload).hexdigest())


def verify_policy(spd: SignedPolicyDocument, ts: TrustStore) -> VerificationResult:
    return verify_detached(
        ts.providers,
        spd.document.author_provider_id,
        spd.key_id,
        spd.algorithm,
        spd.signature,
        spd.document.canonical_bytes(),
        spd.signed_bytes_hash,
    )


@dataclass(frozen=True)
class LoadReport:
    loaded: tuple[str, ...] = ()
    rejected: tuple[tuple[str, str], ...] = ()
    superseded: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "loaded": list(self.loaded),
            "rejected": [list(r) for r in self.rejected],
            "superseded": [list(s) for s in self.superseded],
        }


@dataclass(frozen=True)
class PolicyStore:
    documents: Mapping[str, PolicyDocument] = field(default_factory=dict)
    report: LoadReport = LoadReport()

    def rules(self, policy_store_id: str | None = None) -> Iterator[PolicyRule]:
        if policy_store_id is not None:
            doc = self.documents.get(policy_store_id)
            if doc is not None:
                yield from doc.rules
            return
        for _, doc in sorted(self.documents.items()):
            yield from doc.rules


def load_policy_store(
    docs: Iterable[SignedPolicyDocument],
    ts: TrustStore,
    *,
    strict: bool = False,
) -> PolicyStore:
    """Keep only documents whose signatures verify.

    For a repeated ``policy_store_id`` the highest version wins; on a version
    tie the first document seen is kept.
    """
    chosen: dict[str, PolicyDocument] = {}
    rejected: list[tuple[str, str]] = []
    superseded: list[tuple[str, str]] = []
    for spd in docs:
        doc = spd.document
        result = verify_policy(spd, ts)
        if not result:
            assert isinstance(result, Invalid)
            rejected.append((doc.policy_store_id, result.reason.value))
            continue
        if strict:
            issues = [i for r in doc.rules if r.condition is not None for i in static_type_issues(r.condition)]
            if issues:
                rejected.append((doc.policy_store_id, "INVALID_CONDITION: " + "; ".join(issues)))
                continue
        prior = chosen.get(doc.policy_store_id)
        if prior is None:
            chosen[doc.policy_store_id] = doc
        elif compare_versions(doc.version, prior.version) is Ordering.GREATER:
            superseded.append((prior.policy_store_id, str(prior.version)))
            chosen[doc.policy_store_id] = doc
        else:
            superseded.append((doc.policy_store_id, str(doc.version)))
    report = LoadReport(tuple(sorted(chosen)), tuple(rejected), tuple(superseded))
    if not chosen:
        raise EmptyStore("no policy document passed verification", report)
    return PolicyStore(chosen, report)


@dataclass(frozen=True)
class AuthorizationRequest:
    principal: str
    action: str
    resource: str
    context: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for attr in ("principal", "action", "resource"):
            if not isinstance(getattr(self, attr), str) or not getattr(self, attr):
                raise PolicyError(f"{attr} must be a non-empty string")

    def to_dict(self) -> dict[str, Any]:
        return {"principal": self.principal, "action": self.action,
                "resource": self.resource, "context": dict(self.context)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AuthorizationRequest:
        try:
            return cls(data["principal"], data["action"], data["resource"], data.get("context") or {})
        except KeyError as exc:
            raise PolicyError(f"request is missing {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class Decision:
    allowed: bool
    determining_rules: tuple[str, ...]
    reason: str
    errors: tuple[tuple[str, str], ...] = ()

    def __bool__(self) -> bool:
        return self.allowed

    def to_dict(self) -> dict[str, Any]:
        return {
            "allowed": self.allowed,
            "determining_rules": list(self.determining_rules),
            "reason": self.reason,
            "errors": [list(e) for e in self.errors],
        }


def is_authorized(
    store: PolicyStore,
    req: AuthorizationRequest,
    policy_store_id: str | None = None,
) -> Decision:
    """Evaluate ``req`` against one named policy store, or all of them."""
    permits: list[str] = []
    forbids: list[str] = []
    errors: list[tuple[str, str]] = []
    for rule in store.rules(policy_store_id):
        if not rule.targets(req):
            continue
        if rule.condition is not None:
            try:
                if not eval_condition(rule.condition, req.context):
                    continue
            except ConditionTypeError as exc:
                errors.append((rule.rule_id, str(exc)))
                continue
        (permits if rule.effect is Effect.PERMIT else forbids).append(rule.rule_id)

    matched = tuple(permits + forbids)
    if forbids:
        reason = f"forbidden by {', '.join(forbids)}"
    elif permits:
        reason = f"permitted by {', '.join(permits)}"
    else:
        reason = "no matching permit rule (default deny)"
    if errors:
        reason += "; rules skipped on type error: " + ", ".join(rid for rid, _ in errors)
    return Decision(bool(permits) and not forbids, matched, reason, tuple(errors))
