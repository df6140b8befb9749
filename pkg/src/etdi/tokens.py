"""Tool-bound access tokens in JWS compact form, scope matching and revocation.

Tokens are ``base64url(header).base64url(claims).base64url(signature)`` with an
Ed25519 signature over the first two segments. A test IdP signs them directly;
there is no grant flow.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .crypto import KeyPair, KeyStatus, TrustStore, verify_bytes
from .errors import ETDIError, InvalidClaims, MalformedScope, StoreIOError
from .model import SemVer, ToolDefinition, canonical_json

JWS_ALG = "EdDSA"


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    try:
        return base64.urlsafe_b64decode((text + pad).encode("ascii"))
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ValueError("invalid base64url segment") from exc


@dataclass(frozen=True)
class TokenClaims:
    iss: str
    sub: str
    iat: int
    exp: int
    tool_id: str
    tool_version: str
    scopes: frozenset[str] = frozenset()
    jti: str = field(default_factory=lambda: uuid.uuid4().hex)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scopes", frozenset(self.scopes))

    def validate(self) -> None:
        for name in ("iss", "sub", "jti"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise InvalidClaims(f"{name} must be a non-empty string")
        for name in ("iat", "exp"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidClaims(f"{name} must be an integer")
        if self.iat > self.exp:
            raise InvalidClaims(f"iat {self.iat} is after exp {self.exp}")
        if not isinstance(self.tool_id, str):
            raise InvalidClaims("tool_id must be a string")
        if self.tool_version:
            try:
                SemVer.parse(self.tool_version)
            except ValueError as exc:
                raise InvalidClaims(str(exc)) from exc
        for s in self.scopes:
            parse_scope(s)

    def to_dict(self) -> dict[str, Any]:
        return {
            "iss": self.iss,
            "sub": self.sub,
            "iat": self.iat,
            "exp": self.exp,
            "tool_id": self.tool_id,
            "tool_version": self.tool_version,
            "scopes": sorted(self.scopes),
            "jti": self.jti,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenClaims:
        scopes = data.get("scopes", [])
        if isinstance(scopes, str):
            scopes = scopes.split()
        return cls(
            iss=data["iss"],
            sub=data["sub"],
            iat=data["iat"],
            exp=data["exp"],
            tool_id=data.get("tool_id", ""),
            tool_version=data.get("tool_version", ""),
            scopes=frozenset(scopes),
            jti=data["jti"],
        )


@dataclass(frozen=True)
class ToolToken:
    claims: TokenClaims
    kid: str
    compact: str

    def __str__(self) -> str:
        return self.compact


def issue_token(idp_key: KeyPair, claims: TokenClaims) -> ToolToken:
    claims.validate()
    header = {"alg": JWS_ALG, "kid": idp_key.key_id, "typ": "JWT"}
    signing_input = b64url_encode(canonical_json(header)) + "." + b64url_encode(canonical_json(claims.to_dict()))
    signature = idp_key.sign(signing_input.encode("ascii"))
    return ToolToken(claims, idp_key.key_id, signing_input + "." + b64url_encode(signature))


class TokenErrorReason(str, enum.Enum):
    UNTRUSTED_ISSUER = "UNTRUSTED_ISSUER"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    EXPIRED = "EXPIRED"
    TOOL_BINDING_MISMATCH = "TOOL_BINDING_MISMATCH"
    REVOKED = "REVOKED"


class TokenError(ETDIError):
    def __init__(self, reason: TokenErrorReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class ToolBinding:
    tool_id: str
    tool_version: str

    @classmethod
    def of(cls, definition: ToolDefinition) -> ToolBinding:
        return cls(definition.id, str(definition.version))


class RevocationList:
    """Revoked token ids; safe for concurrent readers, additions are locked."""

    def __init__(self, jtis: Iterable[str] = ()) -> None:
        self._jtis = set(jtis)
        self._lock = threading.Lock()

    def add(self, jti: str) -> None:
        with self._lock:
            self._jtis = self._jtis | {jti}

    def __contains__(self, jti: object) -> bool:
        return jti in self._jtis

    def __iter__(self):
        return iter(sorted(self._jtis))

    def __len__(self) -> int:
        return len(self._jtis)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> RevocationList:
        p = Path(path)
        if not p.exists():
            return cls()
        try:
            return cls(line.strip() for line in p.read_text(encoding="utf-8").splitlines() if line.strip())
        except OSError as exc:
            raise StoreIOError(f"cannot read revocation list {path}: {exc}") from exc

    def save(self, path: str | os.PathLike[str]) -> None:
        try:
            Path(path).write_text("".join(j + "\n" for j in self), encoding="utf-8")
        except OSError as exc:
            raise StoreIOError(f"cannot write revocation list {path}: {exc}") from exc


def _decode(token: str | ToolToken) -> tuple[dict[str, Any], dict[str, Any], bytes, bytes]:
    compact = token.compact if isinstance(token, ToolToken) else token
    parts = compact.split(".") if isinstance(compact, str) else []
    if len(parts) != 3:
        raise TokenError(TokenErrorReason.BAD_SIGNATURE, "token must have three segments")
    try:
        header = json.loads(b64url_decode(parts[0]))
        payload = json.loads(b64url_decode(parts[1]))
        signature = b64url_decode(parts[2])
    except ValueError as exc:
        raise TokenError(TokenErrorReason.BAD_SIGNATURE, f"undecodable token: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(payload, dict):
        raise TokenError(TokenErrorReason.BAD_SIGNATURE, "segments must be JSON objects")
    return header, payload, signature, (parts[0] + "." + parts[1]).encode("ascii")


def validate_token(
    token: str | ToolToken,
    ts: TrustStore,
    expected: ToolBinding | None,
    now: int,
    rl: RevocationList | Iterable[str] = (),
) -> TokenClaims:
    """Return the verified claims or raise :class:`TokenError`.

    Checks run in order: issuer trust, signature, expiry (``now >= exp`` is
    expired), tool binding (skipped when ``expected`` is None), revocation.
    """
    header, payload, signature, signing_input = _decode(token)
    iss, kid = payload.get("iss"), header.get("kid")
    key = ts.issuer_key(iss, kid) if isinstance(iss, str) and isinstance(kid, str) else None
    if key is None or key.status is not KeyStatus.ACTIVE:
        raise TokenError(TokenErrorReason.UNTRUSTED_ISSUER, f"issuer {iss!r} key {kid!r}")
    if header.get("alg") != JWS_ALG or not verify_bytes(key.public_key, signature, signing_input):
        raise TokenError(TokenErrorReason.BAD_SIGNATURE)
    try:
        claims = TokenClaims.from_dict(payload)
        claims.validate()
    except (KeyError, TypeError, InvalidClaims, MalformedScope) as exc:
        raise TokenError(TokenErrorReason.BAD_SIGNATURE, f"malformed claims: {exc}") from exc
    if now >= claims.exp:
        raise TokenError(TokenErrorReason.EXPIRED, f"exp {claims.exp} <= now {now}")
    if expected is not None and (
        claims.tool_id != expected.tool_id or claims.tool_version != expected.tool_version
    ):
        raise TokenError(
            TokenErrorReason.TOOL_BINDING_MISMATCH,
            f"token for {claims.tool_id}@{claims.tool_version}, "
            f"presented to {expected.tool_id}@{expected.tool_version}",
        )
    if claims.jti in rl:
        raise TokenError(TokenErrorReason.REVOKED, claims.jti)
    return claims


def parse_scope(scope: str) -> tuple[str, ...]:
    if not isinstance(scope, str):
        raise MalformedScope(f"scope must be a string: {scope!r}")
    segments = tuple(scope.split(":"))
    if any(not s or s.isspace() for s in segments):
        raise MalformedScope(f"empty segment in scope {scope!r}")
    if "*" in segments[:-1]:
        raise MalformedScope(f"wildcard only allowed as the last segment: {scope!r}")
    return segments


def scope_covers(granted: str, needed: str) -> bool:
    """True if holding ``granted`` satisfies a requirement for ``needed``.

    A trailing ``*`` segment stands for one or more further segments, so
    ``fs:read:*`` covers ``fs:read:documents`` but not ``fs:read`` itself.
    """
    g, n = parse_scope(granted), parse_scope(needed)
    if g == n:
        return True
    if g[-1] != "*":
        return False
    prefix = g[:-1]
    return len(n) > len(prefix) and n[: len(prefix)] == prefix


@dataclass(frozen=True)
class AdherenceResult:
    missing: frozenset[str] = frozenset()

    @property
    def passed(self) -> bool:
        return not self.missing

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "missing": sorted(self.missing)}


PASS = AdherenceResult()


def check_scope_adherence(action_scopes: Iterable[str], token_scopes: Iterable[str]) -> AdherenceResult:
    held = list(token_scopes)
    for s in held:
        parse_scope(s)
    missing = frozenset(need for need in action_scopes if not any(scope_covers(h, need) for h in held))
    return AdherenceResult(missing)


def check_caller_entitlements(
    definition: ToolDefinition,
    user_token: str | ToolToken | None,
    ts: TrustStore,
    now: int,
    rl: RevocationList | Iterable[str] = (),
) -> AdherenceResult:
    """Does the caller's token carry what the tool says callers need?

    Token validity (issuer, signature, expiry, revocation) is checked first and
    raises :class:`TokenError`; tool binding does not apply to user tokens.
    """
    required = definition.required_caller_entitlements
    if not required:
        return PASS
    if user_token is None:
        return AdherenceResult(frozenset(required))
    claims = validate_token(user_token, ts, None, now, rl)
    return check_scope_adherence(required, claims.scopes)
