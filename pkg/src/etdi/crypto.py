"""Ed25519 keys, detached signatures over canonical bytes, and the trust store.

The trust store is an immutable value: every mutation returns a new store,
so readers never observe a half-applied update.
"""

from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterator, Mapping, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import DuplicateKey, InvalidDefinition, NotFound, StoreIOError
from .model import ToolDefinition, canonical_encode

ALGORITHM = "ed25519"


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, AttributeError) as exc:
        raise ValueError(f"invalid base64: {text!r}") from exc


@dataclass(frozen=True)
class KeyPair:
    key_id: str
    public_key: bytes
    private_key: bytes = field(repr=False)
    algorithm: str = ALGORITHM

    def __post_init__(self) -> None:
        if not self.key_id:
            raise ValueError("key_id must be non-empty")
        derived = _public_from_seed(self.private_key)
        if derived != self.public_key:
            raise ValueError(f"public key does not match private key for {self.key_id!r}")

    def sign(self, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(data)

    def to_dict(self) -> dict[str, str]:
        return {
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "public_key": b64encode(self.public_key),
            "private_key": b64encode(self.private_key),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> KeyPair:
        return cls(
            key_id=data["key_id"],
            public_key=b64decode(data["public_key"]),
            private_key=b64decode(data["private_key"]),
            algorithm=data.get("algorithm", ALGORITHM),
        )


def _public_from_seed(seed: bytes) -> bytes:
    if len(seed) != 32:
        raise ValueError("Ed25519 private key seed must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()


def generate_keypair(key_id: str) -> KeyPair:
    return keypair_from_seed(key_id, os.urandom(32))


def keypair_from_seed(key_id: str, seed: bytes) -> KeyPair:
    """Deterministic keypair; used by the simulation so runs are reproducible."""
    if len(seed) != 32:
        seed = hashlib.sha256(seed).digest()
    return KeyPair(key_id=key_id, public_key=_public_from_seed(seed), private_key=seed)


def verify_bytes(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


class KeyStatus(str, enum.Enum):
    ACTIVE = "ACTIVE"
    REVOKED = "REVOKED"


@dataclass(frozen=True)
class TrustedKey:
    key_id: str
    public_key: bytes
    status: KeyStatus = KeyStatus.ACTIVE
    algorithm: str = ALGORITHM

    def to_dict(self) -> dict[str, str]:
        return {
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "public_key": b64encode(self.public_key),
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrustedKey:
        return cls(
            key_id=data["key_id"],
            public_key=b64decode(data["public_key"]),
            status=KeyStatus(data.get("status", "ACTIVE")),
            algorithm=data.get("algorithm", ALGORITHM),
        )


_KeyTable = Mapping[str, tuple[TrustedKey, ...]]


def _freeze(table: Mapping[str, tuple[TrustedKey, ...]]) -> _KeyTable:
    return MappingProxyType({k: tuple(v) for k, v in table.items()})


def _add(table: _KeyTable, owner: str, key: TrustedKey) -> _KeyTable:
    keys = table.get(owner, ())
    if any(k.key_id == key.key_id for k in keys):
        raise DuplicateKey(f"key {key.key_id!r} already registered for {owner!r}")
    new = dict(table)
    new[owner] = keys + (key,)
    return _freeze(new)


def _revoke(table: _KeyTable, owner: str, key_id: str) -> _KeyTable:
    keys = table.get(owner)
    if not keys or not any(k.key_id == key_id for k in keys):
        raise NotFound(f"no key {key_id!r} for {owner!r}")
    new = dict(table)
    new[owner] = tuple(replace(k, status=KeyStatus.REVOKED) if k.key_id == key_id else k for k in keys)
    return _freeze(new)


@dataclass(frozen=True)
class TrustStore:
    """Provider and token-issuer public keys, each with an ACTIVE/REVOKED flag."""

    providers: _KeyTable = field(default_factory=lambda: _freeze({}))
    issuers: _KeyTable = field(default_factory=lambda: _freeze({}))

    def with_provider_key(self, provider_id: str, key_id: str, public_key: bytes) -> TrustStore:
        return replace(self, providers=_add(self.providers, provider_id, TrustedKey(key_id, public_key)))

    def with_issuer_key(self, issuer_id: str, key_id: str, public_key: bytes) -> TrustStore:
        return replace(self, issuers=_add(self.issuers, issuer_id, TrustedKey(key_id, public_key)))

    def trust_provider(self, provider_id: str, pair: KeyPair) -> TrustStore:
        return self.with_provider_key(provider_id, pair.key_id, pair.public_key)

    def trust_issuer(self, issuer_id: str, pair: KeyPair) -> TrustStore:
        return self.with_issuer_key(issuer_id, pair.key_id, pair.public_key)

    def revoke_provider_key(self, provider_id: str, key_id: str) -> TrustStore:
        return replace(self, providers=_revoke(self.providers, provider_id, key_id))

    def revoke_issuer_key(self, issuer_id: str, key_id: str) -> TrustStore:
        return replace(self, issuers=_revoke(self.issuers, issuer_id, key_id))

    @staticmethod
    def _find(table: _KeyTable, owner: str, key_id: str) -> TrustedKey | None:
        for k in table.get(owner, ()):
            if k.key_id == key_id:
                return k
        return None

    def provider_key(self, provider_id: str, key_id: str) -> TrustedKey | None:
        return self._find(self.providers, provider_id, key_id)

    def issuer_key(self, issuer_id: str, key_id: str) -> TrustedKey | None:
        return self._find(self.issuers, issuer_id, key_id)

    def revoked_keys(self) -> Iterator[tuple[str, str, str]]:
        for kind, table in (("provider", self.providers), ("issuer", self.issuers)):
            for owner, keys in sorted(table.items()):
                for k in keys:
                    if k.status is KeyStatus.REVOKED:
                        yield kind, owner, k.key_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "providers": {o: [k.to_dict() for k in ks] for o, ks in sorted(self.providers.items())},
            "issuers": {o: [k.to_dict() for k in ks] for o, ks in sorted(self.issuers.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrustStore:
        store = cls()
        for attr in ("providers", "issuers"):
            table: _KeyTable = _freeze({})
            for owner, keys in (data.get(attr) or {}).items():
                for raw in keys:
                    table = _add(table, owner, TrustedKey.from_dict(raw))
            store = replace(store, **{attr: table})
        return store

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> TrustStore:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls.from_dict(data)
        except OSError as exc:
            raise StoreIOError(f"cannot read trust store {path}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreIOError(f"malformed trust store {path}: {exc}") from exc

    def save(self, path: str | os.PathLike[str]) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StoreIOError(f"cannot write trust store {path}: {exc}") from exc


def revoke_key(ts: TrustStore, provider_id: str, key_id: str) -> TrustStore:
    """Mark a provider key REVOKED. Revoking twice is harmless."""
    return ts.revoke_provider_key(provider_id, key_id)


class InvalidReason(str, enum.Enum):
    UNKNOWN_PROVIDER = "UNKNOWN_PROVIDER"
    UNKNOWN_KEY = "UNKNOWN_KEY"
    REVOKED_KEY = "REVOKED_KEY"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    HASH_MISMATCH = "HASH_MISMATCH"


@dataclass(frozen=True)
class VerifiedBy:
    provider_id: str
    key_id: str
    ok = True

    def __bool__(self) -> bool:
        return True

    def to_dict(self) -> dict[str, Any]:
        return {"verified": True, "provider_id": self.provider_id, "key_id": self.key_id}


@dataclass(frozen=True)
class Invalid:
    reason: InvalidReason
    ok = False

    def __bool__(self) -> bool:
        return False

    def to_dict(self) -> dict[str, Any]:
        return {"verified": False, "reason": self.reason.value}


VerificationResult = Union[VerifiedBy, Invalid]


def verify_detached(
    table: _KeyTable,
    owner_id: str,
    key_id: str,
    algorithm: str,
    signature: bytes,
    payload: bytes,
    claimed_hash: str,
) -> VerificationResult:
    """Shared verification path for tool definitions and policy documents.

    Keys are looked up only under ``owner_id`` (the identity named inside the
    signed document), so a key trusted for one provider can never vouch for
    another.
    """
    keys = table.get(owner_id)
    if not keys:
        return Invalid(InvalidReason.UNKNOWN_PROVIDER)
    key = next((k for k in keys if k.key_id == key_id), None)
    if key is None:
        return Invalid(InvalidReason.UNKNOWN_KEY)
    if key.status is KeyStatus.REVOKED:
        return Invalid(InvalidReason.REVOKED_KEY)
    if algorithm != ALGORITHM or key.algorithm != ALGORITHM:
        return Invalid(InvalidReason.BAD_SIGNATURE)
    if not verify_bytes(key.public_key, signature, payload):
        return Invalid(InvalidReason.BAD_SIGNATURE)
    if hashlib.sha256(payload).hexdigest() != claimed_hash:
        return Invalid(InvalidReason.HASH_MISMATCH)
    return VerifiedBy(owner_id, key.key_id)


@dataclass(frozen=True)
class SignedToolDefinition:
    definition: ToolDefinition
    signature: bytes
    key_id: str
    algorithm: str = ALGORITHM
    signed_bytes_hash: str = ""

    __hash__ = None  # type: ignore[assignment]

    @property
    def tool_id(self) -> str:
        return self.definition.id

    def to_dict(self) -> dict[str, Any]:
        return {
            "definition": self.definition.to_dict(),
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "signature": b64encode(self.signature),
            "signed_bytes_hash": self.signed_bytes_hash,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SignedToolDefinition:
        if not isinstance(data, Mapping):
            raise InvalidDefinition("signature envelope must be an object")
        try:
            return cls(
                definition=ToolDefinition.from_dict(data["definition"]),
                signature=b64decode(data.get("signature") or ""),
                key_id=data.get("key_id") or "",
                algorithm=data.get("algorithm") or ALGORITHM,
                signed_bytes_hash=data.get("signed_bytes_hash") or "",
            )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, InvalidDefinition):
                raise
            raise InvalidDefinition(f"malformed envelope: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> SignedToolDefinition:
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise InvalidDefinition(f"envelope is not JSON: {exc}") from exc
        return cls.from_dict(data)


def unsigned(definition: ToolDefinition) -> SignedToolDefinition:
    """Wrap a bare definition the way a standard (non-ETDI) server would serve it."""
    return SignedToolDefinition(definition, b"", "", ALGORITHM, "")


def sign_definition(definition: ToolDefinition, pair: KeyPair) -> SignedToolDefinition:
    payload = canonical_encode(definition)
    return SignedToolDefinition(
        definition=definition,
        signature=pair.sign(payload),
        key_id=pair.key_id,
        algorithm=pair.algorithm,
        signed_bytes_hash=hashlib.sha256(payload).hexdigest(),
    )


def verify_signed_definition(sd: SignedToolDefinition, ts: TrustStore) -> VerificationResult:
    # sha256 of the canonical bytes is exactly content_hash(sd.definition)
    return verify_detached(
        ts.providers,
        sd.definition.provider_id,
        sd.key_id,
        sd.algorithm,
        sd.signature,
        canonical_encode(sd.definition),
        sd.signed_bytes_hash,
    )
