from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import PROVIDER_KEYS, definitions, make_def, trust_all
from etdi.crypto import (
    InvalidReason,
    KeyPair,
    SignedToolDefinition,
    TrustStore,
    VerifiedBy,
    b64decode,
    b64encode,
    generate_keypair,
    keypair_from_seed,
    revoke_key,
    sign_definition,
    unsigned,
    verify_bytes,
    verify_detached,
    verify_signed_definition,
)
from etdi.errors import NotFound
from etdi.model import SemVer, canonical_encode
from etdi.policy import PolicyDocument, PolicyRule, SignedPolicyDocument, sign_policy, verify_policy

TRUSTEDSOFT = PROVIDER_KEYS["TrustedSoft Inc."]


def test_generated_keys_are_fresh_and_work():
    a, b = generate_keypair("k"), generate_keypair("k")
    assert a.public_key != b.public_key
    assert verify_bytes(a.public_key, a.sign(b"m"), b"m")
    assert not verify_bytes(b.public_key, a.sign(b"m"), b"m")


def test_keypair_rejects_mismatched_public_key():
    a, b = generate_keypair("a"), generate_keypair("b")
    with pytest.raises(ValueError):
        KeyPair("a", b.public_key, a.private_key)
    with pytest.raises(ValueError):
        generate_keypair("")


def test_keypair_serialization_round_trip():
    pair = keypair_from_seed("k1", b"seed")
    assert KeyPair.from_dict(pair.to_dict()) == pair
    assert "private" not in repr(pair).lower() or pair.private_key.hex() not in repr(pair)


def test_signing_is_deterministic():
    d = make_def()
    assert sign_definition(d, TRUSTEDSOFT).signature == sign_definition(d, TRUSTEDSOFT).signature


def test_legitimate_tool_verifies(ts):
    result = verify_signed_definition(sign_definition(make_def(), TRUSTEDSOFT), ts)
    assert result == VerifiedBy("TrustedSoft Inc.", TRUSTEDSOFT.key_id)


def test_attacker_clone_is_unknown_key(ts):
    attacker = keypair_from_seed("attacker-key", b"evil")
    result = verify_signed_definition(sign_definition(make_def(), attacker), ts)
    assert not result and result.reason is InvalidReason.UNKNOWN_KEY


def test_attacker_reusing_key_id_is_bad_signature(ts):
    attacker = keypair_from_seed(TRUSTEDSOFT.key_id, b"evil")
    result = verify_signed_definition(sign_definition(make_def(), attacker), ts)
    assert result.reason is InvalidReason.BAD_SIGNATURE


def test_unknown_provider_and_unsigned(ts):
    d = make_def(provider_id="Nobody Ltd")
    assert verify_signed_definition(sign_definition(d, TRUSTEDSOFT), ts).reason is InvalidReason.UNKNOWN_PROVIDER
    assert verify_signed_definition(unsigned(make_def()), ts).reason is InvalidReason.UNKNOWN_KEY


def test_revocation(ts):
    sd = sign_definition(make_def(), TRUSTEDSOFT)
    other = keypair_from_seed("ts-key-2", b"second")
    ts = ts.trust_provider("TrustedSoft Inc.", other)
    revoked = revoke_key(ts, "TrustedSoft Inc.", TRUSTEDSOFT.key_id)
    assert verify_signed_definition(sd, revoked).reason is InvalidReason.REVOKED_KEY
    assert revoke_key(revoked, "TrustedSoft Inc.", TRUSTEDSOFT.key_id) == revoked
    assert verify_signed_definition(sign_definition(make_def(), other), revoked)
    # the original store is untouched (copy-on-write)
    assert verify_signed_definition(sd, ts)
    with pytest.raises(NotFound):
        revoke_key(ts, "TrustedSoft Inc.", "nope")


def test_hash_mismatch(ts):
    sd = sign_definition(make_def(), TRUSTEDSOFT)
    bad = SignedToolDefinition(sd.definition, sd.signature, sd.key_id, sd.algorithm, "0" * 64)
    assert verify_signed_definition(bad, ts).reason is InvalidReason.HASH_MISMATCH


def test_every_single_byte_flip_fails_verification():
    d = make_def(description="x", input_schema={}, output_schema={})
    sd = sign_definition(d, TRUSTEDSOFT)
    payload = canonical_encode(d)
    args = (trust_all().providers, d.provider_id, sd.key_id, sd.algorithm, sd.signature)
    assert verify_detached(*args, payload, sd.signed_bytes_hash)
    for i in range(len(payload)):
        flipped = payload[:i] + bytes([payload[i] ^ 0x01]) + payload[i + 1:]
        assert not verify_detached(*args, flipped, sd.signed_bytes_hash)


@given(definitions)
def test_round_trip_random_definitions(d):
    ts = trust_all()
    sd = sign_definition(d, PROVIDER_KEYS[d.provider_id])
    wire = SignedToolDefinition.from_json(sd.to_json())
    assert verify_signed_definition(wire, ts) == VerifiedBy(d.provider_id, sd.key_id)


def envelope_mutations(sd: SignedToolDefinition) -> dict[str, SignedToolDefinition]:
    d = sd.definition
    sig = bytearray(sd.signature)
    sig[0] ^= 0xFF
    out = {
        "signature": SignedToolDefinition(d, bytes(sig), sd.key_id, sd.algorithm, sd.signed_bytes_hash),
        "key_id": SignedToolDefinition(d, sd.signature, sd.key_id + "x", sd.algorithm, sd.signed_bytes_hash),
        "algorithm": SignedToolDefinition(d, sd.signature, sd.key_id, "rsa", sd.signed_bytes_hash),
        "signed_bytes_hash": SignedToolDefinition(d, sd.signature, sd.key_id, sd.algorithm,
                                                  ("f" if sd.signed_bytes_hash[0] != "f" else "e")
                                                  + sd.signed_bytes_hash[1:]),
    }
    from test_model import _MUTATIONS

    for name, fn in _MUTATIONS.items():
        if name == "provider_id":
            continue  # covered separately: a different provider has no such key
        out[f"definition.{name}"] = SignedToolDefinition(fn(d), sd.signature, sd.key_id, sd.algorithm,
                                                         sd.signed_bytes_hash)
    other = "Acme" if d.provider_id != "Acme" else "TrustedSoft Inc."
    out["definition.provider_id"] = SignedToolDefinition(d.replace(provider_id=other), sd.signature, sd.key_id,
                                                         sd.algorithm, sd.signed_bytes_hash)
    return out


@given(definitions)
def test_single_field_mutations_fail(d):
    ts = trust_all()
    sd = sign_definition(d, PROVIDER_KEYS[d.provider_id])
    for name, mutant in envelope_mutations(sd).items():
        assert not verify_signed_definition(mutant, ts), name


def test_no_cross_provider_key_confusion(ts):
    # Acme's key, Acme's key id, but the definition claims TrustedSoft
    acme = PROVIDER_KEYS["Acme"]
    sd = sign_definition(make_def(), acme)
    result = verify_signed_definition(sd, ts)
    assert not result and result.reason is InvalidReason.UNKNOWN_KEY


def test_trust_store_file_round_trip(tmp_path, ts):
    ts = revoke_key(ts, "Acme", PROVIDER_KEYS["Acme"].key_id)
    path = tmp_path / "trust.json"
    ts.save(path)
    loaded = TrustStore.load(path)
    assert loaded.to_dict() == ts.to_dict()
    raw = json.loads(path.read_text())
    entry = raw["providers"]["Acme"][0]
    assert set(entry) == {"key_id", "algorithm", "public_key", "status"}
    assert entry["status"] == "REVOKED"


def test_envelope_file_shape():
    doc = sign_definition(make_def(), TRUSTEDSOFT).to_dict()
    assert set(doc) == {"definition", "key_id", "algorithm", "signature", "signed_bytes_hash"}
    assert len(b64decode(doc["signature"])) == 64


def test_b64_strict():
    assert b64decode(b64encode(b"\x00\xff")) == b"\x00\xff"
    with pytest.raises(ValueError):
        b64decode("not base64!")


POLICY_ADMIN = keypair_from_seed("admin-1", b"admin")


def _policy() -> PolicyDocument:
    return PolicyDocument("store", SemVer(1, 0, 0), "Admin", (
        PolicyRule("p1", "permit", "*", "File::Read", "UserDocs::*"),
    ))


def test_policy_sign_verify_and_tamper():
    ts = TrustStore().trust_provider("Admin", POLICY_ADMIN)
    spd = sign_policy(_policy(), POLICY_ADMIN)
    assert verify_policy(spd, ts)
    flipped = PolicyDocument("store", SemVer(1, 0, 0), "Admin", (
        PolicyRule("p1", "forbid", "*", "File::Read", "UserDocs::*"),
    ))
    tampered = SignedPolicyDocument(flipped, spd.signature, spd.key_id, spd.algorithm, spd.signed_bytes_hash)
    assert verify_policy(tampered, ts).reason is InvalidReason.BAD_SIGNATURE
    bare = SignedPolicyDocument.from_dict(_policy().to_dict())
    assert verify_policy(bare, ts).reason in (InvalidReason.UNKNOWN_KEY, InvalidReason.BAD_SIGNATURE)
    again = SignedPolicyDocument.from_dict(json.loads(json.dumps(spd.to_dict())))
    assert verify_policy(again, ts)


@given(st.binary(max_size=64))
def test_verify_bytes_never_raises_on_garbage(sig):
    assert verify_bytes(TRUSTEDSOFT.public_key, sig, b"payload") in (True, False)
