from __future__ import annotations

import json
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import PROVIDER_KEYS, make_def, trust_all
from etdi.approval import (
    ApprovalConfig,
    ApprovalRecord,
    ApprovalStore,
    DowngradePolicy,
    Outcome,
    evaluate_tool,
    record_approval,
    revoke_approval,
    verify_and_approve,
)
from etdi.crypto import keypair_from_seed, sign_definition
from etdi.errors import NotFound, StoreIOError, SubsetViolation
from etdi.model import SemVer, content_hash

WALLPAPER = PROVIDER_KEYS["Daily Wallpaper Co."]


def wallpaper(version=(1, 0, 0), **kw):
    base = dict(id="dailywallpaper.setter", name="Daily Wallpaper", provider_id="Daily Wallpaper Co.",
                description="Sets a new desktop wallpaper every day.", version=SemVer(*version),
                permissions=frozenset({"desktop:wallpaper:write"}))
    base.update(kw)
    return sign_definition(make_def(**base), WALLPAPER)


def yes(*_):
    return True


def no(*_):
    return False


def test_decision_tree(ts):
    store = ApprovalStore()
    v100 = wallpaper()
    assert evaluate_tool(v100, ts, store).status is Outcome.NEEDS_APPROVAL_NEW_TOOL
    record_approval(v100, None, store, now=1)
    assert evaluate_tool(v100, ts, store).status is Outcome.ALLOWED_EXISTING

    tampered = wallpaper(permissions=frozenset({"desktop:wallpaper:write", "fs:read:documents"}))
    out = evaluate_tool(tampered, ts, store)
    assert out.status is Outcome.NEEDS_APPROVAL_TAMPERED
    assert out.report.added_permissions == ("fs:read:documents",)

    v110 = wallpaper((1, 1, 0), permissions=frozenset({"desktop:wallpaper:write", "fs:read:documents"}))
    out = evaluate_tool(v110, ts, store)
    assert out.status is Outcome.NEEDS_APPROVAL_NEW_VERSION
    assert "fs:read:documents" in out.report.added_permissions

    record_approval(v110, None, store, now=2)
    assert store.current(v110.tool_id).version == SemVer(1, 1, 0)
    out = evaluate_tool(v100, ts, store)
    assert out.status is Outcome.DOWNGRADE_WARNING

    forged = sign_definition(v100.definition, keypair_from_seed("evil", b"evil"))
    out = evaluate_tool(forged, ts, store)
    assert out.status is Outcome.REJECTED_SIGNATURE and out.report is None


def test_current_is_max_version_oracle(ts):
    store = ApprovalStore()
    for v in [(1, 0, 0), (1, 2, 0), (1, 1, 0)]:
        record_approval(wallpaper(v), None, store)
    history = store.history("dailywallpaper.setter")
    expected = max(history, key=lambda r: (r.version.major, r.version.minor, r.version.patch))
    assert store.current("dailywallpaper.setter") == expected
    assert len(history) == 3  # history is kept, only "current" moves


def test_subset_violation(ts):
    with pytest.raises(SubsetViolation):
        record_approval(wallpaper(), {"fs:write"}, ApprovalStore())


def test_revoke(ts):
    store = ApprovalStore()
    sd = wallpaper()
    with pytest.raises(NotFound):
        revoke_approval(sd.tool_id, store)
    record_approval(sd, None, store)
    revoke_approval(sd.tool_id, store)
    assert evaluate_tool(sd, ts, store).status is Outcome.NEEDS_APPROVAL_NEW_TOOL
    with pytest.raises(NotFound):
        revoke_approval(sd.tool_id, store)


def test_evaluate_is_read_only(tmp_path, ts):
    path = tmp_path / "a.jsonl"
    store = ApprovalStore(path)
    record_approval(wallpaper(), None, store)
    before = path.read_bytes()
    for sd in (wallpaper(), wallpaper((2, 0, 0)), wallpaper(description="changed")):
        for _ in range(3):
            evaluate_tool(sd, ts, store)
    assert path.read_bytes() == before and len(store) == 1


def test_persistence_round_trip(tmp_path, ts):
    path = tmp_path / "a.jsonl"
    store = ApprovalStore(path)
    record_approval(wallpaper(), None, store, now=5)
    reloaded = ApprovalStore(path)
    assert reloaded.history() == store.history()
    line = json.loads(path.read_text().splitlines()[0])
    assert {"tool_id", "version", "content_hash", "granted_permissions", "approved_at", "revoked"} <= set(line)
    assert evaluate_tool(wallpaper(), ts, reloaded).status is Outcome.ALLOWED_EXISTING


def test_corrupt_store_and_granted_superset_rejected(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(StoreIOError):
        ApprovalStore(path)
    d = wallpaper().definition
    rec = ApprovalRecord(d.id, d.version, content_hash(d), frozenset({"root:all"}), 0, definition=d)
    path.write_text(json.dumps(rec.to_dict()) + "\n")
    with pytest.raises(StoreIOError):
        ApprovalStore(path)


def test_concurrent_writers(tmp_path):
    store = ApprovalStore(tmp_path / "a.jsonl")
    sds = [wallpaper((1, i, 0)) for i in range(20)]
    threads = [threading.Thread(target=record_approval, args=(sd, None, store)) for sd in sds]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ApprovalStore(tmp_path / "a.jsonl")) == 20
    assert store.current("dailywallpaper.setter").version == SemVer(1, 19, 0)


def test_verify_and_approve_paths(ts):
    store = ApprovalStore()
    assert not verify_and_approve(wallpaper(), ts, store, no).usable
    assert len(store) == 0
    res = verify_and_approve(wallpaper(), ts, store, yes)
    assert res.usable and res.prompted and res.record is not None
    res = verify_and_approve(wallpaper(), ts, store, no)
    assert res.usable and not res.prompted

    changed = wallpaper(description="New text only.")
    assert verify_and_approve(changed, ts, store, no).usable is False
    lenient = verify_and_approve(changed, ts, store, no, config=ApprovalConfig(strict=False))
    assert lenient.usable and not lenient.prompted
    assert lenient.record.granted_permissions == frozenset({"desktop:wallpaper:write"})

    hard = ApprovalConfig(tamper_hard_fail=True)
    widened = wallpaper(permissions=frozenset({"desktop:wallpaper:write", "net:send"}))
    assert not verify_and_approve(widened, ts, store, yes, config=hard).usable

    record_approval(wallpaper((2, 0, 0)), None, store)
    old = wallpaper()
    assert not verify_and_approve(old, ts, store, yes).usable
    assert verify_and_approve(old, ts, store, yes, config=ApprovalConfig(downgrade=DowngradePolicy.WARN)).usable


_DEF_MUTATIONS = [
    lambda d: d.replace(description=d.description + "."),
    lambda d: d.replace(name=d.name + " Pro"),
    lambda d: d.replace(permissions=d.permissions | {"fs:read:documents"}),
    lambda d: d.replace(input_schema={"type": "object", "properties": {"x": {}}}),
    lambda d: d.replace(api_contract_hash="a" * 64),
    lambda d: d.replace(required_caller_entitlements=frozenset({"premium_access"})),
]


@given(st.lists(st.sampled_from(range(len(_DEF_MUTATIONS))), min_size=1, max_size=4),
       st.sampled_from(["same", "up", "down"]), st.booleans())
def test_no_mutation_reaches_allowed_existing(mutations, bump, resign_with_attacker):
    ts = trust_all()
    store = ApprovalStore()
    approved = wallpaper((1, 1, 1))
    record_approval(approved, None, store)
    d = approved.definition
    for m in mutations:
        d = _DEF_MUTATIONS[m](d)
    d = d.replace(version={"same": SemVer(1, 1, 1), "up": SemVer(1, 2, 0), "down": SemVer(1, 0, 0)}[bump])
    key = keypair_from_seed(WALLPAPER.key_id, b"attacker") if resign_with_attacker else WALLPAPER
    assert evaluate_tool(sign_definition(d, key), ts, store).status is not Outcome.ALLOWED_EXISTING
