from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from cli_corpus import COMMANDS, run_command
from etdi.cli import main
from etdi.scenarios import run_scenario


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_cli_matches_library(command, tmp_path):
    assert run_command(command, tmp_path) == []


def cli(*args, stdin=None):
    return CliRunner().invoke(main, list(args), input=stdin)


@pytest.fixture
def signed(tmp_path):
    assert cli("keygen", "acme-1", "--out", str(tmp_path / "k.json")).exit_code == 0
    trust = str(tmp_path / "trust.json")
    assert cli("trust-add", "Acme", str(tmp_path / "k.json"), "--trust", trust).exit_code == 0
    definition = {"id": "acme.tool", "name": "Tool", "description": "d", "provider_id": "Acme",
                  "version": {"major": 1, "minor": 0, "patch": 0}, "permissions": ["net:fetch"]}
    (tmp_path / "def.json").write_text(json.dumps(definition))
    env = str(tmp_path / "env.json")
    assert cli("sign", str(tmp_path / "def.json"), str(tmp_path / "k.json"), "--out", env).exit_code == 0
    return tmp_path, trust, env


def test_keygen_sign_verify(signed):
    _, trust, env = signed
    r = cli("verify", env, "--trust", trust)
    assert r.exit_code == 0 and "Acme" in r.stdout


def test_keygen_refuses_overwrite(signed):
    work, _, _ = signed
    assert cli("keygen", "x", "--out", str(work / "k.json")).exit_code == 2
    assert cli("keygen", "x", "--out", str(work / "k.json"), "--force").exit_code == 0


def test_verify_tampered_and_missing_trust(signed):
    work, trust, env = signed
    doc = json.loads(open(env).read())
    doc["definition"]["permissions"].append("sys:exec")
    bad = work / "bad.json"
    bad.write_text(json.dumps(doc))
    r = cli("verify", str(bad), "--trust", trust)
    assert r.exit_code == 1 and "BAD_SIGNATURE" in r.stdout
    assert cli("verify", env, "--trust", str(work / "missing.json")).exit_code == 2


def test_approve_consent_modes_and_tamper(signed):
    work, trust, env = signed
    store = str(work / "a.jsonl")
    assert cli("--consent", "no", "approve", env, "--trust", trust, "--store", store).exit_code == 1
    assert not (work / "a.jsonl").exists() or (work / "a.jsonl").read_text() == ""
    assert cli("--consent", "prompt", "approve", env, "--trust", trust, "--store", store, stdin="y\n").exit_code == 0
    definition = json.loads((work / "def.json").read_text())
    definition["description"] = "now with exfiltration"
    (work / "def.json").write_text(json.dumps(definition))
    cli("sign", str(work / "def.json"), str(work / "k.json"), "--out", str(work / "env2.json"))
    r = cli("--consent", "no", "approve", str(work / "env2.json"), "--trust", trust, "--store", store)
    assert r.exit_code == 1
    assert "content changed. Re-approve?" in r.stdout and "description" in r.stdout


def test_audit_on_fresh_stores(tmp_path):
    r = cli("--format", "json", "audit", "--store", str(tmp_path / "a"), "--trust", str(tmp_path / "t"),
            "--revocations", str(tmp_path / "r"), "--violations", str(tmp_path / "v"))
    assert r.exit_code == 0
    assert json.loads(r.stdout) == {"approvals": [], "revoked_tokens": [], "revoked_keys": [], "violations": []}


def test_run_scenario_writes_golden(tmp_path):
    out = tmp_path / "t.jsonl"
    r = cli("run-scenario", "--name", "TOOL_POISONING", "--out", str(out))
    assert r.exit_code == 0
    assert out.read_text() == run_scenario("TOOL_POISONING").to_jsonl()
    assert cli("run-scenario", "--name", "NOPE").exit_code == 2


def test_config_file(tmp_path, signed):
    work, trust, env = signed
    (work / "cfg.json").write_text(json.dumps({"trust_store": "trust.json", "approval_store": "s.jsonl",
                                               "consent": "yes"}))
    assert cli("--config", str(work / "cfg.json"), "approve", env).exit_code == 0
    assert (work / "s.jsonl").exists()
    assert cli("--config", str(work / "nope.json"), "audit").exit_code == 2
