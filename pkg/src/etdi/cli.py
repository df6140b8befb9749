"""``etdi`` command line: keys, trust, signing, approvals, tokens, policy and scenarios.

Every command is a thin adapter over a library call. Exit codes: 0 success or
allow, 1 security denial, 2 operational error.
"""

from __future__ import annotations

import contextlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import click

from .approval import (
    ApprovalConfig,
    ApprovalStore,
    Outcome,
    VerificationOutcome,
    revoke_approval,
    verify_and_approve,
)
from .callstack import CallStackPolicy, advance_clock, begin_session, pop_call, push_call, write_violation_log
from .crypto import (
    KeyPair,
    SignedToolDefinition,
    TrustStore,
    b64decode,
    generate_keypair,
    sign_definition,
    verify_signed_definition,
)
from .errors import ETDIError
from .model import ToolDefinition
from .policy import (
    AuthorizationRequest,
    PolicyDocument,
    SignedPolicyDocument,
    is_authorized,
    load_policy_store,
    sign_policy,
)
from .scenarios import ScenarioConfig, run_scenario
from .tokens import RevocationList, TokenClaims, TokenError, ToolBinding, issue_token, validate_token

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None  # type: ignore[assignment]

EXIT_OK, EXIT_DENIED, EXIT_ERROR = 0, 1, 2


class CliFailure(Exception):
    """Operational error; reported on stderr with exit code 2."""


@dataclass
class CliConfig:
    trust_store: str = "trust.json"
    approval_store: str = "approvals.jsonl"
    revocation_list: str = "revoked_tokens.txt"
    violation_log: str = "violations.jsonl"
    policy_files: list[str] = field(default_factory=list)
    callstack_policy: str | None = None
    strict: bool = True
    consent: str = "prompt"

    @classmethod
    def load(cls, path: str | None) -> CliConfig:
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliFailure(f"cannot read config {path}: {exc}") from exc
        base = Path(path).parent

        def resolve(p: str | None) -> str | None:
            return None if p is None else str(base / p)

        cfg = cls()
        for key in ("trust_store", "approval_store", "revocation_list", "violation_log", "callstack_policy"):
            if key in data:
                setattr(cfg, key, resolve(data[key]))
        cfg.policy_files = [str(resolve(p)) for p in data.get("policy_files", [])]
        cfg.strict = bool(data.get("strict", True))
        cfg.consent = data.get("consent", "prompt")
        return cfg


@dataclass
class State:
    config: CliConfig
    machine: bool

    def out(self, doc: Any, text: str) -> None:
        if self.machine:
            click.echo(json.dumps(doc, sort_keys=True))
        else:
            click.echo(text)


def _read_json(path: str, what: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliFailure(f"cannot read {what} {path}: {exc}") from exc
    except ValueError as exc:
        raise CliFailure(f"{what} {path} is not JSON: {exc}") from exc


def _write_new(path: str, text: str, mode: int = 0o644, force: bool = False) -> None:
    flags = os.O_WRONLY | os.O_CREAT | (os.O_TRUNC if force else os.O_EXCL)
    try:
        fd = os.open(path, flags, mode)
    except FileExistsError as exc:
        raise CliFailure(f"{path} exists; pass --force to overwrite") from exc
    except OSError as exc:
        raise CliFailure(f"cannot write {path}: {exc}") from exc
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)


@contextlib.contextmanager
def _locked(path: str) -> Iterator[None]:
    """Advisory lock held for the duration of a write command."""
    try:
        fh = open(f"{path}.lock", "a")
    except OSError as exc:
        raise CliFailure(f"cannot lock {path}: {exc}") from exc
    with fh:
        if fcntl is not None:
            fcntl.flock(fh, fcntl.LOCK_EX)
        yield


def _trust(path: str, *, must_exist: bool = True) -> TrustStore:
    if not Path(path).exists():
        if must_exist:
            raise CliFailure(f"trust store {path} does not exist")
        return TrustStore()
    return TrustStore.load(path)


def _envelope(path: str) -> SignedToolDefinition:
    return SignedToolDefinition.from_dict(_read_json(path, "envelope"))


def _key(path: str) -> KeyPair:
    try:
        return KeyPair.from_dict(_read_json(path, "key file"))
    except (KeyError, ValueError, TypeError) as exc:
        raise CliFailure(f"malformed key file {path}: {exc}") from exc


def _token_arg(token: str) -> str:
    if token.startswith("@"):
        try:
            return Path(token[1:]).read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise CliFailure(f"cannot read token file {token[1:]}: {exc}") from exc
    return token


def _run(fn: Callable[[], int]) -> None:
    try:
        code = fn()
    except (CliFailure, ETDIError, OSError, ValueError, KeyError, TypeError) as exc:
        click.echo(f"error: {exc}", err=True)
        code = EXIT_ERROR
    sys.exit(code)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file with store paths and defaults.")
@click.option("--strict/--lenient", default=None,
              help="Re-approve on any content change, or only on security-relevant ones.")
@click.option("--consent", type=click.Choice(["prompt", "yes", "no"]), default=None,
              help="How approval prompts are answered.")
@click.option("--format", "fmt", type=click.Choice(["text", "json", "machine-readable"]), default="text")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, strict: bool | None, consent: str | None, fmt: str) -> None:
    """Signed tool definitions, approvals, tokens, policy and call-stack checks."""
    try:
        cfg = CliConfig.load(config_path)
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    if strict is not None:
        cfg.strict = strict
    if consent is not None:
        cfg.consent = consent
    ctx.obj = State(cfg, fmt != "text")


pass_state = click.make_pass_decorator(State)


@main.command()
@click.argument("key_id")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--force", is_flag=True, help="Overwrite an existing key file.")
@pass_state
def keygen(state: State, key_id: str, out_path: str, force: bool) -> None:
    """Generate an Ed25519 keypair; the file is created with mode 0600."""

    def go() -> int:
        pair = generate_keypair(key_id)
        _write_new(out_path, json.dumps(pair.to_dict(), indent=2) + "\n", 0o600, force)
        public = {k: v for k, v in pair.to_dict().items() if k != "private_key"}
        state.out(public, f"{key_id} {public['public_key']}")
        return EXIT_OK

    _run(go)


@main.command("trust-add")
@click.argument("owner")
@click.argument("key_path", type=click.Path(dir_okay=False))
@click.option("--issuer", is_flag=True, help="Trust the key as a token issuer instead of a tool provider.")
@click.option("--trust", "trust_path", default=None)
@pass_state
def trust_add(state: State, owner: str, key_path: str, issuer: bool, trust_path: str | None) -> None:
    """Add a public key (from a key file) to the trust store."""

    def go() -> int:
        path = trust_path or state.config.trust_store
        data = _read_json(key_path, "key file")
        try:
            key_id, public = data["key_id"], data["public_key"]
        except (KeyError, TypeError) as exc:
            raise CliFailure(f"malformed key file {key_path}") from exc
        with _locked(path):
            ts = _trust(path, must_exist=False)
            ts = (ts.with_issuer_key if issuer else ts.with_provider_key)(owner, key_id, b64decode(public))
            ts.save(path)
        state.out(ts.to_dict(), f"trusted {'issuer' if issuer else 'provider'} {owner} key {key_id}")
        return EXIT_OK

    _run(go)


@main.command()
@click.argument("def_path", type=click.Path(dir_okay=False))
@click.argument("key_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.option("--policy", "is_policy", is_flag=True, help="The document is a policy document, not a tool definition.")
@pass_state
def sign(state: State, def_path: str, key_path: str, out_path: str | None, is_policy: bool) -> None:
    """Sign a tool definition (or, with --policy, a policy document)."""

    def go() -> int:
        raw = _read_json(def_path, "policy document" if is_policy else "definition")
        if is_policy:
            if not isinstance(raw, Mapping):
                raise CliFailure("policy document must be a JSON object")
            doc = sign_policy(PolicyDocument.from_dict(raw), _key(key_path)).to_dict()
            label = doc["definition"]["policy_store_id"]
        else:
            doc = sign_definition(ToolDefinition.from_dict(raw), _key(key_path)).to_dict()
            label = doc["definition"]["id"]
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if out_path:
            _write_new(out_path, text, force=True)
            state.out(doc, f"signed {label} -> {out_path}")
        else:
            state.out(doc, text.rstrip())
        return EXIT_OK

    _run(go)


@main.command()
@click.argument("envelope_path", type=click.Path(dir_okay=False))
@click.option("--trust", "trust_path", default=None)
@pass_state
def verify(state: State, envelope_path: str, trust_path: str | None) -> None:
    """Check an envelope's signature against the trust store."""

    def go() -> int:
        ts = _trust(trust_path or state.config.trust_store)
        result = verify_signed_definition(_envelope(envelope_path), ts)
        if result:
            state.out(result.to_dict(), f"verified: {result.provider_id} key {result.key_id}")
            return EXIT_OK
        state.out(result.to_dict(), f"invalid: {result.reason.value}")
        return EXIT_DENIED

    _run(go)


def _ask_user(prompt: str) -> bool:
    click.echo(f"{prompt} [y/N] ", nl=False, err=True)
    line = click.get_text_stream("stdin").readline()
    return line.strip().lower() in ("y", "yes")


@main.command()
@click.argument("envelope_path", type=click.Path(dir_okay=False))
@click.option("--trust", "trust_path", default=None)
@click.option("--store", "store_path", default=None)
@pass_state
def approve(state: State, envelope_path: str, trust_path: str | None, store_path: str | None) -> None:
    """Verify a tool, show what changed since the last approval, and record consent."""

    def go() -> int:
        cfg = state.config
        ts = _trust(trust_path or cfg.trust_store)
        sd = _envelope(envelope_path)
        path = store_path or cfg.approval_store
        shown: list[str] = []

        def consent(prompt: str, outcome: VerificationOutcome, definition: ToolDefinition) -> bool:
            if outcome.report is not None:
                shown.append(outcome.report.summary())
            shown.append(prompt)
            if cfg.consent == "yes":
                return True
            if cfg.consent == "no":
                return False
            if not state.machine:
                click.echo("\n".join(shown), err=True)
            return _ask_user(prompt)

        with _locked(path):
            store = ApprovalStore(path)
            result = verify_and_approve(sd, ts, store, consent, now=0, config=ApprovalConfig(strict=cfg.strict))
        doc = approve_document(result.outcome, result.usable, result.record)
        status = result.outcome.status
        if status is Outcome.REJECTED_SIGNATURE:
            state.out(doc, f"rejected: {result.outcome.verification.reason.value}")
            return EXIT_ERROR
        lines = shown + [f"{status.value}: {'approved' if result.record else 'usable' if result.usable else 'not approved'}"]
        state.out(doc, "\n".join(lines))
        return EXIT_OK if result.usable else EXIT_DENIED

    _run(go)


def approve_document(outcome: VerificationOutcome, usable: bool, record: Any) -> dict[str, Any]:
    doc = outcome.to_dict()
    doc["usable"] = usable
    doc["record"] = record.to_dict() if record is not None else None
    return doc


@main.command("revoke-approval")
@click.argument("tool_id")
@click.option("--store", "store_path", default=None)
@pass_state
def revoke_approval_cmd(state: State, tool_id: str, store_path: str | None) -> None:
    """Withdraw the current approval of a tool."""

    def go() -> int:
        path = store_path or state.config.approval_store
        with _locked(path):
            store = ApprovalStore(path)
            revoke_approval(tool_id, store)
        state.out({"tool_id": tool_id, "revoked": True}, f"approval for {tool_id} revoked")
        return EXIT_OK

    _run(go)


@main.command("revoke-key")
@click.argument("owner")
@click.argument("key_id")
@click.option("--issuer", is_flag=True)
@click.option("--trust", "trust_path", default=None)
@pass_state
def revoke_key_cmd(state: State, owner: str, key_id: str, issuer: bool, trust_path: str | None) -> None:
    """Mark a provider (or issuer) key as revoked."""

    def go() -> int:
        path = trust_path or state.config.trust_store
        with _locked(path):
            ts = _trust(path)
            ts = ts.revoke_issuer_key(owner, key_id) if issuer else ts.revoke_provider_key(owner, key_id)
            ts.save(path)
        state.out(ts.to_dict(), f"revoked {owner} key {key_id}")
        return EXIT_OK

    _run(go)


@main.command("token-mint")
@click.option("--key", "key_path", required=True, type=click.Path(dir_okay=False))
@click.option("--issuer", required=True)
@click.option("--sub", required=True)
@click.option("--tool-id", default="")
@click.option("--tool-version", default="")
@click.option("--scope", "scopes", multiple=True)
@click.option("--iat", type=int, required=True)
@click.option("--exp", type=int, required=True)
@click.option("--jti", default=None)
@pass_state
def token_mint(state: State, key_path: str, issuer: str, sub: str, tool_id: str, tool_version: str,
               scopes: tuple[str, ...], iat: int, exp: int, jti: str | None) -> None:
    """Issue a signed token (test IdP)."""

    def go() -> int:
        extra = {"jti": jti} if jti else {}
        claims = TokenClaims(issuer, sub, iat, exp, tool_id, tool_version, frozenset(scopes), **extra)
        token = issue_token(_key(key_path), claims)
        state.out({"token": token.compact, "claims": claims.to_dict()}, token.compact)
        return EXIT_OK

    _run(go)


@main.command("token-check")
@click.argument("token")
@click.option("--now", type=int, required=True)
@click.option("--tool-id", default=None)
@click.option("--tool-version", default=None)
@click.option("--trust", "trust_path", default=None)
@click.option("--revocations", "rl_path", default=None)
@pass_state
def token_check(state: State, token: str, now: int, tool_id: str | None, tool_version: str | None,
                trust_path: str | None, rl_path: str | None) -> None:
    """Validate a token (``@file`` reads it from a file); binding is checked when --tool-id is given."""

    def go() -> int:
        ts = _trust(trust_path or state.config.trust_store)
        rl = RevocationList.load(rl_path or state.config.revocation_list)
        binding = ToolBinding(tool_id, tool_version or "") if tool_id is not None else None
        try:
            claims = validate_token(_token_arg(token), ts, binding, now, rl)
        except TokenError as exc:
            state.out({"valid": False, "reason": exc.reason.value}, f"invalid: {exc.reason.value}")
            return EXIT_DENIED
        state.out({"valid": True, "claims": claims.to_dict()}, f"valid: {claims.sub} scopes {sorted(claims.scopes)}")
        return EXIT_OK

    _run(go)


@main.command("policy-check")
@click.argument("request_path", type=click.Path(dir_okay=False))
@click.option("--policy", "policy_files", multiple=True, help="Signed policy file (repeatable).")
@click.option("--policy-store-id", default=None)
@click.option("--trust", "trust_path", default=None)
@pass_state
def policy_check(state: State, request_path: str, policy_files: tuple[str, ...],
                 policy_store_id: str | None, trust_path: str | None) -> None:
    """Evaluate an authorization request file against signed policy documents."""

    def go() -> int:
        ts = _trust(trust_path or state.config.trust_store)
        files = list(policy_files) or state.config.policy_files
        store = load_policy_store([SignedPolicyDocument.load(p) for p in files], ts, strict=state.config.strict)
        raw = _read_json(request_path, "request")
        if not isinstance(raw, Mapping):
            raise CliFailure("request must be a JSON object")
        req = AuthorizationRequest.from_dict(raw)
        decision = is_authorized(store, req, policy_store_id or raw.get("policy_store_id"))
        state.out(decision.to_dict(),
                  f"{'ALLOW' if decision.allowed else 'DENY'}: {decision.reason}")
        return EXIT_OK if decision.allowed else EXIT_DENIED

    _run(go)


def replay_stack_trace(policy: CallStackPolicy, steps: list[Mapping[str, Any]]) -> tuple[list[dict[str, Any]], list[Any]]:
    """Replay push/pop/advance steps; shared by the CLI and its tests."""
    session = begin_session(policy)
    verdicts: list[dict[str, Any]] = []
    for step in steps:
        op = step.get("op")
        if op == "push":
            v = push_call(session, step.get("caller"), step["callee"], step.get("caller_scopes"),
                          step.get("callee_scopes", ()))
            verdicts.append({"callee": step["callee"], "caller": step.get("caller"), **v.to_dict()})
        elif op == "pop":
            pop_call(session, step["tool"])
        elif op == "advance":
            advance_clock(session, int(step.get("ticks", 1)))
        else:
            raise CliFailure(f"unknown trace op {op!r}")
    return verdicts, session.violations


@main.command("stack-check")
@click.argument("trace_path", type=click.Path(dir_okay=False))
@click.option("--policy", "policy_path", default=None, help="Call-stack policy file.")
@click.option("--log", "log_path", default=None, help="Append violations to this log.")
@pass_state
def stack_check(state: State, trace_path: str, policy_path: str | None, log_path: str | None) -> None:
    """Replay a call trace against a call-stack policy."""

    def go() -> int:
        trace = _read_json(trace_path, "trace")
        if not isinstance(trace, Mapping) or not isinstance(trace.get("steps"), list):
            raise CliFailure("trace must be an object with a 'steps' list")
        path = policy_path or state.config.callstack_policy
        if "policy" in trace:
            policy = CallStackPolicy.from_dict(trace["policy"])
        elif path:
            policy = CallStackPolicy.load(path)
        else:
            policy = CallStackPolicy()
        verdicts, violations = replay_stack_trace(policy, trace["steps"])
        target = log_path or state.config.violation_log
        if violations and target:
            write_violation_log(violations, target)
        blocked = [v for v in verdicts if not v["allowed"]]
        lines = [f"{v['caller'] or '(root)'} -> {v['callee']}: {v['violation'] or 'ALLOW'}" for v in verdicts]
        state.out({"verdicts": verdicts, "violations": [r.to_dict() for r in violations]}, "\n".join(lines))
        return EXIT_DENIED if blocked else EXIT_OK

    _run(go)


@main.command("run-scenario")
@click.argument("config_path", required=False, type=click.Path(dir_okay=False))
@click.option("--name", default=None, help="Scenario name when no config file is given.")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False), help="Write the transcript here.")
@pass_state
def run_scenario_cmd(state: State, config_path: str | None, name: str | None, out_path: str | None) -> None:
    """Replay an attack scenario; exits 0 iff the transcript invariant holds."""

    def go() -> int:
        if config_path:
            cfg = ScenarioConfig.load(config_path)
            base = Path(config_path).parent
            cfg.policy_files = [str(base / p) for p in cfg.policy_files]
        elif name:
            cfg = ScenarioConfig(name)
        else:
            raise CliFailure("give a scenario config file or --name")
        if name:
            cfg.name = name
        transcript = run_scenario(cfg.name, cfg)
        problems = transcript.invariant_violations()
        if out_path:
            Path(out_path).write_text(transcript.to_jsonl(), encoding="utf-8")
        doc = {"scenario": cfg.name, "invariant_holds": not problems, "violations": problems,
               "events": [e.to_dict() for e in transcript.events]}
        text = transcript.to_jsonl().rstrip() if not out_path else f"transcript written to {out_path}"
        text += f"\n{cfg.name}: invariant {'holds' if not problems else 'VIOLATED'}"
        for p in problems:
            text += f"\n  {p}"
        state.out(doc, text)
        return EXIT_OK if not problems else EXIT_DENIED

    _run(go)


def audit_document(cfg: CliConfig) -> dict[str, Any]:
    approvals = ApprovalStore(cfg.approval_store) if Path(cfg.approval_store).exists() else ApprovalStore()
    ts = _trust(cfg.trust_store, must_exist=False)
    rl = RevocationList.load(cfg.revocation_list)
    violations: list[Any] = []
    if cfg.violation_log and Path(cfg.violation_log).exists():
        for n, line in enumerate(Path(cfg.violation_log).read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                try:
                    violations.append(json.loads(line))
                except ValueError as exc:
                    raise CliFailure(f"{cfg.violation_log}:{n}: malformed entry") from exc
    return {
        "approvals": [r.to_dict() for r in approvals.history()],
        "revoked_tokens": list(rl),
        "revoked_keys": [list(k) for k in ts.revoked_keys()],
        "violations": violations,
    }


@main.command()
@click.option("--store", "store_path", default=None)
@click.option("--trust", "trust_path", default=None)
@click.option("--revocations", "rl_path", default=None)
@click.option("--violations", "violation_path", default=None)
@pass_state
def audit(state: State, store_path: str | None, trust_path: str | None, rl_path: str | None,
          violation_path: str | None) -> None:
    """Print approval history, revocations and the call-stack violation log."""

    def go() -> int:
        cfg = state.config
        cfg.approval_store = store_path or cfg.approval_store
        cfg.trust_store = trust_path or cfg.trust_store
        cfg.revocation_list = rl_path or cfg.revocation_list
        cfg.violation_log = violation_path or cfg.violation_log
        doc = audit_document(cfg)
        lines = [f"approvals: {len(doc['approvals'])}"]
        for r in doc["approvals"]:
            flag = " (revoked)" if r["revoked"] else ""
            lines.append(f"  {r['tool_id']} {r['version']} {r['content_hash'][:12]}{flag}")
        lines.append(f"revoked tokens: {len(doc['revoked_tokens'])}")
        lines += [f"  {j}" for j in doc["revoked_tokens"]]
        lines.append(f"revoked keys: {len(doc['revoked_keys'])}")
        lines += [f"  {kind} {owner} {kid}" for kind, owner, kid in doc["revoked_keys"]]
        lines.append(f"call-stack violations: {len(doc['violations'])}")
        lines += [f"  t={v['tick']} {v['caller']} -> {v['callee']}: {v['violation']}" for v in doc["violations"]]
        state.out(doc, "\n".join(lines))
        return EXIT_OK

    _run(go)


if __name__ == "__main__":  # pragma: no cover
    main()
