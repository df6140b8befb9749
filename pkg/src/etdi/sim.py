"""In-process MCP client/server simulation with the ETDI checks wired in.

Servers hand out tool definitions as JSON envelopes and the client parses
them back, so the wire formats are exercised even though nothing leaves the
process. Time is a logical tick counter owned by the client's call session.

Two client modes exist. ``Mode.ETDI`` runs the full pipeline. ``Mode.STANDARD``
models a plain MCP client (no signatures, name-based approval, no tokens,
policy or stack checks) and exists only to reproduce the attacks as baselines.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .approval import (
    ApprovalConfig,
    ApprovalStore,
    DowngradePolicy,
    Outcome,
    VerificationOutcome,
    approval_prompt,
    evaluate_tool,
    verify_and_approve,
)
from .callstack import CallSession, CallStackPolicy, advance_clock, begin_session, pop_call, push_call
from .crypto import Invalid, SignedToolDefinition, TrustStore
from .errors import InvalidDefinition, UnknownTool
from .model import ToolDefinition
from .policy import AuthorizationRequest, PolicyStore, is_authorized
from .tokens import (
    RevocationList,
    ToolBinding,
    TokenError,
    check_caller_entitlements,
    check_scope_adherence,
    validate_token,
)

BASE_TIME = 1_700_000_000


class Mode(str, enum.Enum):
    ETDI = "etdi"
    STANDARD = "standard"


class EventKind(str, enum.Enum):
    DISCOVERED = "DISCOVERED"
    VERIFIED = "VERIFIED"
    REJECTED = "REJECTED"
    PROMPTED = "PROMPTED"
    APPROVED = "APPROVED"
    TOKEN_CHECKED = "TOKEN_CHECKED"
    POLICY_CHECKED = "POLICY_CHECKED"
    STACK_CHECKED = "STACK_CHECKED"
    INVOKED = "INVOKED"
    RESULT = "RESULT"
    DENIED = "DENIED"


@dataclass(frozen=True)
class Event:
    seq: int
    kind: EventKind
    request: str | None
    tool: str | None
    detail: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "event": self.kind.value,
            "request": self.request,
            "tool": self.tool,
            "detail": dict(sorted(self.detail.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, separators=(",", ":"))


# pass events that must precede INVOKED within the same request
_GATES = (
    (EventKind.VERIFIED, None),
    (EventKind.TOKEN_CHECKED, "passed"),
    (EventKind.POLICY_CHECKED, "allowed"),
    (EventKind.STACK_CHECKED, "allowed"),
)


class Transcript:
    def __init__(self, scenario: str | None = None, mode: Mode = Mode.ETDI) -> None:
        self.scenario = scenario
        self.mode = mode
        self.events: list[Event] = []
        self.attack_requests: list[str] = []
        self.attack_discoveries: list[tuple[str, str]] = []

    def emit(self, kind: EventKind, request: str | None = None, tool: str | None = None, **detail: Any) -> Event:
        event = Event(len(self.events) + 1, kind, request, tool, detail)
        self.events.append(event)
        return event

    def for_request(self, request: str) -> list[Event]:
        return [e for e in self.events if e.request == request]

    def of_kind(self, kind: EventKind) -> list[Event]:
        return [e for e in self.events if e.kind is kind]

    def outcome(self, request: str) -> Event | None:
        """The terminal RESULT/DENIED event of a request."""
        for e in reversed(self.for_request(request)):
            if e.kind in (EventKind.RESULT, EventKind.DENIED):
                return e
        return None

    def gate_violations(self) -> list[str]:
        problems = []
        passed: dict[str, set[EventKind]] = {}
        for e in self.events:
            if e.request is None:
                continue
            seen = passed.setdefault(e.request, set())
            for kind, flag in _GATES:
                if e.kind is kind and (flag is None or e.detail.get(flag) is True):
                    seen.add(kind)
            if e.kind is EventKind.INVOKED:
                missing = [k.value for k, _ in _GATES if k not in seen]
                if missing:
                    problems.append(f"{e.request}: INVOKED {e.tool} without {', '.join(missing)}")
        return problems

    def attack_violations(self) -> list[str]:
        problems = []
        for rid in self.attack_requests:
            last = self.outcome(rid)
            if last is None or last.kind is not EventKind.DENIED:
                problems.append(f"attack request {rid} was not denied")
        for server_id, tool_id in self.attack_discoveries:
            mine = [e for e in self.events
                    if e.request is None and e.tool == tool_id and e.detail.get("server") == server_id]
            if not mine or mine[-1].kind is not EventKind.REJECTED:
                problems.append(f"attack tool {tool_id} from {server_id} was not rejected")
        for e in self.of_kind(EventKind.RESULT):
            if e.detail.get("effects"):
                problems.append(f"{e.request}: malicious effects executed: {list(e.detail['effects'])}")
        return problems

    def invariant_violations(self) -> list[str]:
        return self.gate_violations() + self.attack_violations()

    def invariant_holds(self) -> bool:
        return not self.invariant_violations()

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


@dataclass(frozen=True)
class Behavior:
    """Scripted tool behaviour. ``effects`` are markers such as
    ``EXFILTRATE(attacker.example)``; nothing real happens."""

    payload: str = "ok"
    effects: tuple[str, ...] = ()
    calls: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"payload": self.payload, "effects": list(self.effects), "calls": list(self.calls)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Behavior:
        return cls(data.get("payload", "ok"), tuple(data.get("effects", ())), tuple(data.get("calls", ())))


@dataclass
class SimServer:
    server_id: str
    tools: dict[str, SignedToolDefinition] = field(default_factory=dict)
    behaviors: dict[str, Behavior] = field(default_factory=dict)
    malicious: bool = False

    def host(self, sd: SignedToolDefinition, behavior: Behavior | None = None) -> None:
        self.tools[sd.tool_id] = sd
        self.behaviors[sd.tool_id] = behavior or self.behaviors.get(sd.tool_id) or Behavior()

    # the rug-pull hook: swap what is served without telling anyone
    replace_tool = host

    def list_tools(self) -> list[str]:
        return [sd.to_json() for sd in self.tools.values()]

    def fetch(self, tool_id: str) -> str | None:
        sd = self.tools.get(tool_id)
        return sd.to_json() if sd is not None else None

    def execute(self, tool_id: str) -> Behavior:
        return self.behaviors.get(tool_id, Behavior())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SimServer:
        server = cls(data["server_id"], malicious=bool(data.get("malicious", False)))
        behaviors = data.get("behaviors") or {}
        for raw in data.get("tools", []):
            sd = SignedToolDefinition.from_dict(raw)
            server.host(sd, Behavior.from_dict(behaviors.get(sd.tool_id, {})))
        return server


Consent = Callable[[str, ToolDefinition], bool]


class ScriptedConsent:
    """Answers approval prompts from a fixed script, then a default."""

    def __init__(self, answers: Iterable[bool] = (), default: bool = False) -> None:
        self.answers = list(answers)
        self.default = default
        self.asked: list[str] = []

    def __call__(self, prompt: str, definition: ToolDefinition) -> bool:
        self.asked.append(prompt)
        return self.answers.pop(0) if self.answers else self.default


def auto_approve(prompt: str, definition: ToolDefinition) -> bool:
    return True


def auto_deny(prompt: str, definition: ToolDefinition) -> bool:
    return False


@dataclass
class SimClient:
    trust_store: TrustStore
    approvals: ApprovalStore = field(default_factory=ApprovalStore)
    revocations: RevocationList = field(default_factory=RevocationList)
    policy_store: PolicyStore | None = None
    callstack_policy: CallStackPolicy = field(default_factory=CallStackPolicy)
    consent: Consent = auto_deny
    mode: Mode = Mode.ETDI
    approval_config: ApprovalConfig = ApprovalConfig()
    # issuers trusted for caller-entitlement tokens; defaults to trust_store
    user_trust: TrustStore | None = None
    policy_store_for_user: Mapping[str, str] = field(default_factory=dict)
    default_policy_store: str | None = None
    tokens: dict[str, str] = field(default_factory=dict)
    user_token: str | None = None
    transcript: Transcript = field(default_factory=Transcript)
    # nested (caller, callee) calls that a scenario considers hostile
    attack_edges: set[tuple[str, str]] = field(default_factory=set)
    max_sim_depth: int = 8

    def __post_init__(self) -> None:
        self.session: CallSession = begin_session(self.callstack_policy)
        self.registry: dict[str, tuple[SimServer, SignedToolDefinition]] = {}
        self._approved_names: set[str] = set()
        self._requests = 0
        self._std_depth = 0
        self.transcript.mode = self.mode

    @property
    def now(self) -> int:
        return BASE_TIME + self.session.clock

    def advance(self, ticks: int) -> None:
        advance_clock(self.session, ticks)

    def _next_request(self) -> str:
        self._requests += 1
        return f"r{self._requests}"


def _ask(client: SimClient, outcome: VerificationOutcome, definition: ToolDefinition, server_id: str) -> bool:
    report = outcome.report
    client.transcript.emit(
        EventKind.PROMPTED,
        tool=definition.id,
        server=server_id,
        status=outcome.status.value,
        prompt=approval_prompt(outcome, definition),
        version=str(definition.version),
        added_permissions=list(report.added_permissions) if report else sorted(definition.permissions),
    )
    return client.consent(approval_prompt(outcome, definition), definition)


def discover_tools(
    client: SimClient, servers: Sequence[SimServer]
) -> tuple[list[SignedToolDefinition], list[tuple[SignedToolDefinition | None, str]]]:
    """List every server's tools, verify and (when needed) approve them.

    The first copy of a tool id to pass verification is the one the client
    will route invocations to.
    """
    verified: list[SignedToolDefinition] = []
    rejected: list[tuple[SignedToolDefinition | None, str]] = []
    t = client.transcript
    for server in servers:
        for wire in server.list_tools():
            try:
                sd = SignedToolDefinition.from_json(wire)
            except InvalidDefinition as exc:
                t.emit(EventKind.REJECTED, tool=None, server=server.server_id, reason="MALFORMED", error=str(exc))
                rejected.append((None, "MALFORMED"))
                continue
            tool_id = sd.tool_id
            t.emit(EventKind.DISCOVERED, tool=tool_id, server=server.server_id, name=sd.definition.name,
                   provider=sd.definition.provider_id, version=str(sd.definition.version))
            if client.mode is Mode.STANDARD:
                _discover_standard(client, server, sd)
                verified.append(sd)
                continue

            outcome = evaluate_tool(sd, client.trust_store, client.approvals, strict=client.approval_config.strict)
            if isinstance(outcome.verification, Invalid):
                reason = outcome.verification.reason.value
                t.emit(EventKind.REJECTED, tool=tool_id, server=server.server_id, reason=reason)
                rejected.append((sd, reason))
                continue
            t.emit(EventKind.VERIFIED, tool=tool_id, server=server.server_id,
                   provider=outcome.verification.provider_id, key_id=outcome.verification.key_id,
                   status=outcome.status.value)
            verified.append(sd)
            known = client.registry.get(tool_id)
            if known is not None and known[0] is not server:
                continue
            client.registry[tool_id] = (server, sd)
            if outcome.status.needs_approval:
                answers: list[bool] = []

                def consent(prompt: str, o: VerificationOutcome, d: ToolDefinition) -> bool:
                    answers.append(_ask(client, o, d, server.server_id))
                    return answers[-1]

                result = verify_and_approve(sd, client.trust_store, client.approvals, consent,
                                            now=client.now, config=client.approval_config)
                if result.record is not None:
                    t.emit(EventKind.APPROVED, tool=tool_id, server=server.server_id,
                           version=str(sd.definition.version),
                           granted=sorted(result.record.granted_permissions))
                elif result.prompted:
                    t.emit(EventKind.DENIED, tool=tool_id, stage="approval", reason="CONSENT_DENIED",
                           server=server.server_id)
    return verified, rejected


def _discover_standard(client: SimClient, server: SimServer, sd: SignedToolDefinition) -> None:
    tool_id = sd.tool_id
    if tool_id in client.registry:
        return
    client.registry[tool_id] = (server, sd)
    name = sd.definition.name
    if name in client._approved_names:
        return
    client.transcript.emit(EventKind.PROMPTED, tool=tool_id, server=server.server_id,
                           prompt=f"Allow tool {name}?", status="FIRST_USE")
    if client.consent(f"Allow tool {name}?", sd.definition):
        client._approved_names.add(name)
        client.transcript.emit(EventKind.APPROVED, tool=tool_id, server=server.server_id)


def principal_of(definition: ToolDefinition) -> str:
    return f"{definition.provider_id}::{definition.id}@{definition.version}"


def build_context(user_context: Mapping[str, Any] | None, now: int, tool_id: str) -> dict[str, Any]:
    user = dict(user_context or {})
    request: dict[str, Any] = {"time": now, "tool": tool_id}
    if "purpose" in user:
        request["purpose"] = user.pop("purpose")
    return {"user": user, "request": request}


def invoke_tool(
    client: SimClient,
    tool_id: str,
    params: Mapping[str, Any] | None = None,
    user_context: Mapping[str, Any] | None = None,
    tool_token: str | None = None,
    user_token: str | None = None,
    session: CallSession | None = None,
    *,
    action: str = "API::Invoke",
    resource: str | None = None,
    action_scopes: Iterable[str] | None = None,
    caller: str | None = None,
    attack: bool = False,
) -> list[Event]:
    """Run one invocation through the pipeline; returns the events it produced.

    The last event is always RESULT or DENIED. Raises :class:`UnknownTool`
    for a top-level call to a tool that was never discovered.
    """
    if tool_id not in client.registry:
        if caller is None:
            raise UnknownTool(tool_id)
    if session is not None:
        client.session = session
    t = client.transcript
    start = len(t.events)
    rid = client._next_request()
    if attack:
        t.attack_requests.append(rid)
    invocation = _Invocation(client, rid, tool_id, params or {}, user_context or {}, tool_token, user_token,
                             action, resource or f"Tool::{tool_id}", action_scopes, caller)
    if client.mode is Mode.STANDARD:
        invocation.run_standard()
    else:
        invocation.run()
    return t.events[start:]


class _Denied(Exception):
    pass


@dataclass
class _Invocation:
    client: SimClient
    rid: str
    tool_id: str
    params: Mapping[str, Any]
    user_context: Mapping[str, Any]
    tool_token: str | None
    user_token: str | None
    action: str
    resource: str
    action_scopes: Iterable[str] | None
    caller: str | None

    def emit(self, kind: EventKind, **detail: Any) -> None:
        self.client.transcript.emit(kind, self.rid, self.tool_id, **detail)

    def deny(self, stage: str, reason: str, **detail: Any) -> _Denied:
        self.emit(EventKind.DENIED, stage=stage, reason=reason, **detail)
        return _Denied()

    def run(self) -> None:
        try:
            self._run()
        except _Denied:
            pass

    def _run(self) -> None:
        c = self.client
        entry = c.registry.get(self.tool_id)
        if entry is None:
            raise self.deny("discovery", "UNKNOWN_TOOL")
        server = entry[0]

        # 1. re-fetch and re-check the definition currently being served
        wire = server.fetch(self.tool_id)
        if wire is None:
            raise self.deny("discovery", "TOOL_WITHDRAWN", server=server.server_id)
        try:
            sd = SignedToolDefinition.from_json(wire)
        except InvalidDefinition:
            raise self.deny("approval", "MALFORMED", server=server.server_id)
        outcome = evaluate_tool(sd, c.trust_store, c.approvals, strict=c.approval_config.strict)
        if isinstance(outcome.verification, Invalid):
            raise self.deny("approval", Outcome.REJECTED_SIGNATURE.value,
                            signature=outcome.verification.reason.value)
        self.emit(EventKind.VERIFIED, provider=outcome.verification.provider_id,
                  key_id=outcome.verification.key_id, status=outcome.status.value)
        status = outcome.status
        usable = status is Outcome.ALLOWED_EXISTING or (
            status is Outcome.DOWNGRADE_WARNING and c.approval_config.downgrade is not DowngradePolicy.BLOCK
        )
        if not usable:
            report = outcome.report
            raise self.deny("approval", status.value,
                            added_permissions=list(report.added_permissions) if report else [])
        definition = sd.definition
        granted = outcome.current.granted_permissions if outcome.current else frozenset()

        # 2. tool token: issuer, signature, expiry, binding, revocation
        token = self.tool_token or c.tokens.get(self.tool_id)
        if token is None:
            self.emit(EventKind.TOKEN_CHECKED, passed=False, check="token", reason="MISSING_TOKEN")
            raise self.deny("token", "MISSING_TOKEN")
        try:
            claims = validate_token(token, c.trust_store, ToolBinding.of(definition), c.now, c.revocations)
        except TokenError as exc:
            self.emit(EventKind.TOKEN_CHECKED, passed=False, check="token", reason=exc.reason.value)
            raise self.deny("token", exc.reason.value)

        # 3. the action must stay inside both the token scopes and the approved grant
        needed = frozenset(self.action_scopes) if self.action_scopes is not None else definition.permissions
        for check, held in (("token_scopes", claims.scopes), ("approved_scopes", granted)):
            adherence = check_scope_adherence(needed, held)
            if not adherence:
                self.emit(EventKind.TOKEN_CHECKED, passed=False, check=check, missing=sorted(adherence.missing))
                raise self.deny("scope", "SCOPE_NOT_GRANTED", missing=sorted(adherence.missing), check=check)

        # 4. caller entitlements, only when the tool asks for them
        if definition.required_caller_entitlements:
            try:
                ent = check_caller_entitlements(definition, self.user_token or c.user_token,
                                                c.user_trust or c.trust_store, c.now, c.revocations)
            except TokenError as exc:
                self.emit(EventKind.TOKEN_CHECKED, passed=False, check="entitlement", reason=exc.reason.value)
                raise self.deny("entitlement", exc.reason.value)
            if not ent:
                self.emit(EventKind.TOKEN_CHECKED, passed=False, check="entitlement", missing=sorted(ent.missing))
                raise self.deny("entitlement", "MISSING_ENTITLEMENT", missing=sorted(ent.missing))
        self.emit(EventKind.TOKEN_CHECKED, passed=True, jti=claims.jti, scopes=sorted(claims.scopes))

        # 5. policy decision
        context = build_context(self.user_context, c.now, self.tool_id)
        user_id = context["user"].get("id")
        store_id = c.policy_store_for_user.get(user_id, c.default_policy_store) if user_id else c.default_policy_store
        request = AuthorizationRequest(principal_of(definition), self.action, self.resource, context)
        decision = is_authorized(c.policy_store or PolicyStore(), request, store_id)
        self.emit(EventKind.POLICY_CHECKED, allowed=decision.allowed, principal=request.principal,
                  action=self.action, resource=self.resource, rules=list(decision.determining_rules),
                  reason=decision.reason)
        if not decision.allowed:
            raise self.deny("policy", "NOT_AUTHORIZED", rules=list(decision.determining_rules))

        # 6. call stack
        verdict = push_call(c.session, self.caller, self.tool_id, None, definition.permissions)
        self.emit(EventKind.STACK_CHECKED, allowed=verdict.allowed, caller=self.caller,
                  depth=c.session.depth, violation=verdict.violation.value if verdict.violation else None,
                  logged=[v.value for v in verdict.logged])
        if not verdict.allowed:
            raise self.deny("callstack", verdict.violation.value, caller=self.caller)

        # 7. execute, including any nested calls the tool makes; 8. unwind
        try:
            self.emit(EventKind.INVOKED, server=server.server_id, version=str(definition.version),
                      params=dict(self.params))
            behavior = server.execute(self.tool_id)
            for callee in behavior.calls:
                invoke_tool(c, callee, user_context=self.user_context, caller=self.tool_id,
                            attack=(self.tool_id, callee) in c.attack_edges)
            self.emit(EventKind.RESULT, payload=behavior.payload, effects=list(behavior.effects))
        finally:
            pop_call(c.session, self.tool_id)

    def run_standard(self) -> None:
        c = self.client
        entry = c.registry.get(self.tool_id)
        if entry is None:
            self.deny("discovery", "UNKNOWN_TOOL")
            return
        server = entry[0]
        if c._std_depth >= c.max_sim_depth:
            self.deny("runtime", "SIM_DEPTH_CAP", depth=c._std_depth)
            return
        self.emit(EventKind.INVOKED, server=server.server_id, version=str(entry[1].definition.version),
                  params=dict(self.params))
        behavior = server.execute(self.tool_id)
        c._std_depth += 1
        try:
            for callee in behavior.calls:
                invoke_tool(c, callee, user_context=self.user_context, caller=self.tool_id,
                            attack=(self.tool_id, callee) in c.attack_edges)
        finally:
            c._std_depth -= 1
        self.emit(EventKind.RESULT, payload=behavior.payload, effects=list(behavior.effects))
