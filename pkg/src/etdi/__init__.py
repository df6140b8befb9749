"""Signed, versioned tool definitions for MCP-style tool ecosystems.

The package covers the definition model and its canonical encoding, Ed25519
signing and a trust store, an approval history with re-approval on change,
tool-bound tokens, a permit/forbid policy engine, call-stack checks for nested
invocations, and a deterministic client/server simulator.
"""

from __future__ import annotations

import logging

from .approval import (
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
from .callstack import CallStackPolicy, RateLimit, Violation, begin_session, pop_call, push_call
from .crypto import (
    KeyPair,
    SignedToolDefinition,
    TrustStore,
    generate_keypair,
    keypair_from_seed,
    revoke_key,
    sign_definition,
    verify_signed_definition,
)
from .model import ChangeReport, SemVer, ToolDefinition, canonical_encode, content_hash, diff_definitions
from .policy import AuthorizationRequest, Decision, PolicyDocument, PolicyRule, is_authorized, load_policy_store
from .scenarios import ScenarioConfig, run_scenario
from .sim import SimClient, SimServer, Transcript, discover_tools, invoke_tool
from .tokens import TokenClaims, TokenError, ToolBinding, issue_token, validate_token

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"

__all__ = [
    "ApprovalConfig", "ApprovalRecord", "ApprovalStore", "AuthorizationRequest", "CallStackPolicy",
    "ChangeReport", "Decision", "DowngradePolicy", "KeyPair", "Outcome", "PolicyDocument", "PolicyRule",
    "RateLimit", "ScenarioConfig", "SemVer", "SignedToolDefinition", "SimClient", "SimServer", "TokenClaims",
    "TokenError", "ToolBinding", "ToolDefinition", "Transcript", "TrustStore", "Violation", "begin_session",
    "canonical_encode", "content_hash", "diff_definitions", "discover_tools", "evaluate_tool",
    "generate_keypair", "invoke_tool", "is_authorized", "issue_token", "keypair_from_seed",
    "load_policy_store", "pop_call", "push_call", "record_approval", "revoke_approval", "revoke_key",
    "run_scenario", "sign_definition", "validate_token", "verify_and_approve", "verify_signed_definition",
]
