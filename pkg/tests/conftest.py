from __future__ import annotations

import logging
import string

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from etdi.crypto import TrustStore, keypair_from_seed
from etdi.model import SemVer, ToolDefinition

settings.register_profile("etdi", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("etdi")

segment = st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=5)
scope = st.lists(segment, min_size=1, max_size=3).map(":".join)
scopes = st.frozensets(scope, max_size=4)
semver = st.builds(SemVer, st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
tool_id = st.from_regex(r"[a-z][a-z0-9._-]{0,15}", fullmatch=True)

json_scalar = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(-(2**40), 2**40),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=8),
)
json_value = st.recursive(
    json_scalar,
    lambda inner: st.one_of(st.lists(inner, max_size=3), st.dictionaries(st.text(max_size=5), inner, max_size=3)),
    max_leaves=8,
)
schema = st.dictionaries(st.text(max_size=6), json_value, max_size=3)
hex64 = st.text(alphabet="0123456789abcdef", min_size=64, max_size=64)

definitions = st.builds(
    ToolDefinition,
    id=tool_id,
    name=st.text(max_size=20),
    description=st.text(max_size=40),
    provider_id=st.sampled_from(["TrustedSoft Inc.", "Daily Wallpaper Co.", "Acme"]),
    version=semver,
    input_schema=schema,
    output_schema=schema,
    permissions=scopes,
    required_caller_entitlements=scopes,
    api_contract_hash=st.one_of(st.none(), hex64),
)


def make_def(**overrides) -> ToolDefinition:
    base = dict(
        id="securedocs.scanner",
        name="SecureDocs Scanner",
        description="Scans documents for personally identifiable information.",
        provider_id="TrustedSoft Inc.",
        version=SemVer(1, 0, 0),
        input_schema={"type": "object"},
        output_schema={"type": "object"},
        permissions=frozenset({"fs:read:documents"}),
    )
    base.update(overrides)
    return ToolDefinition(**base)


PROVIDER_KEYS = {
    p: keypair_from_seed(f"{p}-key", f"test:{p}".encode())
    for p in ("TrustedSoft Inc.", "Daily Wallpaper Co.", "Acme")
}
IDP_KEY = keypair_from_seed("idp-1", b"test:idp")
IDP = "https://idp.test"


def trust_all() -> TrustStore:
    ts = TrustStore().trust_issuer(IDP, IDP_KEY)
    for provider, pair in PROVIDER_KEYS.items():
        ts = ts.trust_provider(provider, pair)
    return ts


@pytest.fixture
def ts() -> TrustStore:
    return trust_all()


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("etdi").setLevel(logging.ERROR)
    yield
