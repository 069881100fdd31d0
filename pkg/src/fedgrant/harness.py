"""Boots the two-domain topology and drives the end-to-end brokered flow.

Domain A holds the only real user account. The harness acts as the client:
it logs in at A, redeems the authorization code for tokens including the
identity-share token, exchanges that token at B, and finally consumes B's
protected resource with the access token B issued. Every step lands in a
transcript; the first failing step truncates it.
"""

from __future__ import annotations

import base64
import json
import secrets
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable
from urllib.parse import parse_qs, urlencode, urlparse

import httpx

from . import jwt_core
from .idp import IdentityProviderService
from .registry import load_config
from .resource import ResourceServerService, load_resource_config

ISSUER_A = "https://domain-a.example/idp"
ISSUER_B = "https://domain-b.example/idp"

CLIENT_A = {"client_id": "jdf0Plm_op", "client_secret": "client-a-Secret-017"}
CLIENT_B = {"client_id": "8UyfGho2pLqCmNb", "client_secret": "uTbC67PqAmbrS1Mx9j2"}
REDIRECT_URI = "http://sample.com/redirect/"

DEMO_USER = {"username": "user1", "password": "correct-horse-battery", "subject": "user1",
             "email": "sample@sample.com"}

SCIM_CREDENTIAL = {"username": "domain-b-scim", "secret": "scim-shared-Secret-42"}
INTROSPECTION_CREDENTIAL = {"id": "resource-b", "secret": "resource-b-Secret-9"}


class FrozenClock:
    """Injectable clock: time stands still until the test advances it."""

    def __init__(self, start: float = 1_700_000_000.0) -> None:
        self._now = float(start)

    def __call__(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        self._now += seconds


@dataclass(frozen=True)
class TopologySettings:
    sealed: bool = False
    scim: bool = False
    a_trusts_b: bool = True
    b_trusts_a: bool = True
    signing_alg: str = "HS256"
    refresh_tokens: bool = False
    provisioning: dict[str, Any] | None = None
    with_resource_a: bool = False


def _generate_pem_pair() -> tuple[str, str]:
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric import rsa

    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    private = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ).decode()
    public = key.public_key().public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    ).decode()
    return private, public


def _b64(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


class FederationTopology:
    """Two IdPs plus a protected resource in domain B, wired per settings.

    Configs are written to a scratch directory and loaded through the same
    code path the CLI uses, so the demo exercises real config files.
    """

    def __init__(
        self,
        settings: TopologySettings = TopologySettings(),
        clock: Callable[[], float] = time.time,
        rsa_pems: dict[str, tuple[str, str]] | None = None,
    ) -> None:
        self.settings = settings
        self.clock = clock
        self._pems = rsa_pems or {"a": _generate_pem_pair(), "b": _generate_pem_pair()}
        self._shared_secret = secrets.token_bytes(32)
        self._seal_key = secrets.token_bytes(32)
        self._tmp: tempfile.TemporaryDirectory | None = None
        self.idp_a: IdentityProviderService | None = None
        self.idp_b: IdentityProviderService | None = None
        self.resource_b: ResourceServerService | None = None
        self.resource_a: ResourceServerService | None = None

    # -- config documents --

    def _trust_entry(self, peer_issuer: str, peer_public_pem: str, scim_base: str | None) -> dict[str, Any]:
        entry: dict[str, Any] = {
            "issuer": peer_issuer,
            "alg": self.settings.signing_alg,
            "sdata_mode": "sealed" if self.settings.sealed else "plain",
        }
        if self.settings.signing_alg == "HS256":
            entry["shared_secret_b64"] = _b64(self._shared_secret)
        else:
            entry["rsa_public_pem"] = peer_public_pem
        if self.settings.sealed:
            entry["seal_key_b64"] = _b64(self._seal_key)
        if scim_base is not None:
            entry["scim"] = {"base_url": scim_base, **SCIM_CREDENTIAL}
        if self.settings.provisioning is not None:
            entry["provisioning"] = self.settings.provisioning
        return entry

    def _idp_a_config(self) -> dict[str, Any]:
        trusted = []
        if self.settings.a_trusts_b:
            trusted.append(self._trust_entry(ISSUER_B, self._pems["b"][1], None))
        return {
            "kind": "idp",
            "issuer": ISSUER_A,
            "bind": {"host": "127.0.0.1", "port": 0},
            "signing_keys": {"rsa_private_pem": self._pems["a"][0], "kid": "domain-a-1"},
            "trusted_issuers": trusted,
            "clients": [{
                **CLIENT_A,
                "redirect_uris": [REDIRECT_URI],
                "allowed_grant_types": ["authorization_code", "refresh_token"],
                "allowed_scopes": ["openid", "identity_share"],
            }],
            "users": [{
                "username": DEMO_USER["username"],
                "password": DEMO_USER["password"],
                "subject": DEMO_USER["subject"],
                "email": DEMO_USER["email"],
                "claims": {"age": 30},
            }],
            "scim_clients": [SCIM_CREDENTIAL] if self.settings.scim else [],
            "introspection_clients": [INTROSPECTION_CREDENTIAL],
            "policy": {"refresh_tokens_enabled": self.settings.refresh_tokens},
        }

    def _idp_b_config(self, idp_a_base_url: str) -> dict[str, Any]:
        trusted = []
        if self.settings.b_trusts_a:
            scim_base = idp_a_base_url if self.settings.scim else None
            trusted.append(self._trust_entry(ISSUER_A, self._pems["a"][1], scim_base))
        return {
            "kind": "idp",
            "issuer": ISSUER_B,
            "bind": {"host": "127.0.0.1", "port": 0},
            "signing_keys": {"rsa_private_pem": self._pems["b"][0], "kid": "domain-b-1"},
            "trusted_issuers": trusted,
            "clients": [{
                **CLIENT_B,
                "redirect_uris": [REDIRECT_URI],
                "allowed_grant_types": ["authorization_code", "identity_share_token", "refresh_token"],
                "allowed_scopes": ["openid", "identity_share"],
            }],
            "users": [],
            "introspection_clients": [INTROSPECTION_CREDENTIAL],
            "policy": {"refresh_tokens_enabled": self.settings.refresh_tokens},
        }

    def _resource_config(self, idp_base_url: str, label: str) -> dict[str, Any]:
        return {
            "kind": "resource_server",
            "bind": {"host": "127.0.0.1", "port": 0},
            "introspection_url": f"{idp_base_url}/introspect",
            "introspection_client_id": INTROSPECTION_CREDENTIAL["id"],
            "introspection_client_secret": INTROSPECTION_CREDENTIAL["secret"],
            "resource_label": label,
        }

    # -- lifecycle --

    def start(self) -> "FederationTopology":
        self._tmp = tempfile.TemporaryDirectory(prefix="fedgrant-demo-")
        root = Path(self._tmp.name)
        try:
            path_a = root / "idp-a.json"
            path_a.write_text(json.dumps(self._idp_a_config(), indent=2))
            self.idp_a = IdentityProviderService(load_config(path_a), clock=self.clock)
            self.idp_a.start()

            path_b = root / "idp-b.json"
            path_b.write_text(json.dumps(self._idp_b_config(self.idp_a.base_url), indent=2))
            self.idp_b = IdentityProviderService(load_config(path_b), clock=self.clock)
            self.idp_b.start()

            path_rb = root / "resource-b.json"
            path_rb.write_text(
                json.dumps(self._resource_config(self.idp_b.base_url, "domain-b-resource"), indent=2)
            )
            self.resource_b = ResourceServerService(load_resource_config(path_rb), clock=self.clock)
            self.resource_b.start()

            if self.settings.with_resource_a:
                path_ra = root / "resource-a.json"
                path_ra.write_text(
                    json.dumps(self._resource_config(self.idp_a.base_url, "domain-a-resource"), indent=2)
                )
                self.resource_a = ResourceServerService(load_resource_config(path_ra), clock=self.clock)
                self.resource_a.start()
        except BaseException:
            self.stop()
            raise
        return self

    def stop(self) -> None:
        for service in (self.resource_a, self.resource_b, self.idp_b, self.idp_a):
            if service is not None:
                service.stop()
        self.resource_a = self.resource_b = self.idp_b = self.idp_a = None
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self) -> "FederationTopology":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


# -- flow driving -------------------------------------------------------------


class StepFailure(Exception):
    def __init__(self, summary: str) -> None:
        super().__init__(summary)
        self.summary = summary


@dataclass
class StepRecord:
    number: int
    name: str
    request: str
    response: str
    ok: bool
    duration: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.number,
            "name": self.name,
            "request": self.request,
            "response": self.response,
            "ok": self.ok,
            "duration_seconds": round(self.duration, 6),
        }


@dataclass
class FlowTranscript:
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return len(self.steps) == 5 and all(step.ok for step in self.steps)

    def to_json(self) -> dict[str, Any]:
        return {"passed": self.passed, "steps": [s.to_dict() for s in self.steps]}

    def to_text(self) -> str:
        lines = ["identity share federation demo: domain A -> domain B"]
        for step in self.steps:
            flag = "ok " if step.ok else "FAIL"
            lines.append(f"  [{step.number}] {step.name:<44} {flag} ({step.duration:.3f}s)")
            lines.append(f"      -> {step.request}")
            lines.append(f"      <- {step.response}")
        lines.append(
            f"{sum(1 for s in self.steps if s.ok)}/5 steps passed"
            if self.passed
            else f"failed at step {self.steps[-1].number if self.steps else 0}"
        )
        return "\n".join(lines)


class FlowDriver:
    """Plays the client role against a running topology."""

    def __init__(self, topology: FederationTopology) -> None:
        self.topology = topology
        self.http = httpx.Client(follow_redirects=False, timeout=10.0)

    def close(self) -> None:
        self.http.close()

    # step 1: authorization request + scripted login via the normal form POST
    def authorize_and_login(self, scope: str = "openid identity_share",
                            target: str | None = ISSUER_B,
                            state: str = "pTl987HmQ", nonce: str = "12_90oPls") -> str:
        idp_a = self.topology.idp_a
        params = {
            "response_type": "code",
            "client_id": CLIENT_A["client_id"],
            "redirect_uri": REDIRECT_URI,
            "scope": scope,
            "state": state,
            "nonce": nonce,
        }
        if target is not None:
            params["identity_share_target"] = target
        authorize = self.http.get(f"{idp_a.base_url}/authorize", params=params)
        if authorize.status_code != 302:
            raise StepFailure(f"authorize returned {authorize.status_code}: {authorize.text}")
        login_location = authorize.headers["Location"]
        handle = parse_qs(urlparse(login_location).query)["handle"][0]

        form_page = self.http.get(f"{idp_a.base_url}{login_location}")
        if form_page.status_code != 200:
            raise StepFailure(f"login form returned {form_page.status_code}")

        login = self.http.post(
            f"{idp_a.base_url}/login",
            content=urlencode({
                "username": DEMO_USER["username"],
                "password": DEMO_USER["password"],
                "handle": handle,
            }),
            headers={"Content-Type": "application/x-www-form-urlencoded"},
        )
        if login.status_code != 302:
            raise StepFailure(f"login returned {login.status_code}: {login.text}")
        redirect = login.headers["Location"]
        query = parse_qs(urlparse(redirect).query)
        if "error" in query:
            raise StepFailure(f"authorization redirected with error {query['error'][0]}")
        if query.get("state") != [state]:
            raise StepFailure("state was not echoed verbatim")
        return query["code"][0]

    def post_token(self, idp: IdentityProviderService, fields: dict[str, str]) -> httpx.Response:
        return self.http.post(
            f"{idp.base_url}/token",
            content=urlencode(fields),
            headers={"Content-Type": "application/x-www-form-urlencoded"},
        )

    # step 2: code redemption at A
    def redeem_code(self, code: str) -> dict[str, Any]:
        response = self.post_token(self.topology.idp_a, {
            "grant_type": "authorization_code",
            "code": code,
            "redirect_uri": REDIRECT_URI,
            **CLIENT_A,
        })
        if response.status_code != 200:
            raise StepFailure(f"code redemption returned {response.status_code}: {response.text}")
        return response.json()

    # step 3: the identity share grant at B
    def exchange_share_token(self, shared_token: str) -> httpx.Response:
        return self.post_token(self.topology.idp_b, {
            "grant_type": "identity_share_token",
            "shared_token": shared_token,
            **CLIENT_B,
        })

    def get_resource(self, service: ResourceServerService, access_token: str) -> httpx.Response:
        return self.http.get(
            f"{service.base_url}/resource",
            headers={"Authorization": f"Bearer {access_token}"},
        )

    def introspect(self, idp: IdentityProviderService, token: str) -> dict[str, Any]:
        response = self.http.post(
            f"{idp.base_url}/introspect",
            content=urlencode({"token": token}),
            headers={"Content-Type": "application/x-www-form-urlencoded"},
            auth=(INTROSPECTION_CREDENTIAL["id"], INTROSPECTION_CREDENTIAL["secret"]),
        )
        response.raise_for_status()
        return response.json()


def drive_flow(topology: FederationTopology, timer: Callable[[], float] | None = None) -> FlowTranscript:
    """Execute the five-step sequence against a running topology."""
    timer = timer or time.perf_counter
    transcript = FlowTranscript()
    driver = FlowDriver(topology)

    def run_step(number: int, name: str, request_summary: str, action: Callable[[], str]) -> bool:
        started = timer()
        try:
            response_summary = action()
            ok = True
        except StepFailure as exc:
            response_summary = exc.summary
            ok = False
        transcript.steps.append(
            StepRecord(number, name, request_summary, response_summary, ok, timer() - started)
        )
        return ok

    state: dict[str, Any] = {}

    def step1() -> str:
        state["code"] = driver.authorize_and_login()
        return f"302 redirect to {REDIRECT_URI} with a fresh code, state echoed"

    def step2() -> str:
        tokens = driver.redeem_code(state["code"])
        if "identity_share_token" not in tokens:
            raise StepFailure(f"token response lacks identity_share_token: {sorted(tokens)}")
        state["tokens_a"] = tokens
        share_token = tokens["identity_share_token"]
        _, claims = jwt_core.peek_jwt(share_token)
        return (
            f"200 with access_token, id_token; identity_share_token={share_token}; "
            f"decoded share-token payload (client view): {json.dumps(claims, sort_keys=True)}"
        )

    def step3() -> str:
        response = driver.exchange_share_token(state["tokens_a"]["identity_share_token"])
        if response.status_code != 200:
            raise StepFailure(f"grant rejected: {response.status_code} {response.text}")
        state["tokens_b"] = response.json()
        return "200: domain B accepted the identity share grant"

    def step4() -> str:
        scim_hits = topology.idp_a.scim_requests_served
        if topology.settings.scim and scim_hits == 0:
            raise StepFailure("SCIM verification was enabled but domain B never called back")
        detail = f"peer verification callbacks to A: {scim_hits}"
        shadows = topology.idp_b.registry.shadow_user_count()
        return f"domain B validation pipeline accepted the token ({detail}; shadow accounts: {shadows})"

    def step5() -> str:
        tokens = state["tokens_b"]
        if not tokens.get("access_token"):
            raise StepFailure("domain B response lacks an access token")
        resource = driver.get_resource(topology.resource_b, tokens["access_token"])
        if resource.status_code != 200:
            raise StepFailure(f"resource fetch returned {resource.status_code}")
        return f"resource 200: {resource.json()}"

    try:
        for number, name, request_summary, action in (
            (1, "authorization + scripted login at domain A",
             "GET /authorize scope='openid identity_share' target=domain B, then POST /login", step1),
            (2, "authorization code redemption at domain A",
             "POST /token grant_type=authorization_code", step2),
            (3, "identity share grant at domain B",
             "POST /token grant_type=identity_share_token shared_token=<from step 2>", step3),
            (4, "domain B validation observed",
             "inspect validation side effects (peer callback, provisioning)", step4),
            (5, "access token consumed at domain B resource",
             "GET /resource with Authorization: Bearer <domain B token>", step5),
        ):
            if not run_step(number, name, request_summary, action):
                break
    finally:
        driver.close()
    return transcript


def run_demo(
    settings: TopologySettings = TopologySettings(),
    clock: Callable[[], float] | None = None,
    rsa_pems: dict[str, tuple[str, str]] | None = None,
) -> FlowTranscript:
    """Boot the topology, run the five steps, tear everything down."""
    injected = clock is not None
    wall = clock or time.time
    with FederationTopology(settings, clock=wall, rsa_pems=rsa_pems) as topology:
        return drive_flow(topology, timer=wall if injected else None)
