"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report lines alongside pytest's own output.
"""

import base64
import functools
import random
import string
import threading
import time
from urllib.parse import urlencode

import httpx
import pytest

from fedgrant import jwt_core
from fedgrant.harness import (
    CLIENT_A,
    CLIENT_B,
    DEMO_USER,
    ISSUER_A,
    ISSUER_B,
    REDIRECT_URI,
    FederationTopology,
    FlowDriver,
    FrozenClock,
    TopologySettings,
    run_demo,
)
from fedgrant.jwt_core import JoseHeader, KeyMaterial
from fedgrant.registry import load_config_dict
from fedgrant.share_grant import issue_identity_share_token, validate_share_grant
from fedgrant.tokens import SubjectData, parse_token_request

from conftest import SEAL_KEY, SHARED_SECRET, b64key, idp_config_dict

NOW = 1_700_000_000
SKEW = 60


def criterion(number: int, title: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[criterion {number}] FAIL  {title}")
                raise
            print(f"\n[criterion {number}] PASS  {title}")

        return wrapper

    return decorate


# ---------------------------------------------------------------------------


@criterion(1, "end-to-end federation demo completes steps 1-5 in under 10 s")
def test_criterion_1_end_to_end_demo():
    started = time.perf_counter()
    transcript = run_demo()  # fresh keys and configs: the honest CLI path
    elapsed = time.perf_counter() - started
    assert transcript.passed, transcript.to_text()
    assert [s.number for s in transcript.steps] == [1, 2, 3, 4, 5]
    assert elapsed < 10.0, f"demo took {elapsed:.2f}s"


@criterion(2, "domain-A token fails at resource-B (401) while the brokered token succeeds (200)")
def test_criterion_2_motivating_failure_reproduced(rsa_pems):
    with FederationTopology(rsa_pems=rsa_pems) as topo:
        driver = FlowDriver(topo)
        try:
            code = driver.authorize_and_login()
            tokens_a = driver.redeem_code(code)
            grant = driver.exchange_share_token(tokens_a["identity_share_token"])
            assert grant.status_code == 200
            token_b = grant.json()["access_token"]

            with httpx.Client(timeout=10.0) as http:
                direct = http.get(
                    f"{topo.resource_b.base_url}/resource",
                    headers={"Authorization": f"Bearer {tokens_a['access_token']}"},
                )
                assert direct.status_code == 401, "domain-A token must be refused in domain B"

                brokered = http.get(
                    f"{topo.resource_b.base_url}/resource",
                    headers={"Authorization": f"Bearer {token_b}"},
                )
                assert brokered.status_code == 200
                assert brokered.json()["sub"] == "user1"
        finally:
            driver.close()


# ---------------------------------------------------------------------------


def _registry_b(rsa_pems, *, sealed=False, scim=False):
    entry = {
        "issuer": ISSUER_A,
        "alg": "HS256",
        "shared_secret_b64": b64key(SHARED_SECRET),
        "sdata_mode": "sealed" if sealed else "plain",
    }
    if sealed:
        entry["seal_key_b64"] = b64key(SEAL_KEY)
    if scim:
        entry["scim"] = {"base_url": "http://peer.invalid", "username": "u", "secret": "s"}
    return load_config_dict(idp_config_dict(
        ISSUER_B, rsa_pems["b"][0],
        trusted=[entry],
        clients=[{
            "client_id": CLIENT_B["client_id"],
            "client_secret": CLIENT_B["client_secret"],
            "redirect_uris": [REDIRECT_URI],
            "allowed_grant_types": ["identity_share_token"],
            "allowed_scopes": ["openid"],
        }],
    ))


def _grant_request(token):
    params = {"grant_type": "identity_share_token", **CLIENT_B}
    if token is not None:
        params["shared_token"] = token
    return parse_token_request(urlencode(params))


def _hs_token(claims):
    return jwt_core.encode_jwt(claims, JoseHeader(alg="HS256"), KeyMaterial.symmetric(SHARED_SECRET))


GOOD_SDATA = {"subject": "user1", "email": "sample@sample.com"}


@criterion(3, "pipeline negative suite rejects 8/8 cases at the specified stage and code")
def test_criterion_3_pipeline_negative_suite(rsa_pems):
    registry = _registry_b(rsa_pems)

    live = {"iss": ISSUER_A, "aud": ISSUER_B, "iat": NOW, "exp": NOW + 300, "sdata": GOOD_SDATA}

    tampered = _hs_token(live)
    head, payload, sig = tampered.split(".")
    tampered = f"{head}.{payload}.{sig[:-2]}{'AA' if sig[-2:] != 'AA' else 'BB'}"

    wrong_seal = jwt_core.seal_sdata(GOOD_SDATA, KeyMaterial.symmetric(b"not-the-right-seal-key-32-bytes!"))

    def scim_mismatch_fetcher(base_url, subject, username, secret, timeout):
        return {"subject": subject, "email": "someone-else@sample.com"}

    cases = [
        ("missing shared_token", _grant_request(None), registry, None, 3, "invalid_grant_token"),
        ("untrusted issuer", _grant_request(_hs_token({**live, "iss": "https://evil.example/idp"})),
         registry, None, 4, "invalid_grant"),
        ("audience mismatch", _grant_request(_hs_token({**live, "aud": ISSUER_A})),
         registry, None, 5, "invalid_grant"),
        ("sample figure's literal iat/exp", _grant_request(_hs_token(
            {**live, "iat": 1532683271, "exp": 1532682999})),
         registry, 1532683271, 6, "invalid_grant"),
        ("tampered signature", _grant_request(tampered), registry, None, 7, "invalid_grant"),
        ("sealed sdata, wrong key", _grant_request(_hs_token({**live, "sdata": wrong_seal})),
         _registry_b(rsa_pems, sealed=True), None, 8, "invalid_grant"),
        ("missing mandatory email", _grant_request(_hs_token(
            {**live, "sdata": {"subject": "user1"}})),
         registry, None, 9, "invalid_grant"),
        ("SCIM mismatch", _grant_request(_hs_token(live)),
         _registry_b(rsa_pems, scim=True), None, 10, "invalid_grant"),
    ]

    rejected = 0
    for name, request, reg, now, want_stage, want_code in cases:
        decision = validate_share_grant(
            request, reg, ISSUER_B, now or NOW, SKEW, scim_fetcher=scim_mismatch_fetcher
        )
        assert not decision.accepted, f"{name}: unexpectedly accepted"
        assert decision.stage == want_stage, (
            f"{name}: expected stage {want_stage}, got {decision.stage} ({decision.error})"
        )
        assert decision.error.error == want_code, f"{name}: got code {decision.error.error}"
        rejected += 1
    assert rejected == 8


# ---------------------------------------------------------------------------


def _random_subject_data(rng: random.Random) -> SubjectData:
    alphabet = string.ascii_letters + string.digits
    subject = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 16)))
    email = "{}@{}.example".format(
        "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 10))),
        "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 8))),
    )
    extras = {}
    if rng.random() < 0.5:
        extras["age"] = rng.randint(0, 120)
    if rng.random() < 0.3:
        extras["dept"] = rng.choice(["ops", "r&d", "sales", "üñíçødé"])
    return SubjectData(subject=subject, email=email, extras=extras)


@criterion(4, "mint/validate closure holds for 1000 randomized subjects across "
              "{plain,sealed} x {HS256,RS256} with 0 failures")
def test_criterion_4_mint_validate_closure(rsa_pems):
    rng = random.Random(2024)
    failures = 0
    total = 0
    for alg in ("HS256", "RS256"):
        for sealed in (False, True):
            entry_a = {"issuer": ISSUER_B, "alg": alg, "sdata_mode": "sealed" if sealed else "plain"}
            entry_b = {"issuer": ISSUER_A, "alg": alg, "sdata_mode": "sealed" if sealed else "plain"}
            if alg == "HS256":
                entry_a["shared_secret_b64"] = entry_b["shared_secret_b64"] = b64key(SHARED_SECRET)
            else:
                entry_a["rsa_public_pem"] = rsa_pems["b"][1]
                entry_b["rsa_public_pem"] = rsa_pems["a"][1]
            if sealed:
                entry_a["seal_key_b64"] = entry_b["seal_key_b64"] = b64key(SEAL_KEY)
            registry_a = load_config_dict(idp_config_dict(ISSUER_A, rsa_pems["a"][0], trusted=[entry_a]))
            registry_b = load_config_dict(idp_config_dict(
                ISSUER_B, rsa_pems["b"][0],
                trusted=[entry_b],
                clients=[{
                    "client_id": CLIENT_B["client_id"],
                    "client_secret": CLIENT_B["client_secret"],
                    "redirect_uris": [REDIRECT_URI],
                    "allowed_grant_types": ["identity_share_token"],
                    "allowed_scopes": ["openid"],
                }],
            ))
            for _ in range(250):
                total += 1
                subject_data = _random_subject_data(rng)
                token = issue_identity_share_token(
                    subject_data, ISSUER_A, ISSUER_B, registry_a, NOW, 300
                )
                decision = validate_share_grant(_grant_request(token), registry_b, ISSUER_B, NOW, SKEW)
                if not (decision.accepted and decision.subject_data == subject_data
                        and decision.origin_issuer == ISSUER_A):
                    failures += 1
    assert total == 1000
    assert failures == 0


# ---------------------------------------------------------------------------

RFC7515_A1_HEADER = '{"typ":"JWT",\r\n "alg":"HS256"}'
RFC7515_A1_PAYLOAD = '{"iss":"joe",\r\n "exp":1300819380,\r\n "http://example.com/is_root":true}'
RFC7515_A1_KEY_B64 = (
    "AyM1SysPpbyDfgZld3umj1qzKObwVMkoqQ-EstJQLr_T-1qS0gZH75aKtMN3Yj0iPS4hcgUuTwjAzZr1Z9CAow"
)
RFC7515_A1_SIGNATURE = "dBjftJeZ4CVP-mB92K27uhbUJU1p1r_wW1gFWFOEjXk"


@criterion(5, "RFC 7515 A.1 vector reproduces bit-exactly; 0/100 cross-key false accepts")
def test_criterion_5_jws_correctness():
    key = KeyMaterial.symmetric(base64.urlsafe_b64decode(RFC7515_A1_KEY_B64 + "=="))
    h = jwt_core.b64url_encode(RFC7515_A1_HEADER.encode())
    p = jwt_core.b64url_encode(RFC7515_A1_PAYLOAD.encode())
    signature = jwt_core.compute_signature(f"{h}.{p}".encode("ascii"), key, "HS256")
    assert jwt_core.b64url_encode(signature) == RFC7515_A1_SIGNATURE

    token = f"{h}.{p}.{RFC7515_A1_SIGNATURE}"
    claims = jwt_core.verify_and_decode(token, key, now=1300819000, skew=60)
    assert claims["iss"] == "joe"

    rng = random.Random(99)
    false_accepts = 0
    for _ in range(100):
        k1 = KeyMaterial.symmetric(bytes(rng.randrange(256) for _ in range(32)))
        k2 = KeyMaterial.symmetric(bytes(rng.randrange(256) for _ in range(32)))
        minted = jwt_core.encode_jwt({"sub": "s"}, JoseHeader(alg="HS256"), k1)
        try:
            jwt_core.verify_and_decode(minted, k2, NOW)
            false_accepts += 1
        except jwt_core.IntegrityFailure:
            pass
    assert false_accepts == 0


# ---------------------------------------------------------------------------


@criterion(6, "sealed sdata hides the email from every client-visible artifact; plain shows it")
def test_criterion_6_opacity_both_directions(rsa_pems):
    email = DEMO_USER["email"]

    sealed = run_demo(TopologySettings(sealed=True), rsa_pems=rsa_pems)
    assert sealed.passed, sealed.to_text()
    sealed_share_token = _share_token_from(sealed)
    assert email not in sealed_share_token
    _, claims = jwt_core.peek_jwt(sealed_share_token)
    assert isinstance(claims["sdata"], str) and email not in claims["sdata"]
    assert email not in sealed.steps[1].response
    assert email not in sealed.to_text()

    plain = run_demo(TopologySettings(sealed=False), rsa_pems=rsa_pems)
    assert plain.passed, plain.to_text()
    _, plain_claims = jwt_core.peek_jwt(_share_token_from(plain))
    assert plain_claims["sdata"]["email"] == email
    assert email in plain.steps[1].response


def _share_token_from(transcript) -> str:
    import re

    match = re.search(r"identity_share_token=([A-Za-z0-9_\-]+\.[A-Za-z0-9_\-]+\.[A-Za-z0-9_\-]+)",
                      transcript.steps[1].response)
    assert match, "step 2 summary should carry the compact share token"
    return match.group(1)


# ---------------------------------------------------------------------------


@criterion(7, "16-way concurrent redemption of one code: exactly 1 success, 15 invalid_grant")
def test_criterion_7_single_use_code_under_concurrency(rsa_pems):
    with FederationTopology(rsa_pems=rsa_pems) as topo:
        driver = FlowDriver(topo)
        try:
            code = driver.authorize_and_login()
        finally:
            driver.close()

        body = urlencode({
            "grant_type": "authorization_code",
            "code": code,
            "redirect_uri": REDIRECT_URI,
            **CLIENT_A,
        })
        url = f"{topo.idp_a.base_url}/token"
        barrier = threading.Barrier(16)
        results: list[tuple[int, str]] = []
        lock = threading.Lock()

        def redeem():
            with httpx.Client(timeout=10.0) as http:
                barrier.wait()
                response = http.post(
                    url, content=body,
                    headers={"Content-Type": "application/x-www-form-urlencoded"},
                )
                with lock:
                    results.append((response.status_code, response.json().get("error", "")))

        threads = [threading.Thread(target=redeem) for _ in range(16)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(timeout=30)

        assert len(results) == 16
        successes = [r for r in results if r[0] == 200]
        failures = [r for r in results if r[0] == 400 and r[1] == "invalid_grant"]
        assert len(successes) == 1, f"expected 1 success, got {len(successes)}"
        assert len(failures) == 15, f"expected 15 invalid_grant, got {len(failures)}: {results}"


# ---------------------------------------------------------------------------


@criterion(8, "introspection: active at B with correct sub/iss, inactive at A, inactive after expiry")
def test_criterion_8_introspection_contract(rsa_pems):
    clock = FrozenClock()
    with FederationTopology(clock=clock, rsa_pems=rsa_pems) as topo:
        driver = FlowDriver(topo)
        try:
            code = driver.authorize_and_login()
            tokens_a = driver.redeem_code(code)
            grant = driver.exchange_share_token(tokens_a["identity_share_token"])
            assert grant.status_code == 200
            token_b = grant.json()["access_token"]

            at_b = driver.introspect(topo.idp_b, token_b)
            assert at_b["active"] is True
            assert at_b["sub"] == "user1"
            assert at_b["iss"] == ISSUER_B

            at_a = driver.introspect(topo.idp_a, token_b)
            assert at_a == {"active": False}

            clock.advance(topo.idp_b.registry.policy.access_token_ttl + 1)
            expired = driver.introspect(topo.idp_b, token_b)
            assert expired == {"active": False}
        finally:
            driver.close()
