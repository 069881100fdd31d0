"""Identity-share token minting and the ordered grant validation pipeline.

A share token signed by a trusted peer is exchanged at the token endpoint
for a domain-local access token. Validation runs a fixed ten-stage pipeline
and short-circuits at the first failure; the failing stage is reported in
the decision (and on the wire in error_description) so misconfigurations
are diagnosable from the outside.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Protocol

from . import jwt_core
from .jwt_core import JoseHeader, KeyConfigError, MalformedToken, TokenError
from .registry import (
    PROVISION_NONE,
    SDATA_SEALED,
    Registry,
    TrustedIssuerProfile,
)
from .tokens import (
    GRANT_IDENTITY_SHARE,
    ORIGIN_IDENTITY_SHARE,
    AccessTokenRecord,
    OAuthError,
    RefreshTokenRecord,
    SubjectData,
    TemporalCheck,
    TokenRequest,
    TokenResponse,
    build_identity_share_claims,
    generate_opaque_token,
    validate_temporal,
)

STAGE_NAMES = {
    1: "client_authentication",
    2: "grant_type",
    3: "shared_token_presence",
    4: "issuer_trust",
    5: "audience",
    6: "temporal",
    7: "integrity",
    8: "sdata_extraction",
    9: "mandatory_claims",
    10: "scim_verification",
}


@dataclass(frozen=True)
class GrantDecision:
    accepted: bool
    subject_data: SubjectData | None = None
    origin_issuer: str | None = None
    client_id: str | None = None
    error: OAuthError | None = None
    stage: int | None = None

    @property
    def stage_name(self) -> str | None:
        return STAGE_NAMES.get(self.stage) if self.stage else None


def _rejected(stage: int, error_code: str, detail: str, client_id: str | None = None) -> GrantDecision:
    description = f"stage {stage} ({STAGE_NAMES[stage]}): {detail}"
    return GrantDecision(
        accepted=False,
        client_id=client_id,
        error=OAuthError(error_code, description),
        stage=stage,
    )


def issue_identity_share_token(
    subject_data: SubjectData,
    issuer: str,
    target: str | None,
    registry: Registry,
    now: int,
    ttl: int,
) -> str:
    """Mint a signed share token for one target peer or, with no target, for
    every trusted peer (aud becomes the array of their issuer URIs in config
    order).

    The first audience's trust profile decides the signature algorithm and
    whether sdata is sealed; the token itself is always signed so the client
    can still inspect aud.
    """
    if target is not None:
        profile = registry.lookup_issuer(target)
        if profile is None:
            raise KeyConfigError(f"target issuer {target!r} is not in the trust registry")
        targets = [target]
    else:
        profiles = registry.trusted_issuers()
        if not profiles:
            raise KeyConfigError("no trusted issuers configured; cannot mint a share token")
        targets = [p.issuer for p in profiles]
        profile = profiles[0]

    claims = build_identity_share_claims(issuer, targets, subject_data, now, ttl)
    payload = claims.to_dict()
    if profile.sdata_mode == SDATA_SEALED:
        assert profile.seal_key is not None
        payload["sdata"] = jwt_core.seal_sdata(claims.sdata, profile.seal_key)  # type: ignore[arg-type]

    if profile.alg == "HS256":
        header = JoseHeader(alg="HS256")
        signing_key = profile.verification_key  # the shared secret signs both ways
    else:
        header = JoseHeader(alg="RS256", kid=registry.signing_key.key_id)
        signing_key = registry.signing_key
    return jwt_core.encode_jwt(payload, header, signing_key)


class ScimResult(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    UNAVAILABLE = "unavailable"


class ScimFetcher(Protocol):
    def __call__(self, base_url: str, subject: str, username: str, secret: str, timeout: float) -> dict[str, Any]:
        """Return the peer's user record; raise ScimUnavailable on transport failure."""


class ScimUnavailable(Exception):
    pass


class ScimNotFound(Exception):
    pass


def http_scim_fetcher(base_url: str, subject: str, username: str, secret: str, timeout: float) -> dict[str, Any]:
    """Default fetcher: authenticated GET {base_url}/scim/Users/{subject}."""
    import httpx
    from urllib.parse import quote

    url = f"{base_url.rstrip('/')}/scim/Users/{quote(subject, safe='')}"
    try:
        response = httpx.get(url, auth=(username, secret), timeout=timeout)
    except httpx.HTTPError as exc:
        raise ScimUnavailable(str(exc)) from exc
    if response.status_code == 404:
        raise ScimNotFound(subject)
    if response.status_code != 200:
        raise ScimUnavailable(f"unexpected status {response.status_code}")
    try:
        return response.json()
    except ValueError as exc:
        raise ScimUnavailable(f"non-JSON SCIM body: {exc}") from exc


def scim_verify(
    subject_data: SubjectData,
    profile: TrustedIssuerProfile,
    fetcher: ScimFetcher,
    timeout: float,
) -> ScimResult:
    """Cross-check the asserted subject against the peer's user store.

    Match requires the record to exist and its email to equal the token's
    email exactly (no case folding anywhere).
    """
    assert profile.scim is not None
    try:
        record = fetcher(
            profile.scim.base_url, subject_data.subject, profile.scim.username, profile.scim.secret, timeout
        )
    except ScimNotFound:
        return ScimResult.MISMATCH
    except ScimUnavailable:
        return ScimResult.UNAVAILABLE
    except Exception:
        return ScimResult.UNAVAILABLE
    if record.get("email") != subject_data.email:
        return ScimResult.MISMATCH
    return ScimResult.MATCH


def validate_share_grant(
    req: TokenRequest,
    registry: Registry,
    self_issuer: str,
    now: int,
    skew: int,
    scim_fetcher: ScimFetcher = http_scim_fetcher,
) -> GrantDecision:
    """Run the ordered validation pipeline; never raises on untrusted input.

    Stages, in order: 1 client authentication, 2 grant type, 3 shared_token
    presence and JWT shape, 4 issuer trust, 5 audience membership, 6 clock
    window, 7 signature integrity, 8 sdata extraction, 9 mandatory claims,
    10 SCIM cross-check. A request failing several stages reports the
    lowest-numbered one.
    """
    # 1. client authentication
    client = registry.authenticate_client(req.client_id, req.client_secret)
    if client is None:
        return _rejected(1, "invalid_client", "client authentication failed")

    # 2. grant type must be exactly identity_share_token and allowed for the client
    if req.grant_type != GRANT_IDENTITY_SHARE:
        return _rejected(2, "unsupported_grant_type", f"grant_type {req.grant_type!r} is not {GRANT_IDENTITY_SHARE}",
                         client.client_id)
    if GRANT_IDENTITY_SHARE not in client.allowed_grant_types:
        return _rejected(2, "unsupported_grant_type", "client may not use this grant", client.client_id)

    # 3. shared_token present and structurally a JWT
    if not req.shared_token:
        return _rejected(3, "invalid_grant_token", "shared_token parameter is missing", client.client_id)
    try:
        _header, claims = jwt_core.peek_jwt(req.shared_token)
    except MalformedToken as exc:
        return _rejected(3, "invalid_grant_token", f"shared_token is not a JWT: {exc}", client.client_id)

    # 4. issuer must be one of the trusted identity providers
    iss = claims.get("iss")
    profile = registry.lookup_issuer(iss) if isinstance(iss, str) else None
    if profile is None:
        return _rejected(4, "invalid_grant", f"issuer {iss!r} is not trusted", client.client_id)

    # 5. audience must contain this provider's self-identifier
    aud = claims.get("aud")
    audiences = [aud] if isinstance(aud, str) else aud if isinstance(aud, list) else []
    if self_issuer not in audiences:
        return _rejected(5, "invalid_grant", "audience does not include this identity provider", client.client_id)

    # 6. iat/exp against the clock
    iat, exp = claims.get("iat"), claims.get("exp")
    if not isinstance(iat, (int, float)) or not isinstance(exp, (int, float)):
        return _rejected(6, "invalid_grant", "iat and exp claims are required", client.client_id)
    temporal = validate_temporal(int(iat), int(exp), now, skew)
    if temporal is TemporalCheck.EXPIRED:
        return _rejected(6, "invalid_grant", "token expired", client.client_id)
    if temporal is TemporalCheck.NOT_YET_VALID:
        return _rejected(6, "invalid_grant", "token not yet valid", client.client_id)

    # 7. signature integrity under the issuer profile's key
    try:
        claims = jwt_core.verify_and_decode(req.shared_token, profile.verification_key, now, skew)
    except TokenError as exc:
        return _rejected(7, "invalid_grant", f"integrity check failed: {exc}", client.client_id)

    # 8. sdata extraction per the issuer profile
    sdata = claims.get("sdata")
    if profile.sdata_mode == SDATA_SEALED:
        if not isinstance(sdata, str):
            return _rejected(8, "invalid_grant", "profile expects sealed sdata", client.client_id)
        assert profile.seal_key is not None
        try:
            sdata_obj = jwt_core.open_sdata(sdata, profile.seal_key)
        except TokenError as exc:
            return _rejected(8, "invalid_grant", f"sdata unsealing failed: {exc}", client.client_id)
    else:
        if not isinstance(sdata, dict) or not sdata:
            return _rejected(8, "invalid_grant", "sdata must be a non-empty JSON object", client.client_id)
        sdata_obj = sdata

    # 9. mandatory claims per the issuer profile (present and non-empty)
    missing = [name for name in profile.mandatory_claims if sdata_obj.get(name) in (None, "")]
    if missing:
        return _rejected(9, "invalid_grant", f"sdata missing mandatory claim(s): {', '.join(missing)}",
                         client.client_id)
    try:
        subject_data = SubjectData.from_claims(sdata_obj)
    except ValueError as exc:
        return _rejected(9, "invalid_grant", str(exc), client.client_id)

    # 10. optional SCIM cross-verification (fail-closed unless configured open)
    if profile.scim is not None:
        result = scim_verify(subject_data, profile, scim_fetcher, registry.policy.scim_timeout)
        if result is ScimResult.MISMATCH:
            return _rejected(10, "invalid_grant", "subject data does not match the peer's record",
                             client.client_id)
        if result is ScimResult.UNAVAILABLE and not registry.policy.scim_fail_open:
            return _rejected(10, "invalid_grant", "peer verification unavailable", client.client_id)

    if profile.provisioning.mode != PROVISION_NONE:
        registry.provision_shadow_user(subject_data, profile.issuer, profile.provisioning, now)

    return GrantDecision(
        accepted=True,
        subject_data=subject_data,
        origin_issuer=profile.issuer,
        client_id=client.client_id,
    )


def grant_to_token_response(decision: GrantDecision, registry: Registry, now: int) -> TokenResponse:
    """Mint the domain-local access token for an accepted grant.

    The token is indistinguishable from locally issued ones at introspection;
    scope comes solely from the federated-grant policy (identity_share can
    never ride along, so grants do not chain). Never returns an id_token or a
    new identity_share_token.
    """
    assert decision.accepted and decision.subject_data is not None and decision.client_id is not None
    policy = registry.policy
    scope = frozenset(policy.federated_scopes) - {"identity_share"}
    access = AccessTokenRecord(
        token=generate_opaque_token(),
        subject=decision.subject_data.subject,
        client_id=decision.client_id,
        scope=scope,
        issuer=registry.issuer,
        issued_at=now,
        expires_at=now + policy.access_token_ttl,
        origin=ORIGIN_IDENTITY_SHARE,
        origin_issuer=decision.origin_issuer,
    )
    registry.store_access_token(access)

    refresh: str | None = None
    if policy.refresh_tokens_enabled:
        record = RefreshTokenRecord(
            token=generate_opaque_token(),
            subject=access.subject,
            client_id=access.client_id,
            scope=scope,
            issued_at=now,
            expires_at=now + policy.refresh_token_ttl,
            origin=ORIGIN_IDENTITY_SHARE,
            origin_issuer=decision.origin_issuer,
        )
        registry.store_refresh_token(record)
        refresh = record.token

    return TokenResponse(
        access_token=access.token,
        expires_in=policy.access_token_ttl,
        refresh_token=refresh,
        scope=" ".join(sorted(scope)),
    )
