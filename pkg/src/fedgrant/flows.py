"""Authorization-code flow with the identity_share scope extension.

The share-token minting itself lives in share_grant so other response types
could reuse it; this module owns request validation, single-use code
issuance/redemption, and ID-token signing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any
from urllib.parse import urlencode

from . import share_grant
from .jwt_core import JoseHeader, encode_jwt
from .registry import Registry
from .tokens import (
    GRANT_AUTHORIZATION_CODE,
    SCOPE_IDENTITY_SHARE,
    SCOPE_OPENID,
    AccessTokenRecord,
    AuthorizationCodeRecord,
    OAuthError,
    RefreshTokenRecord,
    TokenRequest,
    TokenResponse,
    generate_opaque_token,
)

AUTHORIZE_PARAMS = (
    "response_type",
    "client_id",
    "redirect_uri",
    "scope",
    "state",
    "nonce",
    "identity_share_target",
)


@dataclass(frozen=True)
class AuthorizationRequest:
    response_type: str | None = None
    client_id: str | None = None
    redirect_uri: str | None = None
    scope: str | None = None
    state: str | None = None
    nonce: str | None = None
    identity_share_target: str | None = None

    def scopes(self) -> frozenset[str]:
        return frozenset((self.scope or "").split())

    @classmethod
    def from_query(cls, query: dict[str, list[str]]) -> "AuthorizationRequest":
        values: dict[str, str] = {}
        for name in AUTHORIZE_PARAMS:
            entries = query.get(name, [])
            if len(entries) > 1:
                raise ValueError(f"duplicate parameter {name!r}")
            if entries:
                values[name] = entries[0]
        return cls(**values)


# Outcome kinds for the authorization endpoint. Errors before the client and
# redirect URI are validated must never redirect anywhere.
DIRECT_ERROR = "direct_error"
REDIRECT_ERROR = "redirect_error"
REDIRECT_CODE = "redirect_code"
LOGIN_REQUIRED = "login_required"


@dataclass(frozen=True)
class AuthorizeOutcome:
    kind: str
    error: OAuthError | None = None  # direct errors only (JSON body)
    error_code: str | None = None  # authorization-endpoint error namespace
    redirect_uri: str | None = None
    params: dict[str, str] = field(default_factory=dict)

    def location(self) -> str:
        assert self.redirect_uri is not None
        separator = "&" if "?" in self.redirect_uri else "?"
        return f"{self.redirect_uri}{separator}{urlencode(self.params)}"


def _redirect_error(req: AuthorizationRequest, code: str, description: str) -> AuthorizeOutcome:
    # Redirect errors use RFC 6749 section 4.1.2.1 codes, carried as query
    # parameters on the registered redirect URI; state echoes verbatim.
    params = {"error": code, "error_description": description}
    if req.state is not None:
        params["state"] = req.state
    return AuthorizeOutcome(
        kind=REDIRECT_ERROR, error_code=code, redirect_uri=req.redirect_uri, params=params
    )


def handle_authorization_request(
    req: AuthorizationRequest,
    registry: Registry,
    authenticated_subject: str | None,
    now: int,
) -> AuthorizeOutcome:
    """Validate in order: client, redirect_uri (direct errors), response_type,
    scope, then the identity-share target against the trust list. With no
    authenticated subject the outcome is LOGIN_REQUIRED after validation; with
    one, a single-use code is minted and the redirect echoes state verbatim.
    """
    client = registry.lookup_client(req.client_id) if req.client_id else None
    if client is None:
        return AuthorizeOutcome(kind=DIRECT_ERROR, error=OAuthError("invalid_client", "unknown client"))
    if not req.redirect_uri or req.redirect_uri not in client.redirect_uris:
        return AuthorizeOutcome(
            kind=DIRECT_ERROR, error=OAuthError("invalid_request", "redirect_uri is not registered")
        )

    if req.response_type != "code":
        return _redirect_error(req, "unsupported_response_type", "only response_type=code is supported")

    scopes = req.scopes()
    if SCOPE_OPENID not in scopes:
        return _redirect_error(req, "invalid_scope", "scope must include openid")
    if not scopes <= client.allowed_scopes:
        denied = " ".join(sorted(scopes - client.allowed_scopes))
        return _redirect_error(req, "invalid_scope", f"scope not allowed for client: {denied}")

    target: str | None = None
    if SCOPE_IDENTITY_SHARE in scopes and req.identity_share_target:
        if registry.lookup_issuer(req.identity_share_target) is None:
            return _redirect_error(
                req, "invalid_request", "identity_share_target is not a trusted identity provider"
            )
        target = req.identity_share_target

    if authenticated_subject is None:
        return AuthorizeOutcome(kind=LOGIN_REQUIRED)

    record = AuthorizationCodeRecord(
        code=generate_opaque_token(),
        client_id=client.client_id,
        redirect_uri=req.redirect_uri,
        scope=scopes,
        subject=authenticated_subject,
        issued_at=now,
        ttl=registry.policy.authorization_code_ttl,
        nonce=req.nonce,
        identity_share_target=target,
    )
    registry.store_code(record)
    params = {"code": record.code}
    if req.state is not None:
        params["state"] = req.state
    return AuthorizeOutcome(kind=REDIRECT_CODE, redirect_uri=req.redirect_uri, params=params)


def issue_id_token(
    subject: str,
    client_id: str,
    nonce: str | None,
    now: int,
    ttl: int,
    registry: Registry,
) -> str:
    """RS256-signed minimal ID token, verifiable against the /jwks document."""
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    claims: dict[str, Any] = {
        "iss": registry.issuer,
        "sub": subject,
        "aud": client_id,
        "iat": now,
        "exp": now + ttl,
    }
    if nonce is not None:
        claims["nonce"] = nonce
    header = JoseHeader(alg="RS256", kid=registry.signing_key.key_id)
    return encode_jwt(claims, header, registry.signing_key)


def redeem_authorization_code(
    req: TokenRequest, registry: Registry, now: int
) -> TokenResponse | OAuthError:
    """Exchange a single-use code for tokens.

    The response carries an identity_share_token exactly when the code was
    granted with the identity_share scope.
    """
    client = registry.authenticate_client(req.client_id, req.client_secret)
    if client is None:
        return OAuthError("invalid_client", "client authentication failed")
    if GRANT_AUTHORIZATION_CODE not in client.allowed_grant_types:
        return OAuthError("unsupported_grant_type", "client may not use authorization_code")
    if not req.code:
        return OAuthError("invalid_request", "code parameter is required")

    record = registry.redeem_code(req.code, client.client_id, req.redirect_uri, now)
    if record is None:
        return OAuthError("invalid_grant", "code is unknown, expired, already redeemed, or bound elsewhere")

    user = registry.user_by_subject(record.subject)
    if user is None:
        return OAuthError("invalid_grant", "subject no longer exists")

    policy = registry.policy
    access = AccessTokenRecord(
        token=generate_opaque_token(),
        subject=record.subject,
        client_id=client.client_id,
        scope=record.scope,
        issuer=registry.issuer,
        issued_at=now,
        expires_at=now + policy.access_token_ttl,
    )
    registry.store_access_token(access)

    id_token = issue_id_token(record.subject, client.client_id, record.nonce, now, policy.id_token_ttl, registry)

    share_token: str | None = None
    if SCOPE_IDENTITY_SHARE in record.scope:
        share_token = share_grant.issue_identity_share_token(
            subject_data=user.claims,
            issuer=registry.issuer,
            target=record.identity_share_target,
            registry=registry,
            now=now,
            ttl=policy.identity_share_token_ttl,
        )

    refresh: str | None = None
    if policy.refresh_tokens_enabled:
        refresh_record = RefreshTokenRecord(
            token=generate_opaque_token(),
            subject=record.subject,
            client_id=client.client_id,
            scope=record.scope,
            issued_at=now,
            expires_at=now + policy.refresh_token_ttl,
            origin=access.origin,
        )
        registry.store_refresh_token(refresh_record)
        refresh = refresh_record.token

    return TokenResponse(
        access_token=access.token,
        expires_in=policy.access_token_ttl,
        refresh_token=refresh,
        id_token=id_token,
        identity_share_token=share_token,
        scope=" ".join(sorted(record.scope)),
    )


def rotate_refresh_token(req: TokenRequest, registry: Registry, now: int) -> TokenResponse | OAuthError:
    """One-time refresh rotation: the presented token is retired and a new
    access/refresh pair is issued with the original grant's scope."""
    client = registry.authenticate_client(req.client_id, req.client_secret)
    if client is None:
        return OAuthError("invalid_client", "client authentication failed")
    if not req.refresh_token:
        return OAuthError("invalid_request", "refresh_token parameter is required")
    record = registry.consume_refresh_token(req.refresh_token, client.client_id, now)
    if record is None:
        return OAuthError("invalid_grant", "refresh token is unknown, expired, or already used")

    policy = registry.policy
    access = AccessTokenRecord(
        token=generate_opaque_token(),
        subject=record.subject,
        client_id=client.client_id,
        scope=record.scope,
        issuer=registry.issuer,
        issued_at=now,
        expires_at=now + policy.access_token_ttl,
        origin=record.origin,
        origin_issuer=record.origin_issuer,
    )
    registry.store_access_token(access)
    rotated = RefreshTokenRecord(
        token=generate_opaque_token(),
        subject=record.subject,
        client_id=client.client_id,
        scope=record.scope,
        issued_at=now,
        expires_at=now + policy.refresh_token_ttl,
        origin=record.origin,
        origin_issuer=record.origin_issuer,
    )
    registry.store_refresh_token(rotated)
    return TokenResponse(
        access_token=access.token,
        expires_in=policy.access_token_ttl,
        refresh_token=rotated.token,
        scope=" ".join(sorted(record.scope)),
    )
