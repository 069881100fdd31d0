"""Domain types and pure constructors/validators for protocol wire shapes.

Everything here is side-effect free; stores that hold the records live in
the registry module.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass, field
from typing import Any
from urllib.parse import parse_qsl, urlparse

ERROR_CODES = frozenset(
    {
        "invalid_request",
        "invalid_client",
        "invalid_grant",
        "unsupported_grant_type",
        "invalid_scope",
        "invalid_grant_token",
        "server_error",
    }
)

GRANT_AUTHORIZATION_CODE = "authorization_code"
GRANT_IDENTITY_SHARE = "identity_share_token"
GRANT_REFRESH = "refresh_token"

SCOPE_OPENID = "openid"
SCOPE_IDENTITY_SHARE = "identity_share"


class InvalidTokenRequest(Exception):
    """Request body cannot be parsed; maps to the invalid_request error."""


def is_absolute_uri(value: str) -> bool:
    parsed = urlparse(value)
    return bool(parsed.scheme) and bool(parsed.netloc)


def generate_opaque_token(n_bytes: int = 32) -> str:
    """URL-safe random string with n_bytes*8 bits of entropy (>=128 required)."""
    if n_bytes < 16:
        raise ValueError("tokens must carry at least 128 bits of entropy")
    return secrets.token_urlsafe(n_bytes)


@dataclass(frozen=True)
class SubjectData:
    """End-user claims carried inside the share token's sdata object."""

    subject: str
    email: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.subject:
            raise ValueError("subject must be non-empty")
        if "subject" in self.extras or "email" in self.extras:
            raise ValueError("extras must not shadow subject or email")

    def to_claims(self) -> dict[str, Any]:
        claims: dict[str, Any] = {"subject": self.subject}
        if self.email is not None:
            claims["email"] = self.email
        claims.update(self.extras)
        return claims

    @classmethod
    def from_claims(cls, claims: dict[str, Any]) -> "SubjectData":
        subject = claims.get("subject")
        if not isinstance(subject, str) or not subject:
            raise ValueError("sdata carries no usable subject")
        email = claims.get("email")
        if email is not None and not isinstance(email, str):
            raise ValueError("sdata email is not a string")
        extras = {k: v for k, v in claims.items() if k not in ("subject", "email")}
        return cls(subject=subject, email=email, extras=extras)


@dataclass(frozen=True)
class IdentityShareClaims:
    """The cross-domain assertion payload: iss, aud, iat, exp, sdata."""

    iss: str
    aud: str | list[str]
    iat: int
    exp: int
    sdata: dict[str, Any] | str

    def __post_init__(self) -> None:
        if not is_absolute_uri(self.iss):
            raise ValueError(f"iss is not an absolute URI: {self.iss!r}")
        for entry in self.audiences():
            if not is_absolute_uri(entry):
                raise ValueError(f"aud entry is not an absolute URI: {entry!r}")
        if self.exp <= self.iat:
            raise ValueError("exp must be strictly greater than iat")
        if not self.sdata:
            raise ValueError("sdata is mandatory and must be non-empty")

    def audiences(self) -> list[str]:
        return [self.aud] if isinstance(self.aud, str) else list(self.aud)

    def to_dict(self) -> dict[str, Any]:
        return {"iss": self.iss, "aud": self.aud, "iat": self.iat, "exp": self.exp, "sdata": self.sdata}


def build_identity_share_claims(
    issuer: str,
    targets: list[str],
    subject_data: SubjectData,
    now: int,
    ttl: int,
) -> IdentityShareClaims:
    """Assemble the share-token claim set; aud collapses to a string for a
    single target, otherwise stays an array in input order. Sealing of sdata,
    when the trust profile calls for it, happens at signing time."""
    if not targets:
        raise ValueError("at least one target issuer is required")
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    aud: str | list[str] = targets[0] if len(targets) == 1 else list(targets)
    return IdentityShareClaims(
        iss=issuer,
        aud=aud,
        iat=now,
        exp=now + ttl,
        sdata=subject_data.to_claims(),
    )


class TemporalCheck(enum.Enum):
    OK = "ok"
    EXPIRED = "expired"
    NOT_YET_VALID = "not_yet_valid"


def validate_temporal(iat: int, exp: int, now: int, skew: int) -> TemporalCheck:
    """Live window: iat <= now+skew and exp > now-skew; expiry checked first."""
    if exp <= now - skew:
        return TemporalCheck.EXPIRED
    if iat > now + skew:
        return TemporalCheck.NOT_YET_VALID
    return TemporalCheck.OK


@dataclass(frozen=True)
class TokenResponse:
    access_token: str
    expires_in: int
    token_type: str = "Bearer"
    refresh_token: str | None = None
    id_token: str | None = None
    identity_share_token: str | None = None
    scope: str | None = None

    def __post_init__(self) -> None:
        if not self.access_token:
            raise ValueError("access_token is mandatory on success")
        if self.token_type != "Bearer":
            raise ValueError("token_type is fixed to Bearer")

    def to_dict(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "access_token": self.access_token,
            "token_type": self.token_type,
            "expires_in": self.expires_in,
        }
        for name in ("refresh_token", "id_token", "identity_share_token", "scope"):
            value = getattr(self, name)
            if value is not None:
                body[name] = value
        return body


@dataclass(frozen=True)
class OAuthError:
    error: str
    error_description: str | None = None

    def __post_init__(self) -> None:
        if self.error not in ERROR_CODES:
            raise ValueError(f"error code {self.error!r} is outside the allowed set")

    def to_dict(self) -> dict[str, str]:
        body = {"error": self.error}
        if self.error_description:
            body["error_description"] = self.error_description
        return body

    def http_status(self) -> int:
        return 401 if self.error == "invalid_client" else 400


@dataclass
class AuthorizationCodeRecord:
    code: str
    client_id: str
    redirect_uri: str
    scope: frozenset[str]
    subject: str
    issued_at: int
    ttl: int
    nonce: str | None = None
    identity_share_target: str | None = None
    redeemed: bool = False

    def expired(self, now: int) -> bool:
        return now > self.issued_at + self.ttl


ORIGIN_LOCAL_LOGIN = "local-login"
ORIGIN_IDENTITY_SHARE = "identity-share-grant"


@dataclass
class AccessTokenRecord:
    token: str
    subject: str
    client_id: str
    scope: frozenset[str]
    issuer: str
    issued_at: int
    expires_at: int
    origin: str = ORIGIN_LOCAL_LOGIN
    origin_issuer: str | None = None

    def __post_init__(self) -> None:
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be after issued_at")
        if (self.origin == ORIGIN_IDENTITY_SHARE) != (self.origin_issuer is not None):
            raise ValueError("origin_issuer is present iff origin is identity-share-grant")

    def active(self, now: int) -> bool:
        return now < self.expires_at


@dataclass
class RefreshTokenRecord:
    token: str
    subject: str
    client_id: str
    scope: frozenset[str]
    issued_at: int
    expires_at: int
    origin: str
    origin_issuer: str | None = None
    used: bool = False


KNOWN_TOKEN_PARAMS = (
    "grant_type",
    "code",
    "redirect_uri",
    "client_id",
    "client_secret",
    "shared_token",
    "refresh_token",
    "scope",
)


@dataclass(frozen=True)
class TokenRequest:
    grant_type: str | None = None
    code: str | None = None
    redirect_uri: str | None = None
    client_id: str | None = None
    client_secret: str | None = None
    shared_token: str | None = None
    refresh_token: str | None = None
    scope: str | None = None
    extras: dict[str, str] = field(default_factory=dict)


def parse_token_request(body: str) -> TokenRequest:
    """Parse an application/x-www-form-urlencoded token request.

    Duplicate parameters and undecodable percent-encoding raise
    InvalidTokenRequest; unknown parameters are kept in ``extras`` but
    otherwise ignored.
    """
    try:
        pairs = parse_qsl(body, keep_blank_values=True, errors="strict")
    except (UnicodeDecodeError, ValueError) as exc:
        raise InvalidTokenRequest(f"body is not decodable form data: {exc}") from exc
    seen: set[str] = set()
    known: dict[str, str] = {}
    extras: dict[str, str] = {}
    for key, value in pairs:
        if key in seen:
            raise InvalidTokenRequest(f"duplicate parameter {key!r}")
        seen.add(key)
        if key in KNOWN_TOKEN_PARAMS:
            known[key] = value
        else:
            extras[key] = value
    return TokenRequest(**known, extras=extras)
