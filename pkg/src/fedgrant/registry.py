"""Trust registry: peer identity providers, registered clients, local users.

One JSON config file fully describes one identity-provider instance; loading
it builds an in-memory registry that also hosts the mutable server-side
stores (authorization codes, access/refresh tokens, shadow accounts, login
handles). Stores take a single lock, so redemption and provisioning are
atomic under concurrent requests.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .jwt_core import KeyMaterial, MIN_SYMMETRIC_KEY_BYTES, SEAL_KEY_BYTES
from .tokens import (
    AccessTokenRecord,
    AuthorizationCodeRecord,
    RefreshTokenRecord,
    SubjectData,
    generate_opaque_token,
    is_absolute_uri,
)


class ConfigError(Exception):
    """Startup failure; the message names the offending entry."""


# --- secret hashing ---------------------------------------------------------

_PBKDF2_ITERATIONS = 30_000


def hash_secret(secret: str) -> str:
    salt = os.urandom(16)
    dk = hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, _PBKDF2_ITERATIONS)
    return "pbkdf2-sha256${}${}${}".format(
        _PBKDF2_ITERATIONS,
        base64.urlsafe_b64encode(salt).decode("ascii"),
        base64.urlsafe_b64encode(dk).decode("ascii"),
    )


def verify_secret(secret: str, stored: str) -> bool:
    try:
        scheme, iterations, salt_b64, dk_b64 = stored.split("$")
        salt = base64.urlsafe_b64decode(salt_b64)
        expected = base64.urlsafe_b64decode(dk_b64)
    except (ValueError, binascii.Error):
        return False
    if scheme != "pbkdf2-sha256":
        return False
    dk = hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, int(iterations))
    return hmac.compare_digest(dk, expected)


# Verified against when a client id is unknown, so unknown-id and wrong-secret
# rejections share a timing class.
_DUMMY_HASH = hash_secret("decoy-secret-for-unknown-ids")


# --- configured trust legs --------------------------------------------------

SDATA_PLAIN = "plain"
SDATA_SEALED = "sealed"

PROVISION_NONE = "none"
PROVISION_TEMPORARY = "temporary"
PROVISION_PERMANENT = "permanent"


@dataclass(frozen=True)
class ScimPolicy:
    base_url: str
    username: str
    secret: str


@dataclass(frozen=True)
class ProvisioningPolicy:
    mode: str = PROVISION_TEMPORARY
    ttl: int = 86_400


@dataclass(frozen=True)
class TrustedIssuerProfile:
    """Everything one trust leg needs: how to verify tokens FROM the peer and
    how to sign/seal tokens minted FOR the peer."""

    issuer: str
    alg: str  # HS256 (shared secret) | RS256 (peer verifies with our public key)
    verification_key: KeyMaterial
    sdata_mode: str = SDATA_PLAIN
    seal_key: KeyMaterial | None = None
    mandatory_claims: tuple[str, ...] = ("subject", "email")
    scim: ScimPolicy | None = None
    provisioning: ProvisioningPolicy = ProvisioningPolicy()


@dataclass(frozen=True)
class ClientRegistration:
    client_id: str
    client_secret_hash: str
    redirect_uris: tuple[str, ...]
    allowed_grant_types: frozenset[str]
    allowed_scopes: frozenset[str]


@dataclass
class UserAccount:
    username: str
    subject: str
    claims: SubjectData
    password_hash: str | None = None
    shadow: bool = False
    shadow_origin: str | None = None
    shadow_expires: int | None = None

    def __post_init__(self) -> None:
        if self.shadow and self.password_hash is not None:
            raise ValueError("shadow accounts never carry a password hash")
        if self.shadow != (self.shadow_origin is not None):
            raise ValueError("shadow_origin is present iff the account is a shadow")


@dataclass(frozen=True)
class Policy:
    authorization_code_ttl: int = 60
    access_token_ttl: int = 3600
    identity_share_token_ttl: int = 300
    id_token_ttl: int = 600
    refresh_token_ttl: int = 86_400
    login_handle_ttl: int = 300
    skew: int = 60
    refresh_tokens_enabled: bool = False
    scim_fail_open: bool = False
    scim_timeout: float = 3.0
    federated_scopes: frozenset[str] = frozenset({"federated"})


@dataclass
class PendingAuthorization:
    params: dict[str, str]
    created_at: int
    ttl: int
    failures: int = 0


class Registry:
    """Loaded configuration plus the instance's mutable protocol state."""

    def __init__(
        self,
        issuer: str,
        signing_key: KeyMaterial,
        policy: Policy,
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self.issuer = issuer
        self.signing_key = signing_key
        self.policy = policy
        self.host = host
        self.port = port
        self._issuers: dict[str, TrustedIssuerProfile] = {}
        self._clients: dict[str, ClientRegistration] = {}
        self._users: dict[str, UserAccount] = {}
        self._users_by_subject: dict[str, UserAccount] = {}
        self._shadow_users: dict[tuple[str, str], UserAccount] = {}
        self._scim_credentials: dict[str, str] = {}
        self._introspection_credentials: dict[str, str] = {}
        self._codes: dict[str, AuthorizationCodeRecord] = {}
        self._access_tokens: dict[str, AccessTokenRecord] = {}
        self._refresh_tokens: dict[str, RefreshTokenRecord] = {}
        self._login_handles: dict[str, PendingAuthorization] = {}
        self._lock = threading.Lock()

    # -- configured stores (read-only after load) --

    def add_trusted_issuer(self, profile: TrustedIssuerProfile) -> None:
        if profile.issuer in self._issuers:
            raise ConfigError(f"duplicate trusted issuer {profile.issuer!r}")
        if profile.issuer == self.issuer:
            raise ConfigError(f"issuer {profile.issuer!r} must not trust itself")
        self._issuers[profile.issuer] = profile

    def add_client(self, client: ClientRegistration) -> None:
        if client.client_id in self._clients:
            raise ConfigError(f"duplicate client_id {client.client_id!r}")
        self._clients[client.client_id] = client

    def add_user(self, user: UserAccount) -> None:
        if user.username in self._users:
            raise ConfigError(f"duplicate username {user.username!r}")
        if user.subject in self._users_by_subject:
            raise ConfigError(f"duplicate subject {user.subject!r}")
        self._users[user.username] = user
        self._users_by_subject[user.subject] = user

    def trusted_issuers(self) -> list[TrustedIssuerProfile]:
        """Profiles in configuration order."""
        return list(self._issuers.values())

    def lookup_issuer(self, issuer: str) -> TrustedIssuerProfile | None:
        """Exact string match; no URI normalization on purpose."""
        return self._issuers.get(issuer)

    def lookup_client(self, client_id: str) -> ClientRegistration | None:
        return self._clients.get(client_id)

    def authenticate_client(self, client_id: str | None, client_secret: str | None) -> ClientRegistration | None:
        """Constant-time-comparison credential check.

        Unknown ids burn a hash against a decoy so they are not
        distinguishable from wrong secrets by timing class.
        """
        client = self._clients.get(client_id) if client_id else None
        stored = client.client_secret_hash if client else _DUMMY_HASH
        ok = verify_secret(client_secret or "", stored)
        return client if (client is not None and ok) else None

    def authenticate_user(self, username: str, password: str) -> UserAccount | None:
        user = self._users.get(username)
        stored = user.password_hash if user and user.password_hash else _DUMMY_HASH
        ok = verify_secret(password, stored)
        return user if (user is not None and user.password_hash and ok) else None

    def user_by_subject(self, subject: str, include_shadow: bool = False) -> UserAccount | None:
        user = self._users_by_subject.get(subject)
        if user is not None:
            return user
        if include_shadow:
            for shadow in self._shadow_users.values():
                if shadow.subject == subject:
                    return shadow
        return None

    def authenticate_scim_caller(self, username: str, secret: str) -> bool:
        stored = self._scim_credentials.get(username, _DUMMY_HASH)
        return verify_secret(secret, stored) and username in self._scim_credentials

    def authenticate_introspection_caller(self, caller_id: str, secret: str) -> bool:
        """Registered clients and configured resource servers may introspect."""
        client = self._clients.get(caller_id)
        if client is not None:
            return verify_secret(secret, client.client_secret_hash)
        stored = self._introspection_credentials.get(caller_id, _DUMMY_HASH)
        return verify_secret(secret, stored) and caller_id in self._introspection_credentials

    # -- shadow provisioning --

    def provision_shadow_user(
        self,
        subject_data: SubjectData,
        origin: str,
        policy: ProvisioningPolicy,
        now: int,
    ) -> UserAccount | None:
        """Idempotent per (origin, subject): re-provisioning refreshes expiry
        and claims instead of duplicating. Returns None when provisioning is
        switched off for the trust leg."""
        if policy.mode == PROVISION_NONE:
            return None
        expires = now + policy.ttl if policy.mode == PROVISION_TEMPORARY else None
        key = (origin, subject_data.subject)
        with self._lock:
            existing = self._shadow_users.get(key)
            if existing is not None:
                existing.claims = subject_data
                existing.shadow_expires = expires
                return existing
            account = UserAccount(
                username=f"shadow:{origin}:{subject_data.subject}",
                subject=subject_data.subject,
                claims=subject_data,
                shadow=True,
                shadow_origin=origin,
                shadow_expires=expires,
            )
            self._shadow_users[key] = account
            return account

    def shadow_user_count(self) -> int:
        with self._lock:
            return len(self._shadow_users)

    # -- authorization codes --

    def store_code(self, record: AuthorizationCodeRecord) -> None:
        with self._lock:
            self._codes[record.code] = record

    def redeem_code(
        self, code: str, client_id: str, redirect_uri: str | None, now: int
    ) -> AuthorizationCodeRecord | None:
        """Single atomic check-and-mark: at most one caller ever wins a code."""
        with self._lock:
            record = self._codes.get(code)
            if record is None or record.redeemed or record.expired(now):
                return None
            if record.client_id != client_id or record.redirect_uri != redirect_uri:
                return None
            record.redeemed = True
            return record

    # -- issued tokens --

    def store_access_token(self, record: AccessTokenRecord) -> None:
        with self._lock:
            self._access_tokens[record.token] = record

    def lookup_access_token(self, token: str) -> AccessTokenRecord | None:
        with self._lock:
            return self._access_tokens.get(token)

    def store_refresh_token(self, record: RefreshTokenRecord) -> None:
        with self._lock:
            self._refresh_tokens[record.token] = record

    def consume_refresh_token(self, token: str, client_id: str, now: int) -> RefreshTokenRecord | None:
        with self._lock:
            record = self._refresh_tokens.get(token)
            if record is None or record.used or now >= record.expires_at:
                return None
            if record.client_id != client_id:
                return None
            record.used = True
            return record

    # -- one-time login handles --

    def create_login_handle(self, params: dict[str, str], now: int) -> str:
        handle = generate_opaque_token(16)
        with self._lock:
            self._login_handles[handle] = PendingAuthorization(
                params=params, created_at=now, ttl=self.policy.login_handle_ttl
            )
        return handle

    def peek_login_handle(self, handle: str, now: int) -> PendingAuthorization | None:
        with self._lock:
            pending = self._login_handles.get(handle)
            if pending is None or now > pending.created_at + pending.ttl:
                self._login_handles.pop(handle, None)
                return None
            return pending

    def consume_login_handle(self, handle: str, now: int) -> PendingAuthorization | None:
        with self._lock:
            pending = self._login_handles.pop(handle, None)
            if pending is None or now > pending.created_at + pending.ttl:
                return None
            return pending

    # -- diagnostics --

    def snapshot(self) -> dict[str, Any]:
        """Serializable dump of configured state; never contains a plaintext
        secret (hashes only)."""
        with self._lock:
            return {
                "issuer": self.issuer,
                "trusted_issuers": [p.issuer for p in self._issuers.values()],
                "clients": {
                    c.client_id: {
                        "client_secret_hash": c.client_secret_hash,
                        "redirect_uris": list(c.redirect_uris),
                        "allowed_grant_types": sorted(c.allowed_grant_types),
                        "allowed_scopes": sorted(c.allowed_scopes),
                    }
                    for c in self._clients.values()
                },
                "users": {
                    u.username: {
                        "subject": u.subject,
                        "password_hash": u.password_hash,
                        "shadow": u.shadow,
                    }
                    for u in list(self._users.values()) + list(self._shadow_users.values())
                },
                "access_tokens": len(self._access_tokens),
                "authorization_codes": len(self._codes),
            }


# --- config file loading ----------------------------------------------------

_TOP_LEVEL_KEYS = {
    "kind", "issuer", "bind", "signing_keys", "trusted_issuers", "clients",
    "users", "scim_clients", "introspection_clients", "policy",
}
_BIND_KEYS = {"host", "port"}
_SIGNING_KEYS = {"rsa_private_pem", "kid"}
_TRUSTED_KEYS = {
    "issuer", "alg", "shared_secret_b64", "rsa_public_pem", "sdata_mode",
    "seal_key_b64", "mandatory_claims", "scim", "provisioning",
}
_SCIM_KEYS = {"base_url", "username", "secret"}
_PROVISION_KEYS = {"mode", "ttl"}
_CLIENT_KEYS = {"client_id", "client_secret", "redirect_uris", "allowed_grant_types", "allowed_scopes"}
_USER_KEYS = {"username", "password", "subject", "email", "claims"}
_CREDENTIAL_KEYS = {"username", "secret"}
_INTROSPECTION_KEYS = {"id", "secret"}
_POLICY_KEYS = {
    "authorization_code_ttl", "access_token_ttl", "identity_share_token_ttl",
    "id_token_ttl", "refresh_token_ttl", "login_handle_ttl", "skew",
    "refresh_tokens_enabled", "scim_fail_open", "scim_timeout", "federated_scopes",
}


def _require_keys(section: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {where}")


def _require(section: dict[str, Any], key: str, where: str) -> Any:
    if key not in section:
        raise ConfigError(f"missing required field {key!r} in {where}")
    return section[key]


def _decode_key_bytes(encoded: str, where: str) -> bytes:
    padded = encoded + "=" * (-len(encoded) % 4)
    try:
        return base64.urlsafe_b64decode(padded)
    except (binascii.Error, ValueError) as exc:
        raise ConfigError(f"{where}: value is not base64url: {exc}") from exc


def _load_trusted_issuer(entry: dict[str, Any], self_issuer: str) -> TrustedIssuerProfile:
    where = f"trusted_issuers entry {entry.get('issuer', '<missing issuer>')!r}"
    _require_keys(entry, _TRUSTED_KEYS, where)
    issuer = _require(entry, "issuer", where)
    if not is_absolute_uri(issuer):
        raise ConfigError(f"{where}: issuer must be an absolute URI")
    alg = _require(entry, "alg", where)
    if alg == "HS256":
        secret = _decode_key_bytes(_require(entry, "shared_secret_b64", where), where)
        if len(secret) < MIN_SYMMETRIC_KEY_BYTES:
            raise ConfigError(f"{where}: shared secret must be at least {MIN_SYMMETRIC_KEY_BYTES} bytes")
        verification_key = KeyMaterial.symmetric(secret)
    elif alg == "RS256":
        pem = _require(entry, "rsa_public_pem", where)
        try:
            verification_key = KeyMaterial.rsa_public_from_pem(pem)
        except Exception as exc:
            raise ConfigError(f"{where}: bad rsa_public_pem: {exc}") from exc
    else:
        raise ConfigError(f"{where}: alg must be HS256 or RS256, got {alg!r}")

    sdata_mode = entry.get("sdata_mode", SDATA_PLAIN)
    if sdata_mode not in (SDATA_PLAIN, SDATA_SEALED):
        raise ConfigError(f"{where}: sdata_mode must be plain or sealed")
    seal_key = None
    if sdata_mode == SDATA_SEALED:
        raw = _decode_key_bytes(_require(entry, "seal_key_b64", where), where)
        if len(raw) != SEAL_KEY_BYTES:
            raise ConfigError(f"{where}: seal key must be exactly {SEAL_KEY_BYTES} bytes")
        seal_key = KeyMaterial.symmetric(raw)

    mandatory = entry.get("mandatory_claims", ["subject", "email"])
    if not isinstance(mandatory, list) or not all(isinstance(m, str) and m for m in mandatory):
        raise ConfigError(f"{where}: mandatory_claims must be a list of claim names")

    scim = None
    if "scim" in entry and entry["scim"] is not None:
        scim_section = entry["scim"]
        _require_keys(scim_section, _SCIM_KEYS, f"{where}.scim")
        scim = ScimPolicy(
            base_url=_require(scim_section, "base_url", f"{where}.scim"),
            username=_require(scim_section, "username", f"{where}.scim"),
            secret=_require(scim_section, "secret", f"{where}.scim"),
        )

    provisioning = ProvisioningPolicy()
    if "provisioning" in entry and entry["provisioning"] is not None:
        prov = entry["provisioning"]
        _require_keys(prov, _PROVISION_KEYS, f"{where}.provisioning")
        mode = _require(prov, "mode", f"{where}.provisioning")
        if mode not in (PROVISION_NONE, PROVISION_TEMPORARY, PROVISION_PERMANENT):
            raise ConfigError(f"{where}: provisioning mode {mode!r} unknown")
        ttl = prov.get("ttl", 86_400)
        provisioning = ProvisioningPolicy(mode=mode, ttl=int(ttl))

    if self_issuer == issuer:
        raise ConfigError(f"{where}: an issuer cannot appear in its own trust list")

    return TrustedIssuerProfile(
        issuer=issuer,
        alg=alg,
        verification_key=verification_key,
        sdata_mode=sdata_mode,
        seal_key=seal_key,
        mandatory_claims=tuple(mandatory),
        scim=scim,
        provisioning=provisioning,
    )


def _load_client(entry: dict[str, Any]) -> ClientRegistration:
    where = f"clients entry {entry.get('client_id', '<missing client_id>')!r}"
    _require_keys(entry, _CLIENT_KEYS, where)
    redirect_uris = entry.get("redirect_uris", [])
    if not isinstance(redirect_uris, list):
        raise ConfigError(f"{where}: redirect_uris must be a list")
    return ClientRegistration(
        client_id=_require(entry, "client_id", where),
        client_secret_hash=hash_secret(_require(entry, "client_secret", where)),
        redirect_uris=tuple(redirect_uris),
        allowed_grant_types=frozenset(entry.get("allowed_grant_types", ["authorization_code"])),
        allowed_scopes=frozenset(entry.get("allowed_scopes", ["openid"])),
    )


def _load_user(entry: dict[str, Any]) -> UserAccount:
    where = f"users entry {entry.get('username', '<missing username>')!r}"
    _require_keys(entry, _USER_KEYS, where)
    extras = entry.get("claims", {})
    if not isinstance(extras, dict):
        raise ConfigError(f"{where}: claims must be an object")
    claims = SubjectData(
        subject=_require(entry, "subject", where),
        email=entry.get("email"),
        extras=extras,
    )
    return UserAccount(
        username=_require(entry, "username", where),
        subject=claims.subject,
        claims=claims,
        password_hash=hash_secret(_require(entry, "password", where)),
    )


def _load_policy(section: dict[str, Any]) -> Policy:
    _require_keys(section, _POLICY_KEYS, "policy")
    kwargs: dict[str, Any] = dict(section)
    if "federated_scopes" in kwargs:
        kwargs["federated_scopes"] = frozenset(kwargs["federated_scopes"])
    return Policy(**kwargs)


def load_config(path: str | Path) -> Registry:
    """Build a Registry from one IdP config document.

    Raises ConfigError naming the offending entry on any schema violation,
    duplicate identifier, or broken trust reference.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return load_config_dict(document)


def load_config_dict(document: dict[str, Any]) -> Registry:
    _require_keys(document, _TOP_LEVEL_KEYS, "top level")
    kind = document.get("kind", "idp")
    if kind != "idp":
        raise ConfigError(f"expected an idp config, got kind={kind!r}")

    issuer = _require(document, "issuer", "top level")
    if not is_absolute_uri(issuer):
        raise ConfigError(f"issuer {issuer!r} must be an absolute URI")

    signing = _require(document, "signing_keys", "top level")
    _require_keys(signing, _SIGNING_KEYS, "signing_keys")
    try:
        signing_key = KeyMaterial.rsa_private_from_pem(
            _require(signing, "rsa_private_pem", "signing_keys"), key_id=signing.get("kid")
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"signing_keys: bad rsa_private_pem: {exc}") from exc

    bind = document.get("bind", {})
    _require_keys(bind, _BIND_KEYS, "bind")

    policy = _load_policy(document.get("policy", {}))

    registry = Registry(
        issuer=issuer,
        signing_key=signing_key,
        policy=policy,
        host=bind.get("host", "127.0.0.1"),
        port=int(bind.get("port", 0)),
    )
    for entry in document.get("trusted_issuers", []):
        registry.add_trusted_issuer(_load_trusted_issuer(entry, issuer))
    for entry in document.get("clients", []):
        registry.add_client(_load_client(entry))
    for entry in document.get("users", []):
        registry.add_user(_load_user(entry))
    for entry in document.get("scim_clients", []):
        _require_keys(entry, _CREDENTIAL_KEYS, "scim_clients entry")
        username = _require(entry, "username", "scim_clients entry")
        if username in registry._scim_credentials:
            raise ConfigError(f"duplicate scim_clients username {username!r}")
        registry._scim_credentials[username] = hash_secret(_require(entry, "secret", "scim_clients entry"))
    for entry in document.get("introspection_clients", []):
        _require_keys(entry, _INTROSPECTION_KEYS, "introspection_clients entry")
        caller_id = _require(entry, "id", "introspection_clients entry")
        if caller_id in registry._introspection_credentials:
            raise ConfigError(f"duplicate introspection_clients id {caller_id!r}")
        registry._introspection_credentials[caller_id] = hash_secret(
            _require(entry, "secret", "introspection_clients entry")
        )
    return registry
