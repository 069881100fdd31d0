"""Compact JWT encoding/decoding, JWS signing/verification, and sdata sealing.

Supports HS256 (HMAC-SHA256) and RS256 (RSASSA-PKCS1-v1_5 with SHA-256) only.
Subject-data sealing is AES-256-GCM over the claim object's UTF-8 JSON, emitted
as a single base64url string of nonce || ciphertext || tag so the holder of the
token cannot read the sealed claims.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import secrets
from dataclasses import dataclass
from typing import Any

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

SUPPORTED_ALGS = ("HS256", "RS256")

MIN_SYMMETRIC_KEY_BYTES = 32
SEAL_KEY_BYTES = 32  # AES-256
SEAL_NONCE_BYTES = 12
SEAL_TAG_BYTES = 16


class TokenError(Exception):
    """Base class for token handling failures."""


class MalformedToken(TokenError):
    """Input is not structurally a compact JWT / sealed blob."""


class IntegrityFailure(TokenError):
    """Signature or AEAD authentication did not verify."""


class Expired(TokenError):
    """exp lies outside the allowed clock-skew window."""


class NotYetValid(TokenError):
    """iat lies in the future beyond the allowed clock-skew window."""


class KeyConfigError(TokenError):
    """Key material does not match the requested operation or algorithm."""


@dataclass(frozen=True)
class JoseHeader:
    alg: str
    typ: str = "JWT"
    kid: str | None = None

    def to_dict(self) -> dict[str, Any]:
        header: dict[str, Any] = {"alg": self.alg, "typ": self.typ}
        if self.kid is not None:
            header["kid"] = self.kid
        return header


@dataclass(frozen=True)
class KeyMaterial:
    """Opaque key container: a shared secret or one half of an RSA pair."""

    kind: str  # "symmetric" | "rsa-private" | "rsa-public"
    secret: bytes | None = None
    rsa_private: rsa.RSAPrivateKey | None = None
    rsa_public: rsa.RSAPublicKey | None = None
    key_id: str | None = None

    @classmethod
    def symmetric(cls, secret: bytes, key_id: str | None = None) -> "KeyMaterial":
        if len(secret) < MIN_SYMMETRIC_KEY_BYTES:
            raise KeyConfigError(
                f"symmetric secrets must be at least {MIN_SYMMETRIC_KEY_BYTES} bytes, got {len(secret)}"
            )
        return cls(kind="symmetric", secret=secret, key_id=key_id)

    @classmethod
    def rsa_private_from_pem(cls, pem: str | bytes, key_id: str | None = None) -> "KeyMaterial":
        if isinstance(pem, str):
            pem = pem.encode("ascii")
        key = serialization.load_pem_private_key(pem, password=None)
        if not isinstance(key, rsa.RSAPrivateKey):
            raise KeyConfigError("PEM does not contain an RSA private key")
        return cls(kind="rsa-private", rsa_private=key, key_id=key_id)

    @classmethod
    def rsa_public_from_pem(cls, pem: str | bytes, key_id: str | None = None) -> "KeyMaterial":
        if isinstance(pem, str):
            pem = pem.encode("ascii")
        key = serialization.load_pem_public_key(pem)
        if not isinstance(key, rsa.RSAPublicKey):
            raise KeyConfigError("PEM does not contain an RSA public key")
        return cls(kind="rsa-public", rsa_public=key, key_id=key_id)

    @classmethod
    def generate_rsa(cls, key_id: str | None = None, bits: int = 2048) -> "KeyMaterial":
        key = rsa.generate_private_key(public_exponent=65537, key_size=bits)
        return cls(kind="rsa-private", rsa_private=key, key_id=key_id)

    def public_half(self) -> "KeyMaterial":
        if self.kind == "rsa-private":
            assert self.rsa_private is not None
            return KeyMaterial(kind="rsa-public", rsa_public=self.rsa_private.public_key(), key_id=self.key_id)
        if self.kind == "rsa-public":
            return self
        # HS256 trust links share the secret on both sides.
        return self


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(segment: str) -> bytes:
    """Strict no-padding base64url decode.

    Rejects padding characters, non-alphabet characters, and non-canonical
    trailing bits (so re-encoding always reproduces the input). Without the
    canonical check, a flipped padding bit in the final character would decode
    to the same bytes and slip past signature verification.
    """
    if "=" in segment:
        raise MalformedToken("base64url segment must not be padded")
    pad = -len(segment) % 4
    if pad == 3:
        raise MalformedToken("base64url segment has impossible length")
    try:
        raw = base64.b64decode(segment + "=" * pad, altchars=b"-_", validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedToken(f"invalid base64url: {exc}") from exc
    if b64url_encode(raw) != segment:
        raise MalformedToken("non-canonical base64url segment")
    return raw


def _json_bytes(obj: Any) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _decode_json_object(raw: bytes, what: str) -> dict[str, Any]:
    try:
        value = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedToken(f"{what} is not valid JSON") from exc
    if not isinstance(value, dict):
        raise MalformedToken(f"{what} is not a JSON object")
    return value


def compute_signature(signing_input: bytes, key: KeyMaterial, alg: str) -> bytes:
    """Sign the raw ``header.payload`` octets. Key kind must match alg."""
    if alg == "HS256":
        if key.kind != "symmetric" or key.secret is None:
            raise KeyConfigError("HS256 requires a symmetric key")
        return hmac.new(key.secret, signing_input, hashlib.sha256).digest()
    if alg == "RS256":
        if key.kind != "rsa-private" or key.rsa_private is None:
            raise KeyConfigError("RS256 signing requires an RSA private key")
        return key.rsa_private.sign(signing_input, padding.PKCS1v15(), hashes.SHA256())
    raise KeyConfigError(f"unsupported algorithm {alg!r}")


def _verify_signature(signing_input: bytes, signature: bytes, key: KeyMaterial, alg: str) -> None:
    if alg == "HS256":
        if key.kind != "symmetric" or key.secret is None:
            raise IntegrityFailure("token alg HS256 does not match the configured key")
        expected = hmac.new(key.secret, signing_input, hashlib.sha256).digest()
        if not hmac.compare_digest(expected, signature):
            raise IntegrityFailure("HS256 signature mismatch")
        return
    if alg == "RS256":
        public = key.rsa_public if key.kind == "rsa-public" else None
        if public is None and key.kind == "rsa-private" and key.rsa_private is not None:
            public = key.rsa_private.public_key()
        if public is None:
            raise IntegrityFailure("token alg RS256 does not match the configured key")
        try:
            public.verify(signature, signing_input, padding.PKCS1v15(), hashes.SHA256())
        except InvalidSignature as exc:
            raise IntegrityFailure("RS256 signature mismatch") from exc
        return
    raise IntegrityFailure(f"unsupported algorithm {alg!r}")


def encode_jwt(claims: dict[str, Any], header: JoseHeader, key: KeyMaterial) -> str:
    """Serialize and sign claims as a compact JWT (no padding in any segment)."""
    if header.alg not in SUPPORTED_ALGS:
        raise KeyConfigError(f"unsupported algorithm {header.alg!r}")
    header_b64 = b64url_encode(_json_bytes(header.to_dict()))
    payload_b64 = b64url_encode(_json_bytes(claims))
    signing_input = f"{header_b64}.{payload_b64}".encode("ascii")
    signature = compute_signature(signing_input, key, header.alg)
    return f"{header_b64}.{payload_b64}.{b64url_encode(signature)}"


def peek_jwt(token: str) -> tuple[dict[str, Any], dict[str, Any]]:
    """Decode header and claims WITHOUT verifying anything but structure."""
    parts = token.split(".")
    if len(parts) != 3:
        raise MalformedToken(f"expected 3 segments, got {len(parts)}")
    header = _decode_json_object(b64url_decode(parts[0]), "header")
    claims = _decode_json_object(b64url_decode(parts[1]), "claims")
    return header, claims


def check_temporal_claims(claims: dict[str, Any], now: int, skew: int) -> None:
    """Raise Expired/NotYetValid when iat/exp fall outside ``now`` +/- ``skew``.

    A token is live while exp > now - skew and iat <= now + skew; expiry is
    checked first, so a token whose exp precedes its iat reports Expired.
    """
    exp = claims.get("exp")
    if exp is not None:
        if not isinstance(exp, (int, float)):
            raise MalformedToken("exp claim is not a number")
        if exp <= now - skew:
            raise Expired(f"token expired at {exp}")
    iat = claims.get("iat")
    if iat is not None:
        if not isinstance(iat, (int, float)):
            raise MalformedToken("iat claim is not a number")
        if iat > now + skew:
            raise NotYetValid(f"token issued in the future at {iat}")


def verify_and_decode(token: str, key: KeyMaterial, now: int, skew: int = 60) -> dict[str, Any]:
    """Verify structure, signature, then temporal bounds; return the claims.

    Raises:
        MalformedToken: not 3 segments, bad base64url, or non-JSON content.
        IntegrityFailure: unsupported/mismatched alg or signature mismatch.
        Expired / NotYetValid: exp or iat outside ``now`` +/- ``skew``.
    """
    parts = token.split(".")
    if len(parts) != 3:
        raise MalformedToken(f"expected 3 segments, got {len(parts)}")
    header_b64, payload_b64, signature_b64 = parts
    header = _decode_json_object(b64url_decode(header_b64), "header")
    claims = _decode_json_object(b64url_decode(payload_b64), "claims")
    signature = b64url_decode(signature_b64)

    alg = header.get("alg")
    if alg not in SUPPORTED_ALGS:
        raise IntegrityFailure(f"unsupported algorithm {alg!r}")

    signing_input = f"{header_b64}.{payload_b64}".encode("ascii")
    _verify_signature(signing_input, signature, key, alg)
    check_temporal_claims(claims, now, skew)
    return claims


def seal_sdata(subject_data: dict[str, Any], key: KeyMaterial) -> str:
    """AEAD-seal a claim object so only the peer holding ``key`` can read it.

    Output is base64url(nonce[12] || ciphertext || tag[16]) with a fresh random
    nonce per call, so two seals of the same object never collide.
    """
    if key.kind != "symmetric" or key.secret is None:
        raise KeyConfigError("sealing requires a symmetric key")
    if len(key.secret) != SEAL_KEY_BYTES:
        raise KeyConfigError(f"sealing key must be exactly {SEAL_KEY_BYTES} bytes (AES-256)")
    nonce = secrets.token_bytes(SEAL_NONCE_BYTES)
    ciphertext = AESGCM(key.secret).encrypt(nonce, _json_bytes(subject_data), None)
    return b64url_encode(nonce + ciphertext)


def open_sdata(blob: str, key: KeyMaterial) -> dict[str, Any]:
    """Reverse seal_sdata; any bit flip or wrong key fails authentication."""
    if key.kind != "symmetric" or key.secret is None:
        raise KeyConfigError("unsealing requires a symmetric key")
    if len(key.secret) != SEAL_KEY_BYTES:
        raise KeyConfigError(f"sealing key must be exactly {SEAL_KEY_BYTES} bytes (AES-256)")
    raw = b64url_decode(blob)
    if len(raw) < SEAL_NONCE_BYTES + SEAL_TAG_BYTES:
        raise MalformedToken("sealed blob too short")
    nonce, ciphertext = raw[:SEAL_NONCE_BYTES], raw[SEAL_NONCE_BYTES:]
    try:
        plaintext = AESGCM(key.secret).decrypt(nonce, ciphertext, None)
    except InvalidTag as exc:
        raise IntegrityFailure("sealed data failed authentication") from exc
    return _decode_json_object(plaintext, "sealed subject data")


def rsa_public_jwk(key: KeyMaterial) -> dict[str, str]:
    """JWK document for the verification half of an RSA key (for /jwks)."""
    public = key.public_half()
    if public.kind != "rsa-public" or public.rsa_public is None:
        raise KeyConfigError("JWK publication requires an RSA key")
    numbers = public.rsa_public.public_numbers()

    def _uint_b64(value: int) -> str:
        raw = value.to_bytes((value.bit_length() + 7) // 8 or 1, "big")
        return b64url_encode(raw)

    jwk = {
        "kty": "RSA",
        "use": "sig",
        "alg": "RS256",
        "n": _uint_b64(numbers.n),
        "e": _uint_b64(numbers.e),
    }
    if public.key_id:
        jwk["kid"] = public.key_id
    return jwk
