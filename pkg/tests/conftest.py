import base64

import pytest
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa


def _pem_pair() -> tuple[str, str]:
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


@pytest.fixture(scope="session")
def rsa_pems():
    """Two cached RSA key pairs; generating fresh ones per test is needless."""
    return {"a": _pem_pair(), "b": _pem_pair()}


def b64key(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


SHARED_SECRET = b"inter-idp-shared-secret-0123456789ab"
SEAL_KEY = b"seal-key-for-sdata-claims-32byte"

ISSUER_A = "https://domain-a.test/idp"
ISSUER_B = "https://domain-b.test/idp"


def idp_config_dict(
    issuer: str,
    rsa_private_pem: str,
    *,
    kid: str = "key-1",
    trusted: list | None = None,
    clients: list | None = None,
    users: list | None = None,
    scim_clients: list | None = None,
    introspection_clients: list | None = None,
    policy: dict | None = None,
) -> dict:
    return {
        "kind": "idp",
        "issuer": issuer,
        "bind": {"host": "127.0.0.1", "port": 0},
        "signing_keys": {"rsa_private_pem": rsa_private_pem, "kid": kid},
        "trusted_issuers": trusted or [],
        "clients": clients or [],
        "users": users or [],
        "scim_clients": scim_clients or [],
        "introspection_clients": introspection_clients or [],
        "policy": policy or {},
    }
