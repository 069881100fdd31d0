"""Protected-resource service: accepts bearer tokens, trusts exactly one
identity provider, and validates every token through that provider's
introspection endpoint (with a short positive-result cache)."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import httpx

from .httpd import HttpRequest, HttpResponse, HttpService
from .registry import ConfigError


@dataclass(frozen=True)
class ResourceConfig:
    introspection_url: str
    introspection_client_id: str
    introspection_client_secret: str
    resource_label: str
    host: str = "127.0.0.1"
    port: int = 0
    cache_ttl: float = 10.0
    introspection_timeout: float = 3.0


_RESOURCE_KEYS = {
    "kind", "bind", "introspection_url", "introspection_client_id",
    "introspection_client_secret", "resource_label", "cache_ttl", "introspection_timeout",
}


def load_resource_config(path: str | Path) -> ResourceConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return load_resource_config_dict(document)


def load_resource_config_dict(document: dict[str, Any]) -> ResourceConfig:
    unknown = set(document) - _RESOURCE_KEYS
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in resource config")
    if document.get("kind", "resource_server") != "resource_server":
        raise ConfigError(f"expected a resource_server config, got kind={document.get('kind')!r}")
    bind = document.get("bind", {})
    try:
        return ResourceConfig(
            introspection_url=document["introspection_url"],
            introspection_client_id=document["introspection_client_id"],
            introspection_client_secret=document["introspection_client_secret"],
            resource_label=document.get("resource_label", "protected-resource"),
            host=bind.get("host", "127.0.0.1"),
            port=int(bind.get("port", 0)),
            cache_ttl=float(document.get("cache_ttl", 10.0)),
            introspection_timeout=float(document.get("introspection_timeout", 3.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required field {exc.args[0]!r} in resource config") from exc


def _bearer_challenge(status: int, error: str, description: str) -> HttpResponse:
    # RFC 6750 carries the error attribute in the WWW-Authenticate header;
    # the body stays empty so no out-of-namespace code hits a JSON document.
    challenge = f'Bearer error="{error}", error_description="{description}"'
    return HttpResponse(
        status=status, body=b"", content_type="text/plain",
        headers={"WWW-Authenticate": challenge},
    )


class ResourceServerService(HttpService):
    _MAX_CACHE_ENTRIES = 1024

    def __init__(self, config: ResourceConfig, clock: Callable[[], float] = time.time) -> None:
        super().__init__(config.host, config.port)
        self.config = config
        self.clock = clock
        self._cache: dict[str, tuple[float, dict[str, Any]]] = {}
        self._cache_lock = threading.Lock()

    def dispatch(self, request: HttpRequest) -> HttpResponse:
        if (request.method, request.path) == ("GET", "/resource"):
            return self.serve_protected(request)
        return _bearer_challenge(404, "invalid_request", "no such resource")

    def serve_protected(self, request: HttpRequest) -> HttpResponse:
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer ") or not header[7:].strip():
            return _bearer_challenge(401, "invalid_request", "a bearer token is required")
        token = header[7:].strip()

        now = self.clock()
        cached = self._cache_get(token, now)
        if cached is not None:
            return self._grant(cached)

        try:
            response = httpx.post(
                self.config.introspection_url,
                data={"token": token},
                auth=(self.config.introspection_client_id, self.config.introspection_client_secret),
                timeout=self.config.introspection_timeout,
            )
        except httpx.HTTPError:
            return HttpResponse.json(503, {"error": "server_error",
                                           "error_description": "token validation unavailable"})
        if response.status_code != 200:
            return HttpResponse.json(503, {"error": "server_error",
                                           "error_description": "token validation unavailable"})
        payload = response.json()
        if not payload.get("active"):
            return _bearer_challenge(401, "invalid_token", "token is not active here")

        self._cache_put(token, payload, now)
        return self._grant(payload)

    def _grant(self, introspection: dict[str, Any]) -> HttpResponse:
        return HttpResponse.json(
            200,
            {
                "resource": self.config.resource_label,
                "sub": introspection.get("sub"),
                "iss": introspection.get("iss"),
            },
        )

    # Positive-only cache; an entry never outlives the token's own expiry.
    def _cache_get(self, token: str, now: float) -> dict[str, Any] | None:
        with self._cache_lock:
            entry = self._cache.get(token)
            if entry is None:
                return None
            keep_until, payload = entry
            if now >= keep_until:
                del self._cache[token]
                return None
            return payload

    def _cache_put(self, token: str, payload: dict[str, Any], now: float) -> None:
        keep_until = now + self.config.cache_ttl
        exp = payload.get("exp")
        if isinstance(exp, (int, float)):
            keep_until = min(keep_until, float(exp))
        with self._cache_lock:
            if len(self._cache) >= self._MAX_CACHE_ENTRIES:
                self._cache.clear()
            self._cache[token] = (keep_until, payload)
