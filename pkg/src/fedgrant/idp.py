"""Identity-provider HTTP service.

One instance per domain; the federation harness boots two of them with
cross-referencing trust configs. Endpoints: /authorize, /login, /token,
/introspect, /scim/Users/{subject}, /jwks. Every error body is an OAuth
error document; HTML is served only for the login form.
"""

from __future__ import annotations

import base64
import binascii
import html
import time
from typing import Callable
from urllib.parse import urlencode

from . import flows, share_grant
from .httpd import HttpRequest, HttpResponse, HttpService
from .jwt_core import KeyConfigError, rsa_public_jwk
from .registry import Registry
from .tokens import (
    GRANT_AUTHORIZATION_CODE,
    GRANT_IDENTITY_SHARE,
    GRANT_REFRESH,
    InvalidTokenRequest,
    OAuthError,
    TokenResponse,
    parse_token_request,
)

FORM_CONTENT_TYPE = "application/x-www-form-urlencoded"

LOGIN_FORM = """<!doctype html>
<html><head><title>Sign in</title></head><body>
<h1>Sign in to {issuer}</h1>
{notice}
<form method="post" action="/login">
  <input type="hidden" name="handle" value="{handle}">
  <label>Username <input name="username" autocomplete="username"></label><br>
  <label>Password <input name="password" type="password" autocomplete="current-password"></label><br>
  <button type="submit">Sign in</button>
</form>
</body></html>
"""


def _error_response(error: OAuthError, headers: dict[str, str] | None = None) -> HttpResponse:
    return HttpResponse.json(error.http_status(), error.to_dict(), headers)


def _parse_basic_auth(headers: dict[str, str]) -> tuple[str, str] | None:
    header = headers.get("Authorization", "")
    if not header.startswith("Basic "):
        return None
    try:
        decoded = base64.b64decode(header[6:], validate=True).decode("utf-8")
        username, _, password = decoded.partition(":")
    except (binascii.Error, UnicodeDecodeError, ValueError):
        return None
    return username, password


class IdentityProviderService(HttpService):
    def __init__(
        self,
        registry: Registry,
        host: str | None = None,
        port: int | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        super().__init__(host or registry.host, registry.port if port is None else port)
        self.registry = registry
        self.clock = clock
        self.scim_requests_served = 0  # observability for the harness

    @property
    def issuer(self) -> str:
        return self.registry.issuer

    def now(self) -> int:
        return int(self.clock())

    # -- routing --

    def dispatch(self, request: HttpRequest) -> HttpResponse:
        route = (request.method, request.path)
        if route == ("GET", "/authorize"):
            return self.handle_authorize(request)
        if route == ("GET", "/login"):
            return self.handle_login_form(request)
        if route == ("POST", "/login"):
            return self.handle_login(request)
        if route == ("POST", "/token"):
            return self.handle_token(request)
        if route == ("POST", "/introspect"):
            return self.handle_introspect(request)
        if request.method == "GET" and request.path.startswith("/scim/Users/"):
            return self.handle_scim_get(request)
        if route == ("GET", "/jwks"):
            return self.handle_jwks()
        return _error_response(OAuthError("invalid_request", f"no such endpoint {request.path}"))

    # -- authorization + login --

    def handle_authorize(self, request: HttpRequest) -> HttpResponse:
        try:
            authz = flows.AuthorizationRequest.from_query(request.query)
        except ValueError as exc:
            return _error_response(OAuthError("invalid_request", str(exc)))
        outcome = flows.handle_authorization_request(authz, self.registry, None, self.now())
        if outcome.kind == flows.LOGIN_REQUIRED:
            params = {k: v[0] for k, v in request.query.items()}
            handle = self.registry.create_login_handle(params, self.now())
            return HttpResponse.redirect(f"/login?{urlencode({'handle': handle})}")
        return self._authorize_outcome_response(outcome)

    def _authorize_outcome_response(self, outcome: flows.AuthorizeOutcome) -> HttpResponse:
        if outcome.kind == flows.DIRECT_ERROR:
            assert outcome.error is not None
            return _error_response(outcome.error)
        return HttpResponse.redirect(outcome.location())

    def _render_login(self, handle: str, notice: str = "") -> HttpResponse:
        markup = LOGIN_FORM.format(
            issuer=html.escape(self.issuer),
            handle=html.escape(handle),
            notice=f"<p>{html.escape(notice)}</p>" if notice else "",
        )
        return HttpResponse.html(200, markup)

    def handle_login_form(self, request: HttpRequest) -> HttpResponse:
        handle = (request.query.get("handle") or [""])[0]
        if self.registry.peek_login_handle(handle, self.now()) is None:
            return _error_response(
                OAuthError("invalid_request", "login session unknown or expired; restart at /authorize")
            )
        return self._render_login(handle)

    def handle_login(self, request: HttpRequest) -> HttpResponse:
        try:
            form = parse_token_request(request.body.decode("utf-8"))
        except (InvalidTokenRequest, UnicodeDecodeError) as exc:
            return _error_response(OAuthError("invalid_request", str(exc)))
        handle = form.extras.get("handle", "")
        username = form.extras.get("username", "")
        password = form.extras.get("password", "")

        now = self.now()
        if self.registry.peek_login_handle(handle, now) is None:
            return _error_response(
                OAuthError("invalid_request", "login session unknown or expired; restart at /authorize")
            )
        user = self.registry.authenticate_user(username, password)
        if user is None:
            return self._render_login(handle, notice="Sign-in failed; check your username and password.")

        pending = self.registry.consume_login_handle(handle, now)
        if pending is None:  # lost a race with another submission of the same handle
            return _error_response(
                OAuthError("invalid_request", "login session unknown or expired; restart at /authorize")
            )
        authz = flows.AuthorizationRequest.from_query({k: [v] for k, v in pending.params.items()})
        outcome = flows.handle_authorization_request(authz, self.registry, user.subject, now)
        return self._authorize_outcome_response(outcome)

    # -- token endpoint --

    def handle_token(self, request: HttpRequest) -> HttpResponse:
        content_type = request.headers.get("Content-Type", "").split(";")[0].strip().lower()
        if content_type != FORM_CONTENT_TYPE:
            return _error_response(
                OAuthError("invalid_request", f"Content-Type must be {FORM_CONTENT_TYPE}")
            )
        try:
            token_request = parse_token_request(request.body.decode("utf-8"))
        except (InvalidTokenRequest, UnicodeDecodeError) as exc:
            return _error_response(OAuthError("invalid_request", str(exc)))

        now = self.now()
        try:
            if token_request.grant_type == GRANT_AUTHORIZATION_CODE:
                result = flows.redeem_authorization_code(token_request, self.registry, now)
            elif token_request.grant_type == GRANT_IDENTITY_SHARE:
                decision = share_grant.validate_share_grant(
                    token_request, self.registry, self.issuer, now, self.registry.policy.skew
                )
                if decision.accepted:
                    result = share_grant.grant_to_token_response(decision, self.registry, now)
                else:
                    assert decision.error is not None
                    result = decision.error
            elif token_request.grant_type == GRANT_REFRESH:
                result = flows.rotate_refresh_token(token_request, self.registry, now)
            elif not token_request.grant_type:
                result = OAuthError("invalid_request", "grant_type parameter is required")
            else:
                result = OAuthError(
                    "unsupported_grant_type", f"grant_type {token_request.grant_type!r} is not supported"
                )
        except KeyConfigError as exc:
            result = OAuthError("server_error", str(exc))

        if isinstance(result, TokenResponse):
            return HttpResponse.json(
                200, result.to_dict(), {"Cache-Control": "no-store", "Pragma": "no-cache"}
            )
        return _error_response(result)

    # -- introspection --

    def handle_introspect(self, request: HttpRequest) -> HttpResponse:
        credentials = _parse_basic_auth(request.headers)
        if credentials is None or not self.registry.authenticate_introspection_caller(*credentials):
            return _error_response(
                OAuthError("invalid_client", "introspection requires client or resource-server credentials"),
                headers={"WWW-Authenticate": 'Basic realm="introspection"'},
            )
        try:
            form = parse_token_request(request.body.decode("utf-8"))
        except (InvalidTokenRequest, UnicodeDecodeError) as exc:
            return _error_response(OAuthError("invalid_request", str(exc)))
        token = form.extras.get("token", "")

        record = self.registry.lookup_access_token(token) if token else None
        if record is None or not record.active(self.now()):
            return HttpResponse.json(200, {"active": False})
        return HttpResponse.json(
            200,
            {
                "active": True,
                "sub": record.subject,
                "scope": " ".join(sorted(record.scope)),
                "iss": record.issuer,
                "exp": record.expires_at,
                "client_id": record.client_id,
            },
        )

    # -- SCIM-lite read-by-identifier --

    def handle_scim_get(self, request: HttpRequest) -> HttpResponse:
        credentials = _parse_basic_auth(request.headers)
        if credentials is None or not self.registry.authenticate_scim_caller(*credentials):
            return _error_response(
                OAuthError("invalid_client", "SCIM access requires the inter-provider credential"),
                headers={"WWW-Authenticate": 'Basic realm="scim"'},
            )
        from urllib.parse import unquote

        subject = unquote(request.path[len("/scim/Users/"):])
        user = self.registry.user_by_subject(subject)
        if user is None or user.shadow:
            return HttpResponse.json(
                404, OAuthError("invalid_request", f"no such user {subject!r}").to_dict()
            )
        self.scim_requests_served += 1
        return HttpResponse.json(200, user.claims.to_claims())

    # -- key publication --

    def handle_jwks(self) -> HttpResponse:
        return HttpResponse.json(200, {"keys": [rsa_public_jwk(self.registry.signing_key)]})
