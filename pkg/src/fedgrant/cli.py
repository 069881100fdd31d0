"""Command-line entry points: serve, demo, mint, inspect, validate."""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import harness, jwt_core, share_grant
from .idp import IdentityProviderService
from .registry import ConfigError, load_config
from .resource import ResourceServerService, load_resource_config
from .tokens import GRANT_IDENTITY_SHARE, TokenRequest


def _config_path(value: str | None) -> Path:
    path = value or os.environ.get("FEDGRANT_CONFIG")
    if not path:
        raise SystemExit("error: pass --config or set FEDGRANT_CONFIG")
    return Path(path)


def cmd_serve(args: argparse.Namespace) -> int:
    path = _config_path(args.config)
    try:
        document = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {path}: {exc}", file=sys.stderr)
        return 1
    kind = document.get("kind", "idp")
    try:
        if kind == "idp":
            registry = load_config(path)
            service: IdentityProviderService | ResourceServerService = IdentityProviderService(
                registry, host=args.host, port=args.port
            )
            label = f"identity provider {registry.issuer}"
        elif kind == "resource_server":
            config = load_resource_config(path)
            if args.host or args.port is not None:
                from dataclasses import replace

                config = replace(config, host=args.host or config.host,
                                 port=config.port if args.port is None else args.port)
            service = ResourceServerService(config)
            label = f"resource server {config.resource_label}"
        else:
            print(f"error: unknown config kind {kind!r}", file=sys.stderr)
            return 1
        service.start()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(f"{label} listening on {service.base_url}", flush=True)
    stop = threading.Event()

    def _shutdown(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        service.stop()
        print("stopped", flush=True)
    return 0


def cmd_demo(args: argparse.Namespace) -> int:
    settings = harness.TopologySettings(sealed=args.sealed, scim=args.scim)
    transcript = harness.run_demo(settings)
    if args.json:
        print(json.dumps(transcript.to_json(), indent=2))
    else:
        print(transcript.to_text())
    return 0 if transcript.passed else 1


def cmd_mint(args: argparse.Namespace) -> int:
    try:
        registry = load_config(_config_path(args.config))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    account = registry.user_by_subject(args.subject)
    if account is None:
        print(f"error: no local user with subject {args.subject!r}", file=sys.stderr)
        return 1
    try:
        token = share_grant.issue_identity_share_token(
            subject_data=account.claims,
            issuer=registry.issuer,
            target=args.target,
            registry=registry,
            now=int(time.time()),
            ttl=args.ttl or registry.policy.identity_share_token_ttl,
        )
    except jwt_core.TokenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(token)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        header, claims = jwt_core.peek_jwt(args.token)
    except jwt_core.MalformedToken as exc:
        print(f"error: not a compact JWT: {exc}", file=sys.stderr)
        return 1
    print("header:")
    print(json.dumps(header, indent=2))
    print("claims (NOT verified):")
    sdata = claims.get("sdata")
    if isinstance(sdata, str):
        shown = dict(claims)
        shown["sdata"] = f"<sealed, {len(sdata)} chars; readable only by the receiving provider>"
        print(json.dumps(shown, indent=2))
    else:
        print(json.dumps(claims, indent=2))
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    path = _config_path(args.config)
    try:
        registry = load_config(path)
        document = json.loads(path.read_text())
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    client_id, client_secret = args.client_id, args.client_secret
    if client_id is None:
        clients = document.get("clients", [])
        if not clients:
            print("error: config declares no clients; pass --client-id/--client-secret", file=sys.stderr)
            return 1
        client_id = clients[0]["client_id"]
        client_secret = clients[0]["client_secret"]

    request = TokenRequest(
        grant_type=GRANT_IDENTITY_SHARE,
        shared_token=args.token,
        client_id=client_id,
        client_secret=client_secret,
    )
    decision = share_grant.validate_share_grant(
        request, registry, registry.issuer, int(time.time()), registry.policy.skew
    )
    if decision.accepted:
        print(f"accepted: subject={decision.subject_data.subject} origin={decision.origin_issuer}")
        return 0
    print(f"rejected: {decision.error.error} (stage {decision.stage})")
    print(f"  {decision.error.error_description}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgrant",
        description="Two-domain identity federation testbed: identity providers, "
                    "resource servers, and token utilities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run one identity provider or resource server")
    serve.add_argument("--config", help="config file (or FEDGRANT_CONFIG)")
    serve.add_argument("--host", help="override bind host")
    serve.add_argument("--port", type=int, help="override bind port")
    serve.set_defaults(func=cmd_serve)

    demo = sub.add_parser("demo", help="boot both domains and run the five-step flow")
    demo.add_argument("--sealed", action="store_true", help="seal sdata so the client cannot read it")
    demo.add_argument("--scim", action="store_true", help="enable peer verification callbacks")
    demo.add_argument("--json", action="store_true", help="emit the transcript as JSON")
    demo.set_defaults(func=cmd_demo)

    mint = sub.add_parser("mint", help="mint an identity share token for a local user")
    mint.add_argument("--config", help="identity provider config (or FEDGRANT_CONFIG)")
    mint.add_argument("--subject", required=True, help="subject identifier of a local user")
    mint.add_argument("--target", help="receiving provider's issuer URI (default: all trusted peers)")
    mint.add_argument("--ttl", type=int, help="token lifetime in seconds")
    mint.set_defaults(func=cmd_mint)

    inspect = sub.add_parser("inspect", help="print a token's header and claims without verifying")
    inspect.add_argument("token")
    inspect.set_defaults(func=cmd_inspect)

    validate = sub.add_parser("validate", help="run the grant validation pipeline against a token")
    validate.add_argument("--config", help="identity provider config (or FEDGRANT_CONFIG)")
    validate.add_argument("--client-id", help="client to authenticate as (default: first configured)")
    validate.add_argument("--client-secret")
    validate.add_argument("token")
    validate.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
