"""Minimal threaded HTTP plumbing shared by the IdP and resource services.

Thread-per-request keeps concurrent token redemptions genuinely parallel,
and binding port 0 lets the harness boot several instances on ephemeral
ports. Unexpected handler exceptions become a bare server_error document;
stack traces stay in the log, never on the wire.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)


@dataclass
class HttpRequest:
    method: str
    path: str
    query: dict[str, list[str]]
    headers: dict[str, str]
    body: bytes


@dataclass
class HttpResponse:
    status: int
    body: bytes = b""
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)

    @classmethod
    def json(cls, status: int, payload: dict, headers: dict[str, str] | None = None) -> "HttpResponse":
        return cls(status=status, body=json.dumps(payload).encode("utf-8"), headers=headers or {})

    @classmethod
    def html(cls, status: int, markup: str) -> "HttpResponse":
        return cls(status=status, body=markup.encode("utf-8"), content_type="text/html; charset=utf-8")

    @classmethod
    def redirect(cls, location: str) -> "HttpResponse":
        return cls(status=302, body=b"", content_type="text/plain", headers={"Location": location})


class App(Protocol):
    def dispatch(self, request: HttpRequest) -> HttpResponse: ...


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "AppServer"

    def _run(self) -> None:
        split = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        request = HttpRequest(
            method=self.command,
            path=split.path,
            query=parse_qs(split.query, keep_blank_values=True),
            headers={k: v for k, v in self.headers.items()},
            body=body,
        )
        try:
            response = self.server.app.dispatch(request)
        except Exception:
            logger.exception("unhandled error serving %s %s", self.command, split.path)
            response = HttpResponse.json(500, {"error": "server_error"})
        self.send_response(response.status)
        self.send_header("Content-Type", response.content_type)
        self.send_header("Content-Length", str(len(response.body)))
        for name, value in response.headers.items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(response.body)

    do_GET = _run
    do_POST = _run

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        logger.debug("%s %s", self.address_string(), format % args)


class AppServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128  # the stdlib default of 5 drops concurrent bursts

    def __init__(self, address: tuple[str, int], app: App) -> None:
        super().__init__(address, _Handler)
        self.app = app


class HttpService:
    """Owns one AppServer and its serving thread."""

    def __init__(self, host: str, port: int) -> None:
        self._host = host
        self._port = port
        self._server: AppServer | None = None
        self._thread: threading.Thread | None = None

    def dispatch(self, request: HttpRequest) -> HttpResponse:  # overridden by services
        raise NotImplementedError

    def start(self) -> None:
        if self._server is not None:
            return
        self._server = AppServer((self._host, self._port), self)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._server = None
        self._thread = None

    @property
    def port(self) -> int:
        if self._server is None:
            raise RuntimeError("service is not running")
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self._host}:{self.port}"

    def __enter__(self) -> "HttpService":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()
