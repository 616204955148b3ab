"""Threaded HTTP server carrying the RPC protocol.

POST /rpc dispatches to registered methods; GET /ping reports the
protocol version. Additional path prefixes (file area, web API) can be
mounted. Request parameters are never logged; only method names and
outcomes appear in the log.
"""

from __future__ import annotations

import base64
import json
import logging
import ssl
import threading
import traceback
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from prodkit.auth import AuthFailed, UserCredential, authenticate
from prodkit.rpc import envelope
from prodkit.rpc.envelope import (
    FAULT_AUTH,
    FAULT_DECODE,
    FAULT_INTERNAL,
    FAULT_METHOD,
    FAULT_STALE,
    FAULT_VALIDATION,
    RpcFault,
)

log = logging.getLogger("prodkit.rpc")

PROTOCOL_VERSION = 1

#: spec'd method vocabulary; serve() refuses to register anything else
METHOD_NAMES = frozenset(
    {
        "submit_dataset",
        "control_dataset",
        "control_job",
        "enqueue_unmonitored",
        "job_started",
        "job_status",
        "job_stats",
        "job_finished",
        "job_error",
        "keepalive",
        "get_steering",
        "get_platform_bundle_url",
        "server_admin",
    }
)

_FAULT_BY_EXCEPTION = {
    "AuthFailed": FAULT_AUTH,
    "BadPasskey": FAULT_AUTH,
    "MethodNotFound": FAULT_METHOD,
    "UnknownJob": FAULT_METHOD,
    "UnknownDataset": FAULT_METHOD,
    "StaleState": FAULT_STALE,
    "IllegalTransition": FAULT_STALE,
    "AliasCollision": FAULT_STALE,
    "ValidationFailed": FAULT_VALIDATION,
    "SchemaViolation": FAULT_VALIDATION,
    "MalformedXml": FAULT_VALIDATION,
    "NonFiniteValue": FAULT_VALIDATION,
    "DuplicatePath": FAULT_VALIDATION,
    "DatasetNotGrowable": FAULT_VALIDATION,
    "UnknownFilter": FAULT_VALIDATION,
    "EmptyList": FAULT_VALIDATION,
    "DslError": FAULT_VALIDATION,
}


class BindFailure(Exception):
    pass


class MethodNotFound(Exception):
    pass


def fault_code_for(exc: Exception) -> int:
    for klass in type(exc).__mro__:
        code = _FAULT_BY_EXCEPTION.get(klass.__name__)
        if code is not None:
            return code
    return FAULT_INTERNAL


@dataclass
class TlsConfig:
    certfile: str
    keyfile: str


class DispatchTable:
    """method name -> (callable(principal, *params), requires_auth).

    The server itself accepts any name; the production daemons register
    only METHOD_NAMES (checked by their tests).
    """

    def __init__(self):
        self._methods = {}

    def register(self, name, fn, requires_auth=False):
        self._methods[name] = (fn, requires_auth)

    def lookup(self, name):
        try:
            return self._methods[name]
        except KeyError:
            raise MethodNotFound(name) from None

    def names(self):
        return sorted(self._methods)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "prodkit"

    def log_message(self, fmt, *args):  # route through our logger, no params
        log.debug("http %s", fmt % args)

    # -- helpers ---------------------------------------------------------

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status, payload: bytes, content_type="application/json", extra=None):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        for k, v in (extra or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(payload)

    def _principal(self):
        header = self.headers.get("Authorization")
        if not header:
            return None
        if not header.startswith("Basic "):
            raise AuthFailed("unsupported authorization scheme")
        store = self.server.credential_store
        if store is None:
            raise AuthFailed("server accepts no user credentials")
        try:
            decoded = base64.b64decode(header[6:]).decode("utf-8")
            username, _, secret = decoded.partition(":")
        except Exception:
            raise AuthFailed("malformed authorization header") from None
        return authenticate(UserCredential(username, secret), store)

    # -- verbs -----------------------------------------------------------

    def do_GET(self):
        if self.path == "/ping":
            doc = {"protocol": PROTOCOL_VERSION, "server": "prodkit"}
            self._send(200, json.dumps(doc).encode("utf-8"))
            return
        route = self.server.route_for(self.path)
        if route:
            route("GET", self.path, self)
            return
        self._send(404, b'{"error": "not found"}')

    def do_POST(self):
        if self.path == "/rpc":
            self._handle_rpc()
            return
        route = self.server.route_for(self.path)
        if route:
            route("POST", self.path, self)
            return
        self._send(404, b'{"error": "not found"}')

    def do_PUT(self):
        route = self.server.route_for(self.path)
        if route:
            route("PUT", self.path, self)
            return
        self._send(404, b'{"error": "not found"}')

    def do_DELETE(self):
        route = self.server.route_for(self.path)
        if route:
            route("DELETE", self.path, self)
            return
        self._send(404, b'{"error": "not found"}')

    # -- rpc -------------------------------------------------------------

    def _handle_rpc(self):
        content_type = (self.headers.get("Content-Type") or envelope.XML_CONTENT_TYPE).split(";")[0]
        if content_type not in (envelope.XML_CONTENT_TYPE, envelope.JSON_CONTENT_TYPE):
            content_type = envelope.XML_CONTENT_TYPE
        body = self._body()
        method = "?"
        try:
            method, params = envelope.decode_request(body, content_type)
        except envelope.EncodingError as exc:
            self._send_fault(content_type, FAULT_DECODE, "undecodable request: %s" % exc, method)
            return
        try:
            fn, requires_auth = self.server.dispatch.lookup(method)
            principal = self._principal()
            if requires_auth and principal is None:
                raise AuthFailed("method %s requires credentials" % method)
            result = fn(principal, *params)
        except RpcFault as fault:
            self._send_fault(content_type, fault.code, fault.message, method)
            return
        except Exception as exc:  # mapped domain faults; internals stay generic
            code = fault_code_for(exc)
            message = str(exc) if code != FAULT_INTERNAL else "internal error"
            if code == FAULT_INTERNAL:
                log.error("method=%s failed:\n%s", method, traceback.format_exc())
            self._send_fault(content_type, code, message, method)
            return
        log.info("rpc method=%s status=ok", method)
        try:
            payload = envelope.encode_response(result, content_type)
        except Exception:
            log.error("method=%s unencodable result:\n%s", method, traceback.format_exc())
            self._send_fault(content_type, FAULT_INTERNAL, "unencodable result", method)
            return
        self._send(200, payload, content_type)

    def _send_fault(self, content_type, code, message, method):
        log.info("rpc method=%s status=fault code=%d", method, code)
        self._send(200, envelope.encode_fault(code, message, content_type), content_type)


class RpcServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, dispatch: DispatchTable, credential_store=None, tls=None):
        try:
            super().__init__(address, _Handler)
        except OSError as exc:
            raise BindFailure("cannot bind %s: %s" % (address, exc)) from exc
        self.dispatch = dispatch
        self.credential_store = credential_store
        self.tls = tls is not None
        self._routes = {}
        if tls is not None:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(tls.certfile, tls.keyfile)
            self.socket = ctx.wrap_socket(self.socket, server_side=True)
        self._thread = None

    # extra path prefixes (file area, web API)
    def mount(self, prefix: str, handler):
        self._routes[prefix.rstrip("/")] = handler

    def route_for(self, path):
        clean = path.split("?")[0]
        for prefix, handler in self._routes.items():
            if clean == prefix or clean.startswith(prefix + "/"):
                return handler
        return None

    @property
    def url(self):
        scheme = "https" if self.tls else "http"
        host, port = self.server_address[:2]
        if host == "0.0.0.0":
            host = "127.0.0.1"
        return "%s://%s:%d" % (scheme, host, port)

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def serve(endpoint, dispatch: DispatchTable, credential_store=None, tls=None) -> RpcServer:
    """Start serving on (host, port); returns the running server handle."""
    return RpcServer(endpoint, dispatch, credential_store=credential_store, tls=tls).start()
