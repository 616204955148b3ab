"""Minimal HTTP client for the RPC protocol. Stdlib only: the pilot
imports this on every worker and must start fast."""

from __future__ import annotations

import json
import ssl
import urllib.error
import urllib.request
from base64 import b64encode

from prodkit.rpc import envelope
from prodkit.rpc.envelope import RpcFault


class TransportError(Exception):
    pass


class RpcClient:
    def __init__(
        self,
        url: str,
        user: str | None = None,
        secret: str | None = None,
        timeout: float = 30.0,
        content_type: str = envelope.XML_CONTENT_TYPE,
        cafile: str | None = None,
        insecure: bool = False,
    ):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.content_type = content_type
        self._auth = None
        if user is not None:
            token = b64encode(("%s:%s" % (user, secret or "")).encode("utf-8")).decode("ascii")
            self._auth = "Basic " + token
        self._ssl_ctx = None
        if self.url.startswith("https"):
            if insecure:
                self._ssl_ctx = ssl._create_unverified_context()
            else:
                self._ssl_ctx = ssl.create_default_context(cafile=cafile)

    def call(self, method: str, *params):
        body = envelope.encode_request(method, params, self.content_type)
        req = urllib.request.Request(
            self.url + "/rpc", data=body, headers={"Content-Type": self.content_type}
        )
        if self._auth:
            req.add_header("Authorization", self._auth)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout, context=self._ssl_ctx) as resp:
                content_type = (resp.headers.get("Content-Type") or self.content_type).split(";")[0]
                return envelope.decode_response(resp.read(), content_type)
        except RpcFault:
            raise
        except urllib.error.HTTPError as exc:
            raise TransportError("http %d from %s" % (exc.code, self.url)) from exc
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(str(exc)) from exc

    def ping(self) -> dict:
        req = urllib.request.Request(self.url + "/ping")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout, context=self._ssl_ctx) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc
