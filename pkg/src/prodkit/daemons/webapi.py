"""HTTP/JSON facade for the monitoring UI.

Thin layer over the same operations the RPC methods expose: reads come
from the datastore's read-only role, control actions go through the
submit service. Session cookies authenticate browsers; every endpoint
except login requires one.
"""

from __future__ import annotations

import json
import logging
import re
import secrets
import time

from prodkit.auth import AuthFailed, Principal, UserCredential, authenticate

log = logging.getLogger("prodkit.webapi")

SESSION_COOKIE = "prodkit_session"

_ROUTES = (
    ("GET", re.compile(r"/api/datasets$")),
    ("GET", re.compile(r"/api/datasets/(?P<dataset>\d+)/jobs$")),
    ("GET", re.compile(r"/api/datasets/(?P<dataset>\d+)/stats$")),
    ("GET", re.compile(r"/api/datasets/(?P<dataset>\d+)/runs$")),
    ("GET", re.compile(r"/api/jobs/(?P<dataset>\d+)\.(?P<job>\d+)$")),
    ("GET", re.compile(r"/api/whoami$")),
    ("POST", re.compile(r"/api/login$")),
    ("POST", re.compile(r"/api/control$")),
)


class WebApi:
    def __init__(self, service, session_ttl=4 * 3600.0):
        self.service = service
        self.reads = service.store.read_only()
        self.session_ttl = session_ttl
        self._sessions = {}

    # -- session handling -----------------------------------------------

    def _session_user(self, handler):
        cookies = handler.headers.get("Cookie") or ""
        for part in cookies.split(";"):
            name, _, value = part.strip().partition("=")
            if name == SESSION_COOKIE:
                entry = self._sessions.get(value)
                if entry and entry[1] > time.time():
                    return entry[0]
        return None

    def _login(self, handler, body):
        if self.service.credential_store is None:
            return self._json(handler, 503, {"error": "no credential store configured"})
        try:
            doc = json.loads(body.decode("utf-8"))
            cred = UserCredential(str(doc["username"]), str(doc["secret"]))
        except (ValueError, KeyError, UnicodeDecodeError):
            return self._json(handler, 400, {"error": "bad login document"})
        try:
            principal = authenticate(cred, self.service.credential_store)
        except AuthFailed:
            return self._json(handler, 401, {"error": "authentication failed"})
        token = secrets.token_hex(16)
        self._sessions[token] = (principal.username, time.time() + self.session_ttl)
        self._json(
            handler,
            200,
            {"username": principal.username},
            extra={
                "Set-Cookie": "%s=%s; Path=/api; HttpOnly; SameSite=Strict" % (SESSION_COOKIE, token)
            },
        )

    @staticmethod
    def _json(handler, status, doc, extra=None):
        handler._send(status, json.dumps(doc).encode("utf-8"), "application/json", extra)

    # -- dispatch -----------------------------------------------------------

    def __call__(self, verb, path, handler):
        clean = path.split("?")[0].rstrip("/") or path
        body = handler._body() if verb in ("POST", "PUT") else b""
        if verb == "POST" and clean == "/api/login":
            self._login(handler, body)
            return
        user = self._session_user(handler)
        if user is None:
            self._json(handler, 401, {"error": "login required"})
            return
        try:
            self._dispatch(verb, clean, body, user, handler)
        except Exception as exc:  # surface fault text inline, per the UI contract
            log.warning("webapi %s %s failed: %s", verb, clean, exc)
            self._json(handler, 400, {"error": str(exc)})

    def _dispatch(self, verb, path, body, user, handler):
        principal = Principal(username=user)
        if verb == "GET":
            if path == "/api/datasets":
                return self._json(handler, 200, {"datasets": self.reads.query_view("general", {})})
            if path == "/api/whoami":
                return self._json(handler, 200, {"username": user})
            m = re.match(r"/api/datasets/(\d+)/jobs$", path)
            if m:
                rows = self.reads.query_view("dataset", {"dataset_id": int(m.group(1))})
                return self._json(handler, 200, {"jobs": rows})
            m = re.match(r"/api/datasets/(\d+)/stats$", path)
            if m:
                return self._json(
                    handler, 200, {"stats": self.service.job_stats(principal, int(m.group(1)))}
                )
            m = re.match(r"/api/datasets/(\d+)/runs$", path)
            if m:
                return self._json(handler, 200, {"runs": self.reads.list_runs(int(m.group(1)))})
            m = re.match(r"/api/jobs/(\d+)\.(\d+)$", path)
            if m:
                rows = self.reads.query_view(
                    "job", {"dataset_id": int(m.group(1)), "job_index": int(m.group(2))}
                )
                return self._json(handler, 200, {"job": rows[0] if rows else None})
            return self._json(handler, 404, {"error": "no such endpoint"})
        if verb == "POST" and path == "/api/control":
            doc = json.loads(body.decode("utf-8"))
            scope = doc.get("scope")
            action = doc.get("action")
            if scope == "dataset":
                result = self.service.control_dataset(principal, int(doc["dataset_id"]), action)
            elif scope == "job":
                result = self.service.control_job(
                    principal,
                    int(doc["dataset_id"]),
                    int(doc["job_index"]),
                    action,
                    doc.get("task_name"),
                )
            else:
                return self._json(handler, 400, {"error": "scope must be dataset or job"})
            return self._json(handler, 200, {"result": result})
        return self._json(handler, 404, {"error": "no such endpoint"})
