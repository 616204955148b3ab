"""Output/input storage behind a small transfer interface.

Two implementations: a local filesystem area and an HTTP area served by
the monitor's /data mount. Every upload records an MD5 sidecar
(<name>.md5) next to the payload; downloads verify against it. The
datastore additionally records output digests for the garbage
collector's post-transfer verification.
"""

from __future__ import annotations

import hashlib
import os
import posixpath
import shutil
import urllib.error
import urllib.request


class IoFailure(Exception):
    pass


class DigestMismatch(Exception):
    pass


def compute_md5(source) -> str:
    """MD5 hex digest of a path or a readable binary stream."""
    h = hashlib.md5()
    if isinstance(source, (str, os.PathLike)):
        try:
            with open(source, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 16), b""):
                    h.update(chunk)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
    else:
        for chunk in iter(lambda: source.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean_rel(rel: str) -> str:
    rel = rel.replace("\\", "/").lstrip("/")
    norm = posixpath.normpath(rel)
    if norm.startswith("..") or norm == "." or "/../" in norm:
        raise IoFailure("unsafe path %r" % rel)
    return norm


SIDECAR_SUFFIX = ".md5"


class LocalStorage:
    """Shared-filesystem area."""

    def __init__(self, base_dir):
        self.base = str(base_dir)
        os.makedirs(self.base, exist_ok=True)

    def _abs(self, rel):
        return os.path.join(self.base, _clean_rel(rel))

    def put(self, local_path, rel) -> dict:
        dst = self._abs(rel)
        os.makedirs(os.path.dirname(dst) or self.base, exist_ok=True)
        try:
            shutil.copyfile(local_path, dst)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        digest = compute_md5(dst)
        with open(dst + SIDECAR_SUFFIX, "w", encoding="ascii") as fh:
            fh.write(digest + "\n")
        return {"path": _clean_rel(rel), "size": os.path.getsize(dst), "md5": digest}

    def get(self, rel, local_path, verify=True):
        src = self._abs(rel)
        try:
            os.makedirs(os.path.dirname(os.path.abspath(local_path)), exist_ok=True)
            shutil.copyfile(src, local_path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if verify:
            expected = self.read_digest(rel)
            if expected is not None:
                actual = compute_md5(local_path)
                if actual != expected:
                    os.unlink(local_path)
                    raise DigestMismatch("%s: got %s, sidecar says %s" % (rel, actual, expected))
        return local_path

    def exists(self, rel) -> bool:
        return os.path.exists(self._abs(rel))

    def delete(self, rel):
        for path in (self._abs(rel), self._abs(rel) + SIDECAR_SUFFIX):
            try:
                os.unlink(path)
            except FileNotFoundError:
                pass

    def read_digest(self, rel):
        try:
            with open(self._abs(rel) + SIDECAR_SUFFIX, encoding="ascii") as fh:
                return fh.read().strip()
        except FileNotFoundError:
            return None

    def md5_of(self, rel) -> str:
        return compute_md5(self._abs(rel))

    def quarantine(self, rel) -> str:
        """Move a suspect artifact (and sidecar) under quarantine/."""
        target = "quarantine/" + _clean_rel(rel)
        dst = self._abs(target)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        os.replace(self._abs(rel), dst)
        side = self._abs(rel) + SIDECAR_SUFFIX
        if os.path.exists(side):
            os.replace(side, dst + SIDECAR_SUFFIX)
        return target


class HttpStorage:
    """Remote area over the monitor's /data mount (PUT/GET/DELETE)."""

    def __init__(self, base_url, timeout=60.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def _url(self, rel):
        return "%s/%s" % (self.base, _clean_rel(rel))

    def _request(self, method, rel, data=None):
        req = urllib.request.Request(self._url(rel), data=data, method=method)
        try:
            return urllib.request.urlopen(req, timeout=self.timeout)
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                raise FileNotFoundError(rel) from exc
            raise IoFailure("%s %s -> http %d" % (method, rel, exc.code)) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise IoFailure(str(exc)) from exc

    def put(self, local_path, rel) -> dict:
        try:
            with open(local_path, "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        digest = hashlib.md5(payload).hexdigest()
        with self._request("PUT", rel, data=payload):
            pass
        with self._request("PUT", rel + SIDECAR_SUFFIX, data=(digest + "\n").encode("ascii")):
            pass
        return {"path": _clean_rel(rel), "size": len(payload), "md5": digest}

    def get(self, rel, local_path, verify=True):
        with self._request("GET", rel) as resp:
            payload = resp.read()
        expected = self.read_digest(rel) if verify else None
        if expected is not None:
            actual = hashlib.md5(payload).hexdigest()
            if actual != expected:
                raise DigestMismatch("%s: got %s, sidecar says %s" % (rel, actual, expected))
        os.makedirs(os.path.dirname(os.path.abspath(local_path)), exist_ok=True)
        with open(local_path, "wb") as fh:
            fh.write(payload)
        return local_path

    def exists(self, rel) -> bool:
        try:
            with self._request("GET", rel):
                return True
        except FileNotFoundError:
            return False

    def delete(self, rel):
        for target in (rel, rel + SIDECAR_SUFFIX):
            try:
                with self._request("DELETE", target):
                    pass
            except FileNotFoundError:
                pass

    def read_digest(self, rel):
        try:
            with self._request("GET", rel + SIDECAR_SUFFIX) as resp:
                return resp.read().decode("ascii").strip()
        except FileNotFoundError:
            return None

    def md5_of(self, rel) -> str:
        with self._request("GET", rel) as resp:
            return compute_md5(resp)

    def quarantine(self, rel) -> str:
        target = "quarantine/" + _clean_rel(rel)
        with self._request("GET", rel) as resp:
            payload = resp.read()
        with self._request("PUT", target, data=payload):
            pass
        side = self.read_digest(rel)
        if side is not None:
            with self._request("PUT", target + SIDECAR_SUFFIX, data=(side + "\n").encode("ascii")):
                pass
        self.delete(rel)
        return target


class FileArea:
    """Server-side /data mount handler for RpcServer."""

    def __init__(self, root, prefix="/data"):
        self.root = str(root)
        self.prefix = prefix.rstrip("/")
        os.makedirs(self.root, exist_ok=True)

    def _abs(self, path):
        rel = path[len(self.prefix):].lstrip("/")
        return os.path.join(self.root, _clean_rel(rel))

    def __call__(self, verb, path, handler):
        try:
            target = self._abs(path.split("?")[0])
        except IoFailure:
            handler._send(400, b'{"error": "bad path"}')
            return
        if verb == "GET":
            if not os.path.isfile(target):
                handler._send(404, b'{"error": "no such file"}')
                return
            with open(target, "rb") as fh:
                payload = fh.read()
            handler._send(200, payload, "application/octet-stream")
        elif verb == "PUT":
            os.makedirs(os.path.dirname(target), exist_ok=True)
            body = handler._body()
            with open(target, "wb") as fh:
                fh.write(body)
            handler._send(200, b'{"stored": true}')
        elif verb == "DELETE":
            try:
                os.unlink(target)
                handler._send(200, b'{"deleted": true}')
            except FileNotFoundError:
                handler._send(404, b'{"error": "no such file"}')
        else:
            handler._send(405, b'{"error": "method not allowed"}')
