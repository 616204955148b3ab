"""Task modules: the unit of work a pilot executes inside a tray.

Every module declares a parameter schema and receives resolved values, a
mutable statistics map, and a context confined to the job's working
directory. Execution always contributes `<instance>.cpu_s`; modules add
their own entries on top. Modules exchange data via files only.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tarfile
import time
import urllib.request
from dataclasses import dataclass, field

from prodkit.storage import DigestMismatch, IoFailure

log = logging.getLogger("prodkit.modules")


class ParamValidation(Exception):
    pass


class ModuleFailure(Exception):
    pass


class SchemeRejected(Exception):
    pass


class FetchFailure(Exception):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str = "string"
    required: bool = False
    default: object = None


@dataclass
class Outcome:
    success: bool
    error: str | None = None


@dataclass
class ModuleContext:
    """Execution surroundings for one module run."""

    workdir: str
    storage: object | None = None
    external_modules: dict = field(default_factory=dict)  # class_name -> artifact path
    outputs: list = field(default_factory=list)  # upload manifest entries
    system: dict = field(default_factory=dict)

    def path(self, rel):
        if os.path.isabs(rel):
            return rel
        return os.path.join(self.workdir, rel)


def coerce_param(ptype: str, value):
    """Steering-typed coercion after expression evaluation."""
    try:
        if ptype == "int":
            return int(value)
        if ptype == "float":
            return float(value)
        if ptype == "bool":
            if value in ("true", "1", True):
                return True
            if value in ("false", "0", False):
                return False
            raise ValueError(value)
        if ptype == "liststring":
            if not isinstance(value, list):
                raise ValueError("liststring expects a list")
            return [str(v) for v in value]
        return value
    except (TypeError, ValueError) as exc:
        raise ParamValidation("cannot read %r as %s" % (value, ptype)) from exc


class TaskModule:
    """Base class: subclasses set `name`, `parameters`, and `run`."""

    name = "abstract"
    parameters: tuple = ()

    def run(self, params: dict, stats: dict, ctx: ModuleContext):
        raise NotImplementedError


_PY_TYPES = {"string": str, "int": int, "float": float, "bool": bool, "liststring": list}


def validate_params(module_cls, params: dict) -> dict:
    """Schema check; returns the effective parameter dict with defaults."""
    out = dict(params)
    declared = {p.name: p for p in module_cls.parameters}
    for spec in declared.values():
        if spec.name not in out:
            if spec.required:
                raise ParamValidation(
                    "%s requires parameter %r" % (module_cls.name, spec.name)
                )
            if spec.default is not None:
                out[spec.name] = spec.default
            continue
        expected = _PY_TYPES[spec.type]
        value = out[spec.name]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            out[spec.name] = float(value)
        elif expected is str and isinstance(value, str):
            pass
        elif not isinstance(value, expected) or (expected is not bool and isinstance(value, bool)):
            raise ParamValidation(
                "%s parameter %r expects %s, got %r"
                % (module_cls.name, spec.name, spec.type, value)
            )
    return out


def execute(module_cls, instance_name: str, params: dict, stats: dict, ctx: ModuleContext) -> Outcome:
    """Run one module instance; stats gains `<instance>.cpu_s` either way."""
    effective = validate_params(module_cls, params)
    local_stats: dict = {}
    started = time.process_time()
    try:
        module_cls().run(effective, local_stats, ctx)
        outcome = Outcome(success=True)
    except (ModuleFailure, DigestMismatch, IoFailure, OSError) as exc:
        outcome = Outcome(success=False, error="%s: %s" % (type(exc).__name__, exc))
    finally:
        cpu = time.process_time() - started
        for key, value in local_stats.items():
            if key in stats:
                log.warning("statistic %r overwritten by module %s", key, instance_name)
            stats[key] = value
        stats["%s.cpu_s" % instance_name] = max(cpu, 0.0)
    return outcome


# ---------------------------------------------------------------------------
# built-ins

class Noop(TaskModule):
    name = "noop"

    def run(self, params, stats, ctx):
        pass


class Sleep(TaskModule):
    name = "sleep"
    parameters = (ParamSpec("seconds", "float", required=True),)

    def run(self, params, stats, ctx):
        time.sleep(params["seconds"])
        stats["sleep.seconds"] = params["seconds"]


class Transfer(TaskModule):
    """upload: src (local) -> dst (storage); download: src (storage) -> dst."""

    name = "transfer"
    parameters = (
        ParamSpec("direction", "string", required=True),
        ParamSpec("src", "string", required=True),
        ParamSpec("dst", "string", required=True),
    )

    def run(self, params, stats, ctx):
        if ctx.storage is None:
            raise ModuleFailure("no storage backend configured")
        direction = params["direction"]
        if direction == "upload":
            entry = ctx.storage.put(ctx.path(params["src"]), params["dst"])
            ctx.outputs.append(entry)
            stats["transfer.uploaded_bytes"] = stats.get("transfer.uploaded_bytes", 0.0) + entry["size"]
        elif direction == "download":
            local = ctx.path(params["dst"])
            ctx.storage.get(params["src"], local)  # sidecar-verified
            stats["transfer.downloaded_bytes"] = stats.get(
                "transfer.downloaded_bytes", 0.0
            ) + os.path.getsize(local)
        else:
            raise ParamValidation("direction must be upload or download, got %r" % direction)


class Tarball(TaskModule):
    name = "tarball"
    parameters = (
        ParamSpec("action", "string", required=True),  # pack | unpack
        ParamSpec("src", "string", required=True),
        ParamSpec("dst", "string", required=True),
    )

    def run(self, params, stats, ctx):
        action = params["action"]
        src = ctx.path(params["src"])
        dst = ctx.path(params["dst"])
        if action == "pack":
            os.makedirs(os.path.dirname(dst) or ctx.workdir, exist_ok=True)
            with tarfile.open(dst, "w:gz") as tar:
                tar.add(src, arcname=os.path.basename(src.rstrip("/")))
            stats["tarball.bytes"] = float(os.path.getsize(dst))
        elif action == "unpack":
            os.makedirs(dst, exist_ok=True)
            with tarfile.open(src, "r:*") as tar:
                tar.extractall(dst)
        else:
            raise ParamValidation("action must be pack or unpack, got %r" % action)


class Checksum(TaskModule):
    """Writes an md5 manifest for the given files."""

    name = "checksum"
    parameters = (
        ParamSpec("files", "liststring", required=True),
        ParamSpec("manifest", "string", default="checksums.md5"),
    )

    def run(self, params, stats, ctx):
        lines = []
        for rel in params["files"]:
            digest = hashlib.md5()
            with open(ctx.path(rel), "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 16), b""):
                    digest.update(chunk)
            lines.append("%s  %s" % (digest.hexdigest(), rel))
        with open(ctx.path(params["manifest"]), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        stats["checksum.files"] = float(len(params["files"]))


class FileConcatenate(TaskModule):
    name = "file-concatenate"
    parameters = (
        ParamSpec("inputs", "liststring", required=True),
        ParamSpec("output", "string", required=True),
    )

    def run(self, params, stats, ctx):
        out_path = ctx.path(params["output"])
        os.makedirs(os.path.dirname(out_path) or ctx.workdir, exist_ok=True)
        total = 0
        with open(out_path, "wb") as out:
            for rel in params["inputs"]:
                with open(ctx.path(rel), "rb") as fh:
                    data = fh.read()
                    out.write(data)
                    total += len(data)
        stats["concat.bytes"] = float(total)


class EventCounter(TaskModule):
    """Reads line count as events."""

    name = "event-counter"
    parameters = (ParamSpec("input", "string", required=True),)

    def run(self, params, stats, ctx):
        count = 0
        with open(ctx.path(params["input"]), "rb") as fh:
            for _ in fh:
                count += 1
        stats["events"] = float(count)


class External(TaskModule):
    """Delegates to a retrieved external module; extra params forwarded."""

    name = "external"
    parameters = (
        ParamSpec("class", "string", required=True),
        ParamSpec("URL", "string", required=True),
    )

    def run(self, params, stats, ctx):
        class_name = params["class"]
        artifact = ctx.external_modules.get(class_name)
        if artifact is None:
            raise ModuleFailure("external module %r was not attached to this job" % class_name)
        cls = load_module_class(artifact, class_name)
        forwarded = {k: v for k, v in params.items() if k not in ("class", "URL")}
        effective = validate_params(cls, forwarded)
        cls().run(effective, stats, ctx)


BUILTINS = {
    cls.name: cls
    for cls in (Noop, Sleep, Transfer, Tarball, Checksum, FileConcatenate, EventCounter, External)
}


def resolve_class(class_name: str, ctx: ModuleContext | None = None):
    cls = BUILTINS.get(class_name)
    if cls is not None:
        return cls
    if ctx is not None and class_name in ctx.external_modules:
        return load_module_class(ctx.external_modules[class_name], class_name)
    raise ParamValidation("unknown module class %r" % class_name)


# ---------------------------------------------------------------------------
# external module retrieval (server side, at submission time)

def load_module_class(artifact_path: str, class_name: str):
    """Load a TaskModule subclass from a fetched artifact file."""
    import importlib.util

    spec = importlib.util.spec_from_file_location(
        "prodkit_external_%s" % hashlib.md5(artifact_path.encode()).hexdigest()[:8],
        artifact_path,
    )
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    for attr in vars(mod).values():
        if (
            isinstance(attr, type)
            and issubclass(attr, TaskModule)
            and attr is not TaskModule
            and (getattr(attr, "name", None) == class_name or attr.__name__ == class_name)
        ):
            return attr
    raise ModuleFailure("artifact %s defines no module class %r" % (artifact_path, class_name))


def _default_fetcher(url: str) -> bytes:
    if url.startswith("file://"):
        with open(url[len("file://"):], "rb") as fh:
            return fh.read()
    try:
        with urllib.request.urlopen(url, timeout=60) as resp:
            return resp.read()
    except Exception as exc:
        raise FetchFailure("%s: %s" % (url, exc)) from exc


def fetch_external(class_name: str, url: str, cache_dir: str, pinned_md5: str | None = None, fetcher=None) -> str:
    """Server-side retrieval and caching; pilots never touch the repository.

    Only https (and file, for tests) schemes are accepted. Cached by
    (url, pinned digest); a cache hit performs no fetch.
    """
    scheme = url.split(":", 1)[0].lower()
    if scheme not in ("https", "file"):
        raise SchemeRejected("scheme %r not allowed for external modules" % scheme)
    os.makedirs(cache_dir, exist_ok=True)
    key = hashlib.sha256(("%s|%s" % (url, pinned_md5 or "")).encode("utf-8")).hexdigest()[:24]
    artifact = os.path.join(cache_dir, "%s_%s.py" % (class_name, key))
    if os.path.exists(artifact):
        return artifact
    payload = (fetcher or _default_fetcher)(url)
    if pinned_md5 is not None:
        actual = hashlib.md5(payload).hexdigest()
        if actual != pinned_md5:
            raise DigestMismatch("external module %s: got %s, pinned %s" % (url, actual, pinned_md5))
    tmp = artifact + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, artifact)
    return artifact
