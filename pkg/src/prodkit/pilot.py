"""Worker-side job execution.

A pilot lands on a compute node with nothing but its identity and a
passkey. It reports in, fetches steering and platform-matched software,
specializes expressions for its job index, runs the assigned trays'
modules, ships outputs with digests, and scrubs its scratch directory on
every exit path.

Deliberately free of server-side imports (no SQL, no daemons): startup
cost is paid on every worker.
"""

from __future__ import annotations

import argparse
import json
import os
import platform as platform_mod
import shutil
import socket
import sys
import tarfile
import tempfile
import threading
import time
import urllib.request
from dataclasses import dataclass, field

from prodkit import dsl
from prodkit.rpc import JSON_CONTENT_TYPE, RpcClient, RpcFault, TransportError
from prodkit.steering import parse_steering
from prodkit.storage import DigestMismatch, HttpStorage, LocalStorage, compute_md5
from prodkit.taskmodules import ModuleContext, coerce_param, execute, resolve_class

__all__ = [
    "PilotContext",
    "compute_md5",
    "detect_platform",
    "fetch_software",
    "main",
    "run",
]


class FetchFailure(Exception):
    pass


_OS_NAMES = {"linux": "linux", "darwin": "darwin", "windows": "windows", "freebsd": "freebsd"}
_ARCH_NAMES = {
    "x86_64": "x86_64",
    "amd64": "x86_64",
    "x64": "x86_64",
    "arm64": "aarch64",
    "aarch64": "aarch64",
    "i386": "i686",
    "i686": "i686",
}


def detect_platform(system=None, machine=None) -> str:
    """Normalized `<os>-<arch>`; anything unrecognized becomes generic."""
    system = (system if system is not None else platform_mod.system()).lower()
    machine = (machine if machine is not None else platform_mod.machine()).lower()
    os_name = _OS_NAMES.get(system)
    if os_name is None:
        return "generic"
    return "%s-%s" % (os_name, _ARCH_NAMES.get(machine, machine or "unknown"))


def _default_fetcher(url: str) -> bytes:
    try:
        if url.startswith("file://"):
            with open(url[len("file://"):], "rb") as fh:
                return fh.read()
        with urllib.request.urlopen(url, timeout=300) as resp:
            return resp.read()
    except OSError as exc:
        raise FetchFailure("%s: %s" % (url, exc)) from exc


def fetch_software(bundle_url: str, cache_dir: str, expected_md5: str, fetcher=None) -> str:
    """Install (or reuse) a software bundle keyed by its digest.

    The cached archive is re-hashed on every use; a stale or corrupted
    cache entry triggers a fresh download. A downloaded bundle that does
    not match the expected digest is never installed.
    """
    os.makedirs(cache_dir, exist_ok=True)
    archive = os.path.join(cache_dir, expected_md5 + ".bundle")
    target = os.path.join(cache_dir, expected_md5)
    if os.path.exists(archive) and compute_md5(archive) == expected_md5 and os.path.isdir(target):
        return target
    payload = (fetcher or _default_fetcher)(bundle_url)
    import hashlib

    actual = hashlib.md5(payload).hexdigest()
    if actual != expected_md5:
        raise DigestMismatch("bundle %s: got %s, expected %s" % (bundle_url, actual, expected_md5))
    with open(archive + ".tmp", "wb") as fh:
        fh.write(payload)
    os.replace(archive + ".tmp", archive)
    if os.path.isdir(target):
        shutil.rmtree(target)
    staging = target + ".unpack"
    if os.path.isdir(staging):
        shutil.rmtree(staging)
    os.makedirs(staging)
    try:
        with tarfile.open(archive, "r:*") as tar:
            tar.extractall(staging)
    except (tarfile.TarError, OSError) as exc:
        shutil.rmtree(staging, ignore_errors=True)
        raise FetchFailure("bundle %s unreadable: %s" % (bundle_url, exc)) from exc
    os.replace(staging, target)
    return target


@dataclass
class PilotContext:
    dataset_id: int
    job_index: int
    passkey: str
    scratch_dir: str
    task_name: str | None = None
    monitor_url: str | None = None
    cache_dir: str | None = None
    platform: str = field(default_factory=detect_platform)
    config_path: str | None = None
    storage_url: str | None = None
    keepalive_interval: float = 300.0
    report_attempts: int = 3
    report_backoff: float = 1.0

    @property
    def key(self):
        if self.task_name is None:
            return [self.dataset_id, self.job_index, None]
        return [self.dataset_id, self.job_index, self.task_name]


class MonitorChannel:
    """Status reporting with bounded retry; silent in unmonitored mode."""

    def __init__(self, ctx: PilotContext):
        self.ctx = ctx
        self.client = None
        if ctx.monitor_url:
            self.client = RpcClient(ctx.monitor_url, content_type=JSON_CONTENT_TYPE, timeout=30)

    def call(self, method, *params, required=False):
        if self.client is None:
            return None
        last = None
        for attempt in range(self.ctx.report_attempts):
            try:
                return self.client.call(method, *self.ctx.key, self.ctx.passkey, *params)
            except RpcFault as fault:
                if fault.code == 409 and attempt + 1 < self.ctx.report_attempts:
                    last = fault
                    time.sleep(self.ctx.report_backoff * (2**attempt))
                    continue
                raise
            except TransportError as exc:
                last = exc
                time.sleep(self.ctx.report_backoff * (2**attempt))
        if required:
            raise last if last is not None else TransportError("monitor unreachable")
        return None

    def fetch_steering(self):
        if self.client is None:
            raise TransportError("no monitor and no config document")
        doc = self.client.call("get_steering", self.ctx.dataset_id, self.ctx.job_index, self.ctx.passkey)
        return doc["xml"], int(doc["job_count"])

    def bundle_for(self, metaproject: str):
        if self.client is None:
            return None
        return self.client.call("get_platform_bundle_url", metaproject, self.ctx.platform)


def _resolve_params(module, eval_ctx):
    params = {}
    for p in module.parameters:
        if p.type == "liststring":
            value = [dsl.evaluate(item, eval_ctx) for item in p.value]
        else:
            value = dsl.evaluate(p.value, eval_ctx)
        params[p.name] = coerce_param(p.type, value)
    return params


def _make_storage(url):
    if not url:
        return None
    if url.startswith(("http://", "https://")):
        return HttpStorage(url)
    return LocalStorage(url)


def run(ctx: PilotContext) -> int:
    """Execute the assigned task (or whole job). Scratch never survives."""
    channel = MonitorChannel(ctx)
    os.makedirs(ctx.scratch_dir, exist_ok=True)
    stop_keepalive = threading.Event()
    exit_code = 0
    try:
        channel.call("job_started", socket.gethostname(), required=True)

        if ctx.config_path:
            with open(ctx.config_path, encoding="utf-8") as fh:
                doc = json.load(fh)
            xml = doc["steering_xml"]
            nproc = int(doc.get("nproc") or 1)
            if xml is None:
                xml, nproc = channel.fetch_steering()
        else:
            xml, nproc = channel.fetch_steering()
        spec = parse_steering(xml)

        if ctx.task_name is not None:
            matches = [t for t in spec.task_defs if t.name == ctx.task_name]
            if not matches:
                raise RuntimeError("steering defines no task %r" % ctx.task_name)
            tray_names = matches[0].tray_refs
            trays = [spec.tray(name) for name in tray_names]
        else:
            trays = spec.trays

        system = {
            "scratch": ctx.scratch_dir,
            "download": ctx.cache_dir or ctx.scratch_dir,
            "storage": ctx.storage_url or "",
        }
        # software bundles for every metaproject the chosen trays touch
        wanted = []
        for tray in trays:
            for ref in tray.metaproject_refs:
                if ref not in wanted:
                    wanted.append(ref)
        for ref in wanted:
            bundle = channel.bundle_for(ref)
            if bundle:
                path = fetch_software(
                    bundle["url"], ctx.cache_dir or os.path.join(ctx.scratch_dir, "cache"),
                    bundle["md5"],
                )
                system["metaproject_%s" % ref] = path

        mctx = ModuleContext(workdir=ctx.scratch_dir, storage=_make_storage(ctx.storage_url), system=system)
        # fetch_external artifacts are named <class>_<cachekey>.py
        deps = os.environ.get("PRODKIT_DEPS")
        if deps and os.path.isdir(deps):
            for entry in os.listdir(deps):
                if entry.endswith(".py"):
                    class_name = entry[:-3].rsplit("_", 1)[0]
                    mctx.external_modules[class_name] = os.path.join(deps, entry)

        if ctx.keepalive_interval > 0 and channel.client is not None:

            def heartbeat():
                while not stop_keepalive.wait(ctx.keepalive_interval):
                    try:
                        channel.call("keepalive")
                    except (RpcFault, TransportError):
                        pass

            threading.Thread(target=heartbeat, daemon=True).start()

        stats: dict = {}
        for tray in trays:
            for iteration in range(tray.iterations):
                eval_ctx = dsl.job_context(
                    ctx.dataset_id,
                    ctx.job_index,
                    nproc,
                    steering=spec.steering_map(),
                    system=system,
                )
                eval_ctx.args["iteration"] = str(iteration)
                if ctx.task_name is not None:
                    eval_ctx.args["task"] = ctx.task_name
                for module in tray.modules:
                    params = _resolve_params(module, eval_ctx)
                    cls = resolve_class(module.class_name, mctx)
                    outcome = execute(cls, module.name, params, stats, mctx)
                    if not outcome.success:
                        raise RuntimeError(
                            "module %s (%s) failed: %s"
                            % (module.name, module.class_name, outcome.error)
                        )

        channel.call("job_status", "copying")
        if stats:
            channel.call("job_stats", stats)
        channel.call("job_finished", {}, list(mctx.outputs), required=True)
        return 0
    except Exception as exc:  # every failure path still reports and cleans up
        exit_code = 1
        try:
            channel.call("job_error", "%s: %s" % (type(exc).__name__, exc))
        except Exception:
            exit_code = 3
        return exit_code
    finally:
        stop_keepalive.set()
        shutil.rmtree(ctx.scratch_dir, ignore_errors=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="prodkit-pilot", description="job execution pilot")
    parser.add_argument("--dataset", type=int, required=True)
    parser.add_argument("--job", type=int, required=True)
    parser.add_argument("--task", default=None)
    parser.add_argument("--key", required=True)
    parser.add_argument("--monitor", default=None)
    parser.add_argument("--config", default=None)
    args = parser.parse_args(argv)

    scratch_base = os.environ.get("PRODKIT_SCRATCH") or tempfile.gettempdir()
    stem = "prodkit_%d_%d" % (args.dataset, args.job)
    if args.task:
        stem += "_%s" % args.task
    ctx = PilotContext(
        dataset_id=args.dataset,
        job_index=args.job,
        task_name=args.task,
        passkey=args.key,
        monitor_url=args.monitor,
        config_path=args.config,
        scratch_dir=os.path.join(scratch_base, stem),
        cache_dir=os.environ.get("PRODKIT_CACHE"),
        storage_url=os.environ.get("PRODKIT_STORAGE"),
        keepalive_interval=float(os.environ.get("PRODKIT_KEEPALIVE", "300")),
    )
    return run(ctx)


if __name__ == "__main__":
    sys.exit(main())
