"""Scriptable in-memory backend for fault-injection tests.

Simulated pilots run on daemon threads and speak the real monitor
protocol, so chaos runs exercise passkeys, CAS updates, and timeout
recovery end to end without spawning processes. Failure behavior is
driven by queueing options:

    submit_failure_rate   probability submit() raises
    pilot_kill_rate       probability a pilot dies after job_started
    vanish_rate           probability a queued entry disappears
    submit_failure_every  deterministic: every Nth submission fails
    pilot_kill_every      deterministic: every Nth started pilot dies
    pilot_runtime         simulated work seconds (default 0.05)
    start_delay           queue wait before the pilot starts
    fail_first_submit     deterministic single failure, for tests
    seed                  RNG seed
"""

from __future__ import annotations

import json
import os
import random
import threading
import time

from prodkit.gridplugins.dialect import DialectPlugin


class _Entry:
    __slots__ = ("handle", "ours", "submitted", "start_at", "finish_at", "vanished", "removed", "thread")

    def __init__(self, handle, ours, submitted, start_at, finish_at, vanished):
        self.handle = handle
        self.ours = ours
        self.submitted = submitted
        self.start_at = start_at
        self.finish_at = finish_at
        self.vanished = vanished
        self.removed = False
        self.thread = None


class MockPlugin(DialectPlugin):
    name = "mock"

    def __init__(self, site_config=None):
        super().__init__(site_config)
        opts = dict(getattr(site_config, "queueing_options", {}) or {})
        self.submit_failure_rate = float(opts.get("submit_failure_rate", 0.0))
        self.pilot_kill_rate = float(opts.get("pilot_kill_rate", 0.0))
        self.vanish_rate = float(opts.get("vanish_rate", 0.0))
        self.submit_failure_every = int(opts.get("submit_failure_every", 0))
        self.pilot_kill_every = int(opts.get("pilot_kill_every", 0))
        self.pilot_runtime = float(opts.get("pilot_runtime", 0.05))
        self.start_delay = float(opts.get("start_delay", 0.02))
        self.fail_first_submit = str(opts.get("fail_first_submit", "")).lower() in ("1", "true")
        self.rng = random.Random(int(opts.get("seed", 0)))
        self._entries = {}
        self._lock = threading.Lock()
        self._counter = 0
        self._submits = 0
        self._starts = 0
        self._stopping = threading.Event()

    # -- artifacts: dialect artifacts plus a manifest the mock reads back --

    def write_config(self, job, out_dir):
        artifacts = super().write_config(job, out_dir)
        manifest = os.path.join(out_dir, job.stem + ".mock.json")
        with open(manifest, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "dataset_id": job.dataset_id,
                    "job_index": job.job_index,
                    "task_name": job.task_name,
                    "passkey": job.passkey,
                    "monitor_url": job.monitor_url,
                },
                fh,
            )
        return artifacts + [manifest]

    def submit(self, artifacts) -> str:
        from prodkit.gridplugins import FRAMEWORK_TAG, SubmitFailure

        if not artifacts or artifacts[0] not in self._written:
            raise SubmitFailure("submit requires artifacts from a prior write_config")
        with self._lock:
            self._submits += 1
            n = self._submits
        if self.fail_first_submit and n == 1:
            raise SubmitFailure("scripted first-submit failure")
        if self.submit_failure_every and n % self.submit_failure_every == 0:
            raise SubmitFailure("injected submit failure (every %d)" % self.submit_failure_every)
        if self.rng.random() < self.submit_failure_rate:
            raise SubmitFailure("injected submit failure")

        manifest_path = next(a for a in artifacts if a.endswith(".mock.json"))
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        now = time.monotonic()
        vanished = self.rng.random() < self.vanish_rate
        kill = self.rng.random() < self.pilot_kill_rate
        if self.pilot_kill_every:
            with self._lock:
                self._starts += 1
                kill = kill or (self._starts % self.pilot_kill_every == 0)
        with self._lock:
            self._counter += 1
            handle = "%s-mock-%d" % (FRAMEWORK_TAG, self._counter)
            entry = _Entry(
                handle,
                ours=True,
                submitted=now,
                start_at=now + self.start_delay,
                finish_at=now + self.start_delay + self.pilot_runtime,
                vanished=vanished,
            )
            self._entries[handle] = entry
        if not vanished and manifest.get("monitor_url"):
            entry.thread = threading.Thread(
                target=self._pilot, args=(entry, manifest, kill), daemon=True
            )
            entry.thread.start()
        return handle

    def _pilot(self, entry, manifest, kill):
        from prodkit.rpc import JSON_CONTENT_TYPE, RpcClient, RpcFault, TransportError

        client = RpcClient(manifest["monitor_url"], content_type=JSON_CONTENT_TYPE, timeout=10)
        key = [manifest["dataset_id"], manifest["job_index"], manifest["task_name"]]
        passkey = manifest["passkey"]
        self._sleep_until(entry.start_at)
        if self._stopping.is_set() or entry.removed:
            return
        if not self._call(client, "job_started", *key, passkey, "mock-host"):
            return
        if kill:
            return  # died mid-PROCESSING; the state timeout recovers the job
        self._sleep_until(entry.finish_at)
        if self._stopping.is_set() or entry.removed:
            return
        stats = {"events": 100.0, "mock.cpu_s": self.pilot_runtime}
        self._call(client, "job_stats", *key, passkey, stats)
        self._call(client, "job_finished", *key, passkey, {}, [])

    def _sleep_until(self, deadline):
        while not self._stopping.is_set():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            time.sleep(min(remaining, 0.05))

    @staticmethod
    def _call(client, method, *params):
        from prodkit.rpc import RpcFault, TransportError

        for attempt in range(5):
            try:
                client.call(method, *params)
                return True
            except RpcFault as fault:
                if fault.code == 409 and attempt < 4:
                    time.sleep(0.1 * (attempt + 1))
                    continue
                return False
            except TransportError:
                time.sleep(0.1 * (attempt + 1))
        return False

    # -- queue surface -------------------------------------------------------

    def check_job_status(self, handles) -> dict:
        from prodkit.gridplugins import FINISHED, QUEUED, RUNNING, VANISHED

        now = time.monotonic()
        out = {}
        with self._lock:
            for handle in handles:
                entry = self._entries.get(handle)
                if entry is None or entry.removed or entry.vanished:
                    out[handle] = VANISHED
                elif now < entry.start_at:
                    out[handle] = QUEUED
                elif now < entry.finish_at:
                    out[handle] = RUNNING
                else:
                    out[handle] = FINISHED
        return out

    def remove(self, handle):
        with self._lock:
            entry = self._entries.get(handle)
            if entry is not None:
                entry.removed = True

    def clean_queue(self, expected) -> list:
        expected = set(expected)
        removed = []
        with self._lock:
            for handle, entry in list(self._entries.items()):
                if entry.ours and handle not in expected:
                    entry.removed = True
                    del self._entries[handle]
                    removed.append(handle)
        return removed

    def seed_foreign(self, handles):
        """Backend entries some other system owns; CleanQ must not touch them."""
        now = time.monotonic()
        with self._lock:
            for handle in handles:
                self._entries[handle] = _Entry(
                    handle, ours=False, submitted=now, start_at=now, finish_at=now + 3600, vanished=False
                )

    def backend_handles(self):
        with self._lock:
            return sorted(self._entries)

    def stop(self):
        self._stopping.set()
