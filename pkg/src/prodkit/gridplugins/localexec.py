"""Local process executor: runs pilots as child process groups.

The submission artifact is the same dialect script (directive lines are
shell comments), so one materialization serves both backends.
"""

from __future__ import annotations

import os
import signal
import subprocess
import threading
import time

from prodkit.gridplugins.dialect import DialectPlugin


class LocalExecutorPlugin(DialectPlugin):
    name = "local"

    def __init__(self, site_config=None):
        super().__init__(site_config)
        self._procs = {}
        self._counter = 0
        self._lock = threading.Lock()

    def submit(self, artifacts) -> str:
        from prodkit.gridplugins import SubmitFailure

        if not artifacts or artifacts[0] not in self._written:
            raise SubmitFailure("submit requires artifacts from a prior write_config")
        script = artifacts[0]
        log_path = script + ".log"
        try:
            with open(log_path, "ab") as logfh:
                proc = subprocess.Popen(
                    ["/bin/sh", script],
                    stdout=logfh,
                    stderr=subprocess.STDOUT,
                    start_new_session=True,
                    cwd=os.path.dirname(script),
                )
        except OSError as exc:
            raise SubmitFailure(str(exc)) from exc
        with self._lock:
            self._counter += 1
            handle = "local-%d-%d" % (self._counter, proc.pid)
            self._procs[handle] = proc
        return handle

    def check_job_status(self, handles) -> dict:
        from prodkit.gridplugins import FINISHED, RUNNING, VANISHED

        out = {}
        with self._lock:
            for handle in handles:
                proc = self._procs.get(handle)
                if proc is None:
                    out[handle] = VANISHED
                elif proc.poll() is None:
                    out[handle] = RUNNING
                else:
                    out[handle] = FINISHED
        return out

    def remove(self, handle):
        with self._lock:
            proc = self._procs.get(handle)
        if proc is None or proc.poll() is not None:
            return
        try:
            os.killpg(proc.pid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            return
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                return
            time.sleep(0.05)
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        proc.wait(timeout=5)

    def clean_queue(self, expected) -> list:
        expected = set(expected)
        with self._lock:
            orphans = [h for h in self._procs if h not in expected]
        removed = []
        for handle in orphans:
            self.remove(handle)
            with self._lock:
                self._procs.pop(handle, None)
            removed.append(handle)
        return removed

    def stop(self):
        self.clean_queue(set())
