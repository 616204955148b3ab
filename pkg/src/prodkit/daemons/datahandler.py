"""Data handling and garbage collection.

One cycle verifies freshly finished jobs against their recorded output
digests (corruption quarantines the artifact and flips the job to ERROR
for the retry policy), decides retry budgets for everything in ERROR,
applies state timeouts, recovers cleanup work whose owner died, and
scrubs scratch leftovers. Post-processing hooks run once per verified
job.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import threading
import time
from dataclasses import dataclass, field

from prodkit.datastore import Datastore, StaleState
from prodkit.lifecycle import (
    Event,
    IllegalTransition,
    JobRecord,
    JobState,
    TIMEOUT_RESETTABLE,
    TimeoutPolicy,
    check_timeouts,
    grant_or_exhaust,
)

log = logging.getLogger("prodkit.datahandler")

_SCRATCH_RE = re.compile(r"prodkit_(\d+)_(\d+)(?:_(.+))?$")


@dataclass
class GcReport:
    verified: int = 0
    corrupted: list = field(default_factory=list)
    failed_swept: int = 0
    retries_granted: int = 0
    retries_exhausted: int = 0
    task_failures_escalated: int = 0
    timeouts_applied: int = 0
    cleanup_recovered: int = 0
    scratch_removed: int = 0


class DataHandlerDaemon:
    def __init__(
        self,
        store: Datastore,
        storage=None,
        policy: TimeoutPolicy | None = None,
        scratch_dirs=(),
        hooks=(),
        poll_interval_s: float = 5.0,
    ):
        self.store = store
        self.storage = storage
        self.policy = policy or TimeoutPolicy()
        self.scratch_dirs = [str(d) for d in scratch_dirs]
        self.hooks = list(hooks)
        self.poll_interval_s = poll_interval_s
        self._stop = threading.Event()
        self._thread = None

    # -- cycle ---------------------------------------------------------------

    def cycle(self) -> GcReport:
        report = GcReport()
        self._verify_finished(report)
        self._decide_retries(report)
        self._apply_timeouts(report)
        self._recover_cleanup(report)
        self._sweep_scratch(report)
        return report

    def _verify_finished(self, report):
        """Fresh OK jobs: digests must match what the pilots reported."""
        for job in self.store.unverified_ok_jobs():
            outputs = self.store.list_output_files(job.dataset_id, job.job_index)
            corrupted = None
            if self.storage is not None:
                for entry in outputs:
                    recorded = entry.get("md5")
                    if not recorded:
                        continue
                    try:
                        actual = self.storage.md5_of(entry["path"])
                    except Exception as exc:
                        corrupted = (entry["path"], "unreadable: %s" % exc)
                        break
                    if actual != recorded:
                        corrupted = (entry["path"], "digest %s != recorded %s" % (actual, recorded))
                        break
            if corrupted is not None:
                path, why = corrupted
                quarantined = None
                try:
                    quarantined = self.storage.quarantine(path)
                except Exception:
                    log.exception("quarantine of %s failed", path)
                try:
                    self.store.integrity_flip(
                        job.key, "output %s failed verification: %s" % (path, why)
                    )
                except StaleState:
                    continue
                report.corrupted.append(job.key)
                log.warning(
                    "datahandler dataset=%d job=%d event=corrupt output=%s quarantined=%s",
                    job.dataset_id, job.job_index, path, quarantined,
                )
                self.store.bump_site_counters(job.dataset_id, job.site or "unknown", errors=1)
                continue
            self.store.set_verified(job.key, True)
            self._remove_scratch_for(job, None)
            for hook in self.hooks:
                try:
                    hook(job, outputs)
                except Exception:
                    log.exception("post-processing hook failed for %s", (job.key,))
            report.verified += 1
            if job.site:
                self.store.bump_site_counters(job.dataset_id, job.site, finished=1)

    def _decide_retries(self, report):
        for record in self.store.records_in_state(JobState.ERROR):
            event = grant_or_exhaust(record, self.policy)
            try:
                new_state = self.store.update_job_state(record.key, JobState.ERROR, event)
            except (StaleState, IllegalTransition):
                continue
            if event is Event.RETRY_GRANTED:
                report.retries_granted += 1
            else:
                report.retries_exhausted += 1
                self._remove_scratch_for(record, None)  # scratch goes, logs stay
                log.warning(
                    "datahandler dataset=%d job=%d event=retries-exhausted",
                    record.dataset_id, record.job_index,
                )
                if isinstance(record, JobRecord):
                    continue
                # a task out of retries dooms its job
                job_key = (record.dataset_id, record.job_index)
                job = self.store.get_record(job_key)
                if job.state not in (JobState.ERROR, JobState.FAILED, JobState.OK):
                    try:
                        self.store.update_job_state(
                            job_key, job.state, Event.ERROR_REPORTED,
                            error_message="task %s failed permanently" % record.task_name,
                        )
                        report.task_failures_escalated += 1
                    except (StaleState, IllegalTransition):
                        pass

    def _apply_timeouts(self, report):
        workflows = {d["dataset_id"]: d["workflow"] for d in self.store.list_datasets()}
        records = [
            r
            for r in self.store.all_live_records()
            # dag job rows are aggregates; their tasks carry the liveness
            if not (isinstance(r, JobRecord) and workflows.get(r.dataset_id) == "dag")
        ]
        now = time.time()
        for record, event in check_timeouts(records, self.policy, now):
            if record.state not in TIMEOUT_RESETTABLE:
                continue  # WAITING/SUSPENDED wait for capacity or operators
            try:
                self.store.update_job_state(record.key, record.state, event)
                report.timeouts_applied += 1
                log.info(
                    "datahandler dataset=%d job=%d event=timeout state=%s",
                    record.dataset_id, record.job_index, record.state.value,
                )
            except (StaleState, IllegalTransition):
                pass

    def _recover_cleanup(self, report):
        """RESET/CLEANING whose owning site daemon went away."""
        now = time.time()
        for state, event in (
            (JobState.RESET, Event.CLEANUP_STARTED),
            (JobState.CLEANING, Event.CLEANUP_DONE),
        ):
            for record in self.store.records_in_state(state):
                age = now - record.state_entered
                if age <= self.policy.timeout_for(state):
                    continue
                try:
                    self.store.update_job_state(record.key, state, event)
                    report.cleanup_recovered += 1
                except (StaleState, IllegalTransition):
                    pass

    def _sweep_scratch(self, report):
        """Scratch left by dead pilots whose record is settled or re-queued."""
        settled = (JobState.OK, JobState.FAILED, JobState.WAITING, JobState.SUSPENDED)
        for base in self.scratch_dirs:
            if not os.path.isdir(base):
                continue
            for entry in os.listdir(base):
                m = _SCRATCH_RE.match(entry)
                if not m:
                    continue
                dataset_id, job_index, task = int(m.group(1)), int(m.group(2)), m.group(3)
                key = (dataset_id, job_index, task) if task else (dataset_id, job_index)
                try:
                    record = self.store.get_record(key)
                except Exception:
                    record = None
                if record is None or record.state in settled:
                    shutil.rmtree(os.path.join(base, entry), ignore_errors=True)
                    report.scratch_removed += 1

    def _remove_scratch_for(self, record, task):
        stem = "prodkit_%d_%d" % (record.dataset_id, record.job_index)
        if getattr(record, "task_name", None):
            stem += "_%s" % record.task_name
        for base in self.scratch_dirs:
            path = os.path.join(base, stem)
            if os.path.isdir(path):
                shutil.rmtree(path, ignore_errors=True)

    # -- loop ------------------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True, name="datahandler")
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            try:
                self.cycle()
            except Exception:
                log.exception("datahandler cycle failed")
            self._stop.wait(self.poll_interval_s)

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=10)
