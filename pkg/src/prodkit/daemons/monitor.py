"""Monitoring server: receives pilot updates and applies them to the store.

Every handler authenticates the caller's per-job passkey; a stale pilot
whose job was reassigned is rejected before anything changes. For DAG
datasets the monitor also aggregates task completion into job-level
events.
"""

from __future__ import annotations

import logging

from prodkit import dagengine
from prodkit.datastore import Datastore, StaleState, UnknownJob, BadPasskey
from prodkit.lifecycle import Event, IllegalTransition, JobState
from prodkit.rpc import DispatchTable, RpcServer, TlsConfig, serve
from prodkit.storage import FileArea

log = logging.getLogger("prodkit.monitor")


def record_key(dataset_id, job_index, task_name):
    if task_name:
        return (int(dataset_id), int(job_index), task_name)
    return (int(dataset_id), int(job_index))


class MonitorService:
    def __init__(self, store: Datastore, bundles: dict | None = None):
        self.store = store
        self.bundles = dict(bundles or {})

    # -- helpers -----------------------------------------------------------

    def _authenticate(self, key, passkey):
        """Reject stale or forged passkeys before touching any state."""
        if not self.store.validate_passkey(key, passkey):
            raise BadPasskey(str(key))

    def _advance(self, key, events_by_state, passkey=None, **kw):
        """Walk a record along expected arcs until no rule applies."""
        for _ in range(len(events_by_state) + 1):
            record = self.store.get_record(key)
            event = events_by_state.get(record.state)
            if event is None:
                return record.state
            try:
                self.store.update_job_state(key, record.state, event, passkey=passkey, **kw)
            except StaleState:
                continue  # someone else moved it; re-read
        return self.store.get_record(key).state

    def _job_aggregation(self, dataset_id, job_index):
        """After a task settles, derive the job-level event, if any."""
        spec = self.store.get_spec(dataset_id)
        if not spec.task_defs:
            return
        dag = dagengine.build_dag(spec)
        tasks = self.store.list_tasks(dataset_id, job_index)
        states = {t.task_name: t.state for t in tasks}
        if all(states.get(v) == JobState.OK for v in dag.vertices):
            self._advance(
                (dataset_id, job_index),
                {
                    JobState.QUEUEING: Event.SUBMITTED_TO_BACKEND,
                    JobState.QUEUED: Event.PILOT_STARTED,
                    JobState.PROCESSING: Event.WORK_COMPLETED,
                    JobState.COPYING: Event.COPY_COMPLETED,
                },
            )

    # -- handlers ------------------------------------------------------------

    def job_started(self, _principal, dataset_id, job_index, task_name, passkey, host):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        state = self.store.update_job_state(
            key, JobState.QUEUED, Event.PILOT_STARTED, passkey=passkey, host=host
        )
        if len(key) == 3:
            # first running task drags the job row into PROCESSING
            self._advance(
                key[:2],
                {
                    JobState.QUEUEING: Event.SUBMITTED_TO_BACKEND,
                    JobState.QUEUED: Event.PILOT_STARTED,
                },
            )
        log.info("monitor dataset=%s job=%s event=started host=%s", dataset_id, job_index, host)
        return state.value

    def job_status(self, _principal, dataset_id, job_index, task_name, passkey, status):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        if status != "copying":
            self.store.touch(key, passkey=passkey)
            return self.store.get_record(key).state.value
        state = self.store.update_job_state(
            key, JobState.PROCESSING, Event.WORK_COMPLETED, passkey=passkey
        )
        return state.value

    def job_stats(self, _principal, dataset_id, job_index, task_name, passkey, stats):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        self.store.record_stats(key, passkey, dict(stats))
        return len(stats)

    def job_finished(self, _principal, dataset_id, job_index, task_name, passkey, stats, outputs):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        if stats:
            self.store.record_stats(key, passkey, dict(stats))
        if outputs:
            self.store.record_output_files(key, list(outputs))
        state = self._advance(
            key,
            {
                JobState.PROCESSING: Event.WORK_COMPLETED,
                JobState.COPYING: Event.COPY_COMPLETED,
            },
            passkey=passkey,
        )
        if state != JobState.OK:
            raise IllegalTransition(state, Event.COPY_COMPLETED)
        if len(key) == 3:
            self._job_aggregation(key[0], key[1])
        log.info("monitor dataset=%s job=%s event=finished", dataset_id, job_index)
        return state.value

    def job_error(self, _principal, dataset_id, job_index, task_name, passkey, message):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        record = self.store.get_record(key)
        state = self.store.update_job_state(
            key, record.state, Event.ERROR_REPORTED, passkey=passkey, error_message=str(message)
        )
        log.info("monitor dataset=%s job=%s event=error", dataset_id, job_index)
        return state.value

    def keepalive(self, _principal, dataset_id, job_index, task_name, passkey):
        key = record_key(dataset_id, job_index, task_name)
        self._authenticate(key, passkey)
        self.store.touch(key, passkey=passkey)
        return True

    def get_steering(self, _principal, dataset_id, job_index, passkey):
        key = (int(dataset_id), int(job_index))
        try:
            valid = self.store.validate_passkey(key, passkey)
        except UnknownJob:
            valid = False
        if not valid:
            # task pilots authenticate with their task key
            tasks = self.store.list_tasks(int(dataset_id), int(job_index))
            valid = any(self.store.validate_passkey(t.key, passkey) for t in tasks)
        if not valid:
            raise BadPasskey("get_steering")
        xml, job_count = self.store.get_steering_document(int(dataset_id))
        return {"xml": xml, "job_count": job_count}

    def get_platform_bundle_url(self, _principal, metaproject, platform):
        hit = self.bundles.get((metaproject, platform)) or self.bundles.get(
            (metaproject, "generic")
        )
        if hit is None:
            return None
        url, md5 = hit
        return {"url": url, "md5": md5}

    # -- wiring ---------------------------------------------------------------

    def dispatch_table(self) -> DispatchTable:
        table = DispatchTable()
        table.register("job_started", self.job_started)
        table.register("job_status", self.job_status)
        table.register("job_stats", self.job_stats)
        table.register("job_finished", self.job_finished)
        table.register("job_error", self.job_error)
        table.register("keepalive", self.keepalive)
        table.register("get_steering", self.get_steering)
        table.register("get_platform_bundle_url", self.get_platform_bundle_url)
        return table

    def start(self, host, port, data_dir=None, tls: TlsConfig | None = None) -> RpcServer:
        server = serve((host, port), self.dispatch_table(), tls=tls)
        if data_dir:
            server.mount("/data", FileArea(data_dir))
        return server
