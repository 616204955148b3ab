"""Per-site queue daemon.

Pull model: each cycle reconciles backend state for records this site
owns, tops the local queue up to its configured bound, and sweeps
orphans. Sites never touch records owned by other sites; everything
coordinates through datastore transactions.
"""

from __future__ import annotations

import logging
import os
import shutil
import threading
import time
from dataclasses import dataclass, field

from prodkit.datastore import Datastore, StaleState
from prodkit.daemons.config import SiteConfig
from prodkit.daemons.materialize import materialize, spec_has_external_modules
from prodkit.gridplugins import VANISHED, create as create_plugin
from prodkit.lifecycle import ACTIVE_STATES, Event, IllegalTransition, JobState
from prodkit.steering import serialize_steering
from prodkit.taskmodules import fetch_external

log = logging.getLogger("prodkit.queue")


@dataclass
class CycleReport:
    checked: int = 0
    vanished: int = 0
    stranded: int = 0
    cleaned: int = 0
    claimed: int = 0
    submitted: int = 0
    submit_errors: int = 0
    orphans_removed: list = field(default_factory=list)


class QueueDaemon:
    def __init__(self, site: SiteConfig, store: Datastore, monitor_url=None, plugin=None,
                 module_cache_dir=None):
        self.site = site
        self.store = store
        self.monitor_url = monitor_url
        self.plugin = plugin if plugin is not None else create_plugin(site.plugin_name, site)
        self.module_cache_dir = module_cache_dir
        self._specs = {}
        self._stop = threading.Event()
        self._paused = threading.Event()
        self._thread = None

    # -- spec cache -------------------------------------------------------

    def _spec_for(self, dataset_id):
        if dataset_id not in self._specs:
            spec = self.store.get_spec(dataset_id)
            xml = serialize_steering(spec)
            nproc = spec.dataset_meta.job_count or self.store.job_total(dataset_id)
            self._specs[dataset_id] = (spec, xml, nproc)
        return self._specs[dataset_id]

    # -- cycle ------------------------------------------------------------

    def cycle(self) -> CycleReport:
        report = CycleReport()
        self._reconcile(report)
        self._handle_stranded_tasks(report)
        self._clean_reset_records(report)
        self._fill_queue(report)
        self._sweep_orphans(report)
        return report

    def _reconcile(self, report):
        """Backend says finished/vanished; the datastore must agree."""
        owned = self.store.records_for_site(self.site.site_id)
        with_handles = [r for r in owned if r.grid_id and r.state in ACTIVE_STATES]
        if not with_handles:
            return
        statuses = self.plugin.check_job_status([r.grid_id for r in with_handles])
        report.checked = len(with_handles)
        for record in with_handles:
            status = statuses.get(record.grid_id, VANISHED)
            if status == VANISHED and record.state in (
                JobState.QUEUED,
                JobState.PROCESSING,
                JobState.COPYING,
            ):
                # equivalent to a timeout: reset and let a retry rerun it
                try:
                    self.store.update_job_state(record.key, record.state, Event.TIMEOUT_EXPIRED)
                    report.vanished += 1
                    log.info(
                        "queue site=%s dataset=%d job=%d event=vanished",
                        self.site.site_id, record.dataset_id, record.job_index,
                    )
                except (StaleState, IllegalTransition):
                    pass

    def _handle_stranded_tasks(self, report):
        """Fail fast: a doomed job's running tasks are removed."""
        for task in self.store.stranded_tasks(self.site.site_id):
            if task.grid_id:
                self.plugin.remove(task.grid_id)
            try:
                self.store.force_reset(task.key)
                report.stranded += 1
            except (StaleState, IllegalTransition):
                pass

    def _clean_reset_records(self, report):
        """RESET -> CLEANING -> WAITING for records this site owns."""
        for record in self.store.records_for_site(self.site.site_id):
            if record.state is not JobState.RESET:
                continue
            try:
                self.store.update_job_state(record.key, JobState.RESET, Event.CLEANUP_STARTED)
            except (StaleState, IllegalTransition):
                continue
            if record.grid_id:
                self.plugin.remove(record.grid_id)
            self._remove_scratch(record)
            try:
                self.store.update_job_state(record.key, JobState.CLEANING, Event.CLEANUP_DONE)
                report.cleaned += 1
            except (StaleState, IllegalTransition):
                pass

    def _scratch_dir_for(self, record):
        base = (self.site.system_params or {}).get("scratch_dir")
        if not base:
            return None
        stem = "prodkit_%d_%d" % (record.dataset_id, record.job_index)
        if getattr(record, "task_name", None):
            stem += "_%s" % record.task_name
        return os.path.join(base, stem)

    def _remove_scratch(self, record):
        path = self._scratch_dir_for(record)
        if path and os.path.isdir(path):
            shutil.rmtree(path, ignore_errors=True)

    def _fill_queue(self, report):
        deficit = self.site.max_queued - self.store.active_count_for_site(self.site.site_id)
        if deficit <= 0:
            return
        claims = self.store.claim_jobs(self.site.site_id, self.site.capabilities, deficit)
        report.claimed = len(claims)
        per_dataset = {}
        for record in claims:
            try:
                self._submit_one(record)
                report.submitted += 1
                per_dataset.setdefault(record.dataset_id, [0, 0])[0] += 1
            except Exception as exc:  # one bad submission must not stall the cycle
                report.submit_errors += 1
                per_dataset.setdefault(record.dataset_id, [0, 0])[1] += 1
                log.warning(
                    "queue site=%s dataset=%d job=%d event=submit-error error=%s",
                    self.site.site_id, record.dataset_id, record.job_index, exc,
                )
                try:
                    self.store.update_job_state(
                        record.key, JobState.QUEUEING, Event.ERROR_REPORTED,
                        error_message="submit failed: %s" % exc,
                    )
                except (StaleState, IllegalTransition):
                    pass
        for dataset_id, (ok, bad) in per_dataset.items():
            self.store.bump_site_counters(dataset_id, self.site.site_id, submitted=ok, errors=bad)

    def _submit_one(self, record):
        spec, xml, nproc = self._spec_for(record.dataset_id)
        if self.module_cache_dir and spec_has_external_modules(spec):
            for tray in spec.trays:
                for module in tray.modules:
                    if module.class_name == "external":
                        params = {p.name: p.value for p in module.parameters}
                        fetch_external(params["class"], params["URL"], self.module_cache_dir)
        job = materialize(
            spec,
            xml,
            dataset_id=record.dataset_id,
            job_index=record.job_index,
            task_name=getattr(record, "task_name", None),
            passkey=record.passkey,
            site=self.site,
            monitor_url=self.monitor_url,
            module_cache_dir=self.module_cache_dir,
            job_count=nproc,
        )
        out_dir = os.path.join(self.site.submit_dir, str(record.dataset_id))
        artifacts = self.plugin.write_config(job, out_dir)
        grid_id = self.plugin.submit(artifacts)
        self.store.update_job_state(
            record.key, JobState.QUEUEING, Event.SUBMITTED_TO_BACKEND, grid_id=grid_id
        )
        log.info(
            "queue site=%s dataset=%d job=%d event=submitted grid_id=%s",
            self.site.site_id, record.dataset_id, record.job_index, grid_id,
        )

    def _sweep_orphans(self, report):
        owned = self.store.records_for_site(self.site.site_id)
        expected = {r.grid_id for r in owned if r.grid_id and r.state in ACTIVE_STATES}
        report.orphans_removed = self.plugin.clean_queue(expected)

    # -- loop ---------------------------------------------------------------

    @property
    def running(self):
        return self._thread is not None and self._thread.is_alive() and not self._paused.is_set()

    def pause(self):
        self._paused.set()

    def resume(self):
        self._paused.clear()

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True, name="queue-%s" % self.site.site_id)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            if not self._paused.is_set():
                try:
                    self.cycle()
                except Exception:
                    log.exception("queue site=%s cycle failed", self.site.site_id)
            self._stop.wait(self.site.poll_interval_s)

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=10)
        self.plugin.stop()
