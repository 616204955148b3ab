"""Submission front-end: authenticated client requests.

Monitored submissions land in the datastore; unmonitored ones bypass it
entirely and go straight to the configured local plugin. External
modules referenced by a spec are fetched and cached here, at submission
time, so pilots never talk to code repositories.
"""

from __future__ import annotations

import logging
import os

from prodkit.datastore import Datastore
from prodkit.daemons.config import ServerConfig
from prodkit.daemons.materialize import materialize
from prodkit.daemons.webapi import WebApi
from prodkit.gridplugins import create as create_plugin
from prodkit.rpc import DispatchTable, RpcFault, RpcServer, TlsConfig, serve
from prodkit.steering import parse_steering
from prodkit.taskmodules import fetch_external

log = logging.getLogger("prodkit.submit")


class SubmitService:
    def __init__(
        self,
        store: Datastore,
        config: ServerConfig,
        credential_store=None,
        site_registry=None,
        monitor_url=None,
    ):
        self.store = store
        self.config = config
        self.credential_store = credential_store
        self.site_registry = site_registry  # site_id -> QueueDaemon (runtime control)
        self.monitor_url = monitor_url
        self._unmonitored_plugin = None
        self._unmonitored_site = None

    # -- dataset submission --------------------------------------------------

    def _prefetch_external_modules(self, spec):
        cache = self.config.module_cache_dir
        for tray in spec.trays:
            for module in tray.modules:
                if module.class_name != "external":
                    continue
                params = {p.name: p.value for p in module.parameters}
                if "class" in params and "URL" in params:
                    fetch_external(params["class"], params["URL"], cache)

    def submit_dataset(self, principal, steering_xml, mode="monitored"):
        spec = parse_steering(steering_xml)
        if mode == "unmonitored":
            return self._submit_unmonitored(spec, steering_xml)
        self._prefetch_external_modules(spec)
        dataset_id = self.store.create_dataset(spec, principal.username)
        log.info(
            "submit dataset=%d jobs=%d by=%s",
            dataset_id,
            spec.dataset_meta.job_count,
            principal.username,
        )
        return dataset_id

    def enqueue_unmonitored(self, principal, steering_xml, job_indices=None):
        spec = parse_steering(steering_xml)
        return self._submit_unmonitored(spec, steering_xml, job_indices)

    def _unmonitored(self):
        if self._unmonitored_plugin is None:
            site_id = self.config.unmonitored_site
            site = next((s for s in self.config.sites if s.site_id == site_id), None)
            if site is None:
                raise RpcFault(422, "server has no unmonitored submission site configured")
            self._unmonitored_site = site
            self._unmonitored_plugin = create_plugin(site.plugin_name, site)
        return self._unmonitored_site, self._unmonitored_plugin

    def _submit_unmonitored(self, spec, steering_xml, job_indices=None):
        """No dataset row, no tracking: materialize and hand to the backend."""
        from prodkit.auth import new_passkey_token

        site, plugin = self._unmonitored()
        indices = list(job_indices or range(max(spec.dataset_meta.job_count, 1)))
        handles = []
        for idx in indices:
            job = materialize(
                spec,
                steering_xml,
                dataset_id=0,
                job_index=int(idx),
                task_name=None,
                passkey=new_passkey_token(),
                site=site,
                monitor_url=None,  # unmonitored: pilots stay silent
                module_cache_dir=self.config.module_cache_dir,
            )
            out_dir = os.path.join(site.submit_dir, "unmonitored")
            artifacts = plugin.write_config(job, out_dir)
            handles.append(plugin.submit(artifacts))
        log.info("submit unmonitored jobs=%d site=%s", len(handles), site.site_id)
        return handles

    # -- control and queries ---------------------------------------------------

    def control_dataset(self, principal, dataset_id, action):
        result = self.store.control_dataset(int(dataset_id), action)
        log.info("control dataset=%s action=%s by=%s", dataset_id, action, principal.username)
        return result

    def control_job(self, principal, dataset_id, job_index, action, task_name=None):
        key = (int(dataset_id), int(job_index))
        if task_name:
            key = key + (task_name,)
        if action == "suspend":
            state = self.store.suspend(key)
        elif action == "resume":
            state = self.store.resume(key)
        elif action == "reset":
            state = self.store.force_reset(key)
        else:
            raise RpcFault(422, "unknown job action %r" % action)
        log.info(
            "control dataset=%s job=%s action=%s by=%s",
            dataset_id, job_index, action, principal.username,
        )
        return state.value

    def job_status(self, principal, view, filters=None):
        """Read side for clients: named view over the datastore."""
        return self.store.query_view(view, dict(filters or {}))

    def job_stats(self, principal, dataset_id):
        agg = self.store.aggregate_stats(int(dataset_id))
        return {
            name: {"count": a.count, "sum": a.sum, "average": a.average, "stddev": a.stddev}
            for name, a in agg.items()
        }

    def get_steering(self, principal, dataset_id):
        xml, _count = self.store.get_steering_document(int(dataset_id))
        return xml

    def server_admin(self, principal, action, *args):
        if action == "whoami":
            return principal.username
        if action == "site_add":
            dataset_id, site_id = args
            self.store.assign_site(int(dataset_id), site_id)
            return True
        if action == "site_remove":
            dataset_id, site_id = args
            self.store.remove_site(int(dataset_id), site_id)
            return True
        if action in ("site_start", "site_stop"):
            (site_id,) = args
            if self.site_registry is None or site_id not in self.site_registry:
                raise RpcFault(404, "site %r is not managed by this server" % site_id)
            daemon = self.site_registry[site_id]
            if action == "site_start":
                daemon.resume()
            else:
                daemon.pause()
            return True
        if action == "grow_dataset":
            dataset_id, manifest, group_size = args
            from prodkit.datastore import FileEntry

            entries = [
                FileEntry(
                    path=e["path"],
                    size=int(e.get("size", 0)),
                    run_number=e.get("run_number"),
                    date=e.get("date"),
                    md5=e.get("md5"),
                )
                for e in manifest
            ]
            keys = self.store.grow_dataset(int(dataset_id), entries, group_size=int(group_size))
            return [list(k) for k in keys]
        if action == "list_sites":
            if self.site_registry is None:
                return []
            return [
                {"site_id": site_id, "running": daemon.running}
                for site_id, daemon in sorted(self.site_registry.items())
            ]
        raise RpcFault(422, "unknown admin action %r" % action)

    # -- wiring -----------------------------------------------------------------

    def dispatch_table(self) -> DispatchTable:
        table = DispatchTable()
        table.register("submit_dataset", self.submit_dataset, requires_auth=True)
        table.register("enqueue_unmonitored", self.enqueue_unmonitored, requires_auth=True)
        table.register("control_dataset", self.control_dataset, requires_auth=True)
        table.register("control_job", self.control_job, requires_auth=True)
        table.register("job_status", self.job_status, requires_auth=True)
        table.register("job_stats", self.job_stats, requires_auth=True)
        table.register("get_steering", self.get_steering, requires_auth=True)
        table.register("server_admin", self.server_admin, requires_auth=True)
        return table

    def start(self, host, port, tls: TlsConfig | None = None) -> RpcServer:
        server = serve(
            (host, port), self.dispatch_table(), credential_store=self.credential_store, tls=tls
        )
        server.mount("/api", WebApi(self, session_ttl=self.config.session_ttl_s))
        return server
