"""Process entry point: run any combination of the four daemons.

One process can host all roles (desk scale) or a single role per
process (production); selection is a flag. Stop is graceful on SIGTERM
and SIGINT.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from prodkit.auth import CredentialStore
from prodkit.datastore import Datastore
from prodkit.daemons.config import ServerConfig, load_config
from prodkit.daemons.datahandler import DataHandlerDaemon
from prodkit.daemons.monitor import MonitorService
from prodkit.daemons.queue import QueueDaemon
from prodkit.daemons.submit import SubmitService
from prodkit.rpc import TlsConfig
from prodkit.storage import HttpStorage, LocalStorage

log = logging.getLogger("prodkit.server")

ROLES = ("submit", "monitor", "queue", "datahandler")


def _storage_backend(config: ServerConfig):
    if config.data_dir:
        return LocalStorage(config.data_dir)
    url = (config.system_params or {}).get("storage")
    if not url:
        return None
    if url.startswith(("http://", "https://")):
        return HttpStorage(url)
    return LocalStorage(url)


class ServerProcess:
    def __init__(self, config: ServerConfig, roles=ROLES, store=None):
        self.config = config
        self.roles = tuple(roles)
        self.store = store or Datastore(config.database_url)
        self.credentials = (
            CredentialStore(config.credential_file) if config.credential_file else None
        )
        self.monitor_server = None
        self.submit_server = None
        self.queue_daemons = {}
        self.datahandler = None
        self._stopped = threading.Event()

    @property
    def monitor_url(self):
        if self.monitor_server is not None:
            return self.monitor_server.url
        scheme = "https" if self.config.monitor_tls else "http"
        return "%s://%s:%d" % (scheme, self.config.host, self.config.monitor_port)

    def _tls(self, enabled):
        if not enabled:
            return None
        if not (self.config.tls_cert and self.config.tls_key):
            raise ValueError("TLS requested but tls_cert/tls_key are not configured")
        return TlsConfig(self.config.tls_cert, self.config.tls_key)

    def start(self):
        if "monitor" in self.roles:
            service = MonitorService(self.store, bundles=self.config.bundles)
            self.monitor_server = service.start(
                self.config.host,
                self.config.monitor_port,
                data_dir=self.config.data_dir,
                tls=self._tls(self.config.monitor_tls),
            )
            log.info("server role=monitor url=%s", self.monitor_server.url)
        if "queue" in self.roles:
            for site in self.config.sites:
                daemon = QueueDaemon(
                    site,
                    self.store,
                    monitor_url=self.monitor_url,
                    module_cache_dir=self.config.module_cache_dir,
                ).start()
                self.queue_daemons[site.site_id] = daemon
                log.info("server role=queue site=%s plugin=%s", site.site_id, site.plugin_name)
        if "datahandler" in self.roles:
            scratch = (self.config.system_params or {}).get("scratch_dir")
            self.datahandler = DataHandlerDaemon(
                self.store,
                storage=_storage_backend(self.config),
                policy=self.config.timeout_policy,
                scratch_dirs=[scratch] if scratch else [],
                poll_interval_s=self.config.datahandler_interval_s,
            ).start()
            log.info("server role=datahandler interval=%.1fs", self.config.datahandler_interval_s)
        if "submit" in self.roles:
            service = SubmitService(
                self.store,
                self.config,
                credential_store=self.credentials,
                site_registry=self.queue_daemons,
                monitor_url=self.monitor_url,
            )
            self.submit_server = service.start(
                self.config.host, self.config.submit_port, tls=self._tls(self.config.submit_tls)
            )
            log.info("server role=submit url=%s", self.submit_server.url)
        return self

    def stop(self):
        if self._stopped.is_set():
            return
        self._stopped.set()
        for daemon in self.queue_daemons.values():
            daemon.stop()
        if self.datahandler:
            self.datahandler.stop()
        if self.submit_server:
            self.submit_server.stop()
        if self.monitor_server:
            self.monitor_server.stop()

    def wait(self):
        self._stopped.wait()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="prodkit-server")
    parser.add_argument("--config", required=True, help="INI configuration file")
    parser.add_argument(
        "--roles",
        default=",".join(ROLES),
        help="comma-separated subset of: %s" % ", ".join(ROLES),
    )
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    roles = tuple(r.strip() for r in args.roles.split(",") if r.strip())
    unknown = set(roles) - set(ROLES)
    if unknown:
        parser.error("unknown roles: %s" % ", ".join(sorted(unknown)))

    process = ServerProcess(load_config(args.config), roles=roles).start()

    def _shutdown(_signum, _frame):
        log.info("server event=shutdown")
        process.stop()

    signal.signal(signal.SIGTERM, _shutdown)
    signal.signal(signal.SIGINT, _shutdown)
    process.wait()
    return 0


if __name__ == "__main__":
    sys.exit(main())
