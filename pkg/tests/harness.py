"""Shared test stack: datastore + monitor + submit + sites + gc."""

import os
from dataclasses import dataclass, field

from prodkit.auth import CredentialStore
from prodkit.dagengine import SiteCapabilities
from prodkit.datastore import Datastore
from prodkit.daemons.config import ServerConfig, SiteConfig
from prodkit.daemons.datahandler import DataHandlerDaemon
from prodkit.daemons.monitor import MonitorService
from prodkit.daemons.queue import QueueDaemon
from prodkit.daemons.submit import SubmitService
from prodkit.lifecycle import JobState, TimeoutPolicy
from prodkit.storage import LocalStorage


@dataclass
class Stack:
    root: str
    store: Datastore
    monitor_server: object = None
    submit_server: object = None
    submit_service: SubmitService = None
    sites: dict = field(default_factory=dict)
    datahandler: DataHandlerDaemon = None
    storage: LocalStorage = None
    credentials: CredentialStore = None
    config: ServerConfig = None

    @property
    def monitor_url(self):
        return self.monitor_server.url if self.monitor_server else None

    @property
    def submit_url(self):
        return self.submit_server.url if self.submit_server else None

    def cycle_all(self, times=1):
        for _ in range(times):
            for daemon in self.sites.values():
                daemon.cycle()
            if self.datahandler:
                self.datahandler.cycle()

    def stop(self):
        for daemon in self.sites.values():
            daemon.stop()
        if self.datahandler:
            self.datahandler.stop()
        if self.submit_server:
            self.submit_server.stop()
        if self.monitor_server:
            self.monitor_server.stop()


def site_config(root, site_id, plugin="mock", max_queued=10, gpu=False, options=None,
                poll_interval=0.05, pilot_command="prodkit-pilot"):
    return SiteConfig(
        site_id=site_id,
        plugin_name=plugin,
        max_queued=max_queued,
        poll_interval_s=poll_interval,
        submit_dir=os.path.join(root, "submit", site_id),
        pilot_command=pilot_command,
        capabilities=SiteCapabilities(has_gpu=gpu),
        queueing_options=dict(options or {}),
        system_params={
            "scratch_dir": os.path.join(root, "scratch"),
            "download_dir": os.path.join(root, "cache"),
            "storage": os.path.join(root, "storage"),
        },
        job_env={},
    )


def fast_policy(**overrides):
    policy = TimeoutPolicy(max_retries=overrides.pop("max_retries", 3))
    for name, seconds in overrides.items():
        policy = policy.with_timeout(JobState(name.upper()), seconds)
    return policy


def make_stack(
    tmp_path,
    sites=None,
    policy=None,
    users=None,
    with_submit=True,
    with_monitor=True,
    with_datahandler=True,
    start_loops=False,
    datahandler_interval=0.05,
):
    root = str(tmp_path)
    store = Datastore("sqlite:///%s" % os.path.join(root, "prodkit.db"))
    storage = LocalStorage(os.path.join(root, "storage"))
    stack = Stack(root=root, store=store, storage=storage)
    stack.config = ServerConfig(
        database_url="sqlite:///%s" % os.path.join(root, "prodkit.db"),
        module_cache_dir=os.path.join(root, "module-cache"),
        system_params={
            "scratch_dir": os.path.join(root, "scratch"),
            "download_dir": os.path.join(root, "cache"),
            "storage": os.path.join(root, "storage"),
        },
    )
    policy = policy or fast_policy()

    if with_monitor:
        service = MonitorService(store)
        stack.monitor_server = service.start("127.0.0.1", 0)

    site_list = sites if sites is not None else [site_config(root, "alpha")]
    for sc in site_list:
        daemon = QueueDaemon(
            sc,
            store,
            monitor_url=stack.monitor_url,
            module_cache_dir=stack.config.module_cache_dir,
        )
        stack.sites[sc.site_id] = daemon
        if start_loops:
            daemon.start()

    if with_datahandler:
        stack.datahandler = DataHandlerDaemon(
            store,
            storage=storage,
            policy=policy,
            scratch_dirs=[os.path.join(root, "scratch")],
            poll_interval_s=datahandler_interval,
        )
        if start_loops:
            stack.datahandler.start()

    if with_submit:
        if users:
            stack.credentials = CredentialStore(os.path.join(root, "users.auth"))
            for name, secret in users.items():
                stack.credentials.set_user(name, secret)
        stack.config.unmonitored_site = site_list[0].site_id
        stack.config.sites = site_list
        stack.submit_service = SubmitService(
            store,
            stack.config,
            credential_store=stack.credentials,
            site_registry=stack.sites,
            monitor_url=stack.monitor_url,
        )
        stack.submit_server = stack.submit_service.start("127.0.0.1", 0)
    return stack


MONO_DOC = """\
<configuration version="3">
  <meta><description>mono</description><category>test</category><jobcount>%d</jobcount></meta>
  <tray name="t"><module name="m" class="noop"/></tray>
</configuration>
"""


def wait_until(predicate, timeout=30.0, interval=0.05):
    import time

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False
