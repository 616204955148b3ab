"""INI server configuration.

Sections: [server] endpoints and auth, [database] store URL, [queue]
site defaults, [system] per-host paths exported to pilots, [environment]
job environment variables, [timeouts] state timeouts and retry budget,
[bundles] platform software, and one [site:<id>] per site. Unrecognized
keys in [queue] and [site:*] pass through as queueing options for the
site's plugin.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from prodkit.dagengine import SiteCapabilities
from prodkit.lifecycle import DEFAULT_TIMEOUTS, JobState, TimeoutPolicy

_SITE_KEYS = {
    "plugin",
    "max_queued",
    "poll_interval",
    "gpu",
    "max_memory_mb",
    "max_disk_mb",
    "max_walltime_s",
    "submit_dir",
    "pilot_command",
}


@dataclass
class SiteConfig:
    site_id: str
    plugin_name: str = "local"
    max_queued: int = 10
    poll_interval_s: float = 5.0
    submit_dir: str = "submit"
    pilot_command: str = "prodkit-pilot"
    capabilities: SiteCapabilities = field(default_factory=SiteCapabilities)
    queueing_options: dict = field(default_factory=dict)
    system_params: dict = field(default_factory=dict)
    job_env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_queued < 1:
            raise ValueError("max_queued must be >= 1")
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval must be positive")


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    submit_port: int = 9070
    monitor_port: int = 9080
    submit_tls: bool = False
    monitor_tls: bool = False
    tls_cert: str | None = None
    tls_key: str | None = None
    credential_file: str | None = None
    database_url: str = "sqlite:///prodkit.db"
    data_dir: str | None = None
    module_cache_dir: str = "module-cache"
    unmonitored_site: str | None = None
    datahandler_interval_s: float = 5.0
    session_ttl_s: float = 4 * 3600.0
    system_params: dict = field(default_factory=dict)
    job_env: dict = field(default_factory=dict)
    bundles: dict = field(default_factory=dict)  # (metaproject, platform) -> (url, md5)
    sites: list = field(default_factory=list)
    timeout_policy: TimeoutPolicy = field(default_factory=TimeoutPolicy)


def _as_bool(text, default=False):
    if text is None:
        return default
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def load_config(path) -> ServerConfig:
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> ServerConfig:
    cfg = ServerConfig()
    if parser.has_section("server"):
        s = parser["server"]
        cfg.host = s.get("host", cfg.host)
        cfg.submit_port = s.getint("submit_port", cfg.submit_port)
        cfg.monitor_port = s.getint("monitor_port", cfg.monitor_port)
        cfg.submit_tls = _as_bool(s.get("submit_tls"), False)
        cfg.monitor_tls = _as_bool(s.get("monitor_tls"), False)
        cfg.tls_cert = s.get("tls_cert") or None
        cfg.tls_key = s.get("tls_key") or None
        cfg.credential_file = s.get("credential_file") or None
        cfg.data_dir = s.get("data_dir") or None
        cfg.module_cache_dir = s.get("module_cache_dir", cfg.module_cache_dir)
        cfg.unmonitored_site = s.get("unmonitored_site") or None
        cfg.datahandler_interval_s = s.getfloat("datahandler_interval", cfg.datahandler_interval_s)
        cfg.session_ttl_s = s.getfloat("session_ttl", cfg.session_ttl_s)
    if parser.has_section("database"):
        cfg.database_url = parser["database"].get("url", cfg.database_url)
    if parser.has_section("system"):
        cfg.system_params = dict(parser["system"])
    if parser.has_section("environment"):
        cfg.job_env = dict(parser["environment"])
    if parser.has_section("timeouts"):
        timeouts = dict(DEFAULT_TIMEOUTS)
        max_retries = 3
        for key, value in parser["timeouts"].items():
            if key == "max_retries":
                max_retries = int(value)
                continue
            try:
                state = JobState(key.upper())
            except ValueError:
                raise ValueError("unknown state %r in [timeouts]" % key) from None
            timeouts[state] = float(value)
        cfg.timeout_policy = TimeoutPolicy(timeouts=timeouts, max_retries=max_retries)
    if parser.has_section("bundles"):
        for key, value in parser["bundles"].items():
            try:
                metaproject, platform = key.split()
                url, md5 = value.split()
            except ValueError:
                raise ValueError(
                    "[bundles] entries are '<metaproject> <platform> = <url> <md5>'"
                ) from None
            cfg.bundles[(metaproject, platform)] = (url, md5)

    queue_defaults = dict(parser["queue"]) if parser.has_section("queue") else {}
    for section in parser.sections():
        if not section.startswith("site:"):
            continue
        site_id = section[len("site:"):]
        merged = dict(queue_defaults)
        merged.update(parser[section])
        options = {k: v for k, v in merged.items() if k not in _SITE_KEYS}
        cfg.sites.append(
            SiteConfig(
                site_id=site_id,
                plugin_name=merged.get("plugin", "local"),
                max_queued=int(merged.get("max_queued", 10)),
                poll_interval_s=float(merged.get("poll_interval", 5)),
                submit_dir=merged.get("submit_dir", "submit"),
                pilot_command=merged.get("pilot_command", "prodkit-pilot"),
                capabilities=SiteCapabilities(
                    has_gpu=_as_bool(merged.get("gpu"), False),
                    max_memory_mb=int(merged.get("max_memory_mb", 4096)),
                    max_disk_mb=int(merged.get("max_disk_mb", 10240)),
                    max_walltime_s=int(merged.get("max_walltime_s", 86400)),
                ),
                queueing_options=options,
                system_params=dict(cfg.system_params),
                job_env=dict(cfg.job_env),
            )
        )
    return cfg
