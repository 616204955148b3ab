"""Batch-backend abstraction.

A plugin owns the interaction with one site's queueing system: writing
submission artifacts, submitting, polling, removing, and reconciling
orphans. Implementations are interchangeable behind this interface; a
plugin instance is confined to its owning queue daemon's loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from prodkit.steering import ResourceRequirements


class SubmitFailure(Exception):
    pass


class BackendUnavailable(Exception):
    pass


class IoFailure(Exception):
    pass


#: check_job_status outcomes
QUEUED, RUNNING, FINISHED, VANISHED = "queued", "running", "finished", "vanished"

FRAMEWORK_TAG = "prodkit"


@dataclass
class JobMaterialization:
    """Everything a backend needs to put one job (or task) on a queue."""

    dataset_id: int
    job_index: int
    passkey: str
    task_name: str | None = None
    monitor_url: str | None = None
    job_count: int = 1
    requirements: ResourceRequirements = field(default_factory=ResourceRequirements)
    env: dict = field(default_factory=dict)
    pilot_command: str = "prodkit-pilot"
    config_doc: str | None = None
    file_dependencies: list = field(default_factory=list)

    @property
    def key(self):
        if self.task_name is None:
            return (self.dataset_id, self.job_index)
        return (self.dataset_id, self.job_index, self.task_name)

    @property
    def submission_name(self) -> str:
        parts = [FRAMEWORK_TAG, str(self.dataset_id), str(self.job_index)]
        if self.task_name is not None:
            parts.append(self.task_name)
        return ".".join(parts)

    @property
    def stem(self) -> str:
        stem = "job_%d_%d" % (self.dataset_id, self.job_index)
        if self.task_name is not None:
            stem += "_%s" % self.task_name
        return stem


class GridPlugin:
    """Base interface. Submit must follow write_config for the same job."""

    name = "base"

    def __init__(self, site_config=None):
        self.site_config = site_config

    def write_config(self, job: JobMaterialization, out_dir: str) -> list:
        raise NotImplementedError

    def submit(self, artifacts: list) -> str:
        raise NotImplementedError

    def check_job_status(self, handles) -> dict:
        raise NotImplementedError

    def remove(self, handle) -> None:
        raise NotImplementedError

    def clean_queue(self, expected) -> list:
        raise NotImplementedError

    def stop(self):
        pass


_REGISTRY = {}


def register(name, cls):
    _REGISTRY[name] = cls


def create(name, site_config=None) -> GridPlugin:
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ValueError("unknown grid plugin %r (have: %s)" % (name, sorted(_REGISTRY))) from None
    return cls(site_config)


def plugin_names():
    return sorted(_REGISTRY)


from prodkit.gridplugins.dialect import DialectPlugin  # noqa: E402
from prodkit.gridplugins.localexec import LocalExecutorPlugin  # noqa: E402
from prodkit.gridplugins.mock import MockPlugin  # noqa: E402

register("dialect", DialectPlugin)
register("local", LocalExecutorPlugin)
register("mock", MockPlugin)
