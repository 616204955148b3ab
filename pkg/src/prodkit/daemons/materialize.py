"""Turn one (dataset, job[, task]) into a concrete submission payload.

Expression specialization happens here for everything the backend needs
up front: the job environment and the embedded config document. Module
parameters specialize later, pilot-side, where system paths are known.
"""

from __future__ import annotations

import json
import os

from prodkit import dsl
from prodkit.gridplugins import JobMaterialization
from prodkit.steering import ResourceRequirements, SteeringSpec


def _system_map(site) -> dict:
    params = site.system_params or {}
    return {
        "scratch": params.get("scratch_dir", "/tmp/prodkit-scratch"),
        "download": params.get("download_dir", "/tmp/prodkit-cache"),
        "storage": params.get("storage", ""),
    }


def spec_has_external_modules(spec: SteeringSpec) -> bool:
    return any(m.class_name == "external" for t in spec.trays for m in t.modules)


def materialize(
    spec: SteeringSpec,
    steering_xml: str,
    dataset_id: int,
    job_index: int,
    task_name: str | None,
    passkey: str,
    site,
    monitor_url: str | None,
    module_cache_dir: str | None = None,
    job_count: int | None = None,
) -> JobMaterialization:
    nproc = job_count if job_count is not None else (spec.dataset_meta.job_count or 1)
    requirements = ResourceRequirements()
    if task_name is not None:
        for td in spec.task_defs:
            if td.name == task_name:
                requirements = td.requirements
                break

    system = _system_map(site)
    ctx = dsl.job_context(
        dataset_id, job_index, nproc, steering=spec.steering_map(), system=system
    )
    if task_name is not None:
        ctx.args["task"] = task_name

    env = {
        "PRODKIT_SCRATCH": system["scratch"],
        "PRODKIT_CACHE": system["download"],
    }
    if system["storage"]:
        env["PRODKIT_STORAGE"] = system["storage"]
    keepalive = (site.queueing_options or {}).get("keepalive")
    if keepalive:
        env["PRODKIT_KEEPALIVE"] = str(keepalive)
    if module_cache_dir and spec_has_external_modules(spec):
        env["PRODKIT_DEPS"] = os.path.abspath(module_cache_dir)
    for name, raw in (site.job_env or {}).items():
        env[name] = dsl.evaluate(str(raw), ctx)

    config_doc = json.dumps(
        {
            "dataset_id": dataset_id,
            "job_index": job_index,
            "task_name": task_name,
            "nproc": nproc,
            "steering_xml": steering_xml,
        },
        sort_keys=True,
    )
    return JobMaterialization(
        dataset_id=dataset_id,
        job_index=job_index,
        task_name=task_name,
        passkey=passkey,
        monitor_url=monitor_url,
        job_count=nproc,
        requirements=requirements,
        env=env,
        pilot_command=site.pilot_command,
        config_doc=config_doc,
    )
