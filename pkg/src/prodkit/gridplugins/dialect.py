"""Submission-script emitter for a fixed directive dialect.

The dialect is deliberately simple: a shell script whose header lines
carry resource requests, followed by environment exports and the pilot
invocation. Output is byte-deterministic for identical inputs; golden
files pin the exact format.
"""

from __future__ import annotations

import os
import shlex


def _walltime(seconds: int) -> str:
    h, rest = divmod(int(seconds), 3600)
    m, s = divmod(rest, 60)
    return "%02d:%02d:%02d" % (h, m, s)


class DialectPlugin:
    name = "dialect"

    def __init__(self, site_config=None):
        self.site_config = site_config
        self._written = set()

    # -- artifacts ---------------------------------------------------------

    def render_script(self, job) -> str:
        opts = dict(getattr(self.site_config, "queueing_options", {}) or {})
        r = job.requirements
        lines = ["#!/bin/sh"]
        lines.append("#DIRECTIVE name=%s" % job.submission_name)
        if opts.get("queue"):
            lines.append("#DIRECTIVE queue=%s" % opts["queue"])
        lines.append("#DIRECTIVE mem=%dmb" % r.min_memory_mb)
        lines.append("#DIRECTIVE disk=%dmb" % r.min_disk_mb)
        lines.append("#DIRECTIVE walltime=%s" % _walltime(r.max_walltime_s))
        if r.needs_gpu:
            lines.append("#DIRECTIVE gpus=1")
        for extra in (opts.get("directives") or "").split(","):
            extra = extra.strip()
            if extra:
                lines.append("#DIRECTIVE %s" % extra)
        for name in sorted(job.env):
            lines.append("export %s=%s" % (name, shlex.quote(str(job.env[name]))))
        cmd = [job.pilot_command]
        cmd += ["--dataset", str(job.dataset_id), "--job", str(job.job_index)]
        if job.task_name is not None:
            cmd += ["--task", job.task_name]
        cmd += ["--key", job.passkey]
        if job.monitor_url:
            cmd += ["--monitor", job.monitor_url]
        if job.config_doc is not None:
            cmd += ["--config", '"$(dirname "$0")"/%s.config.json' % job.stem]
        lines.append("exec " + " ".join(cmd))
        return "\n".join(lines) + "\n"

    def write_config(self, job, out_dir) -> list:
        os.makedirs(out_dir, exist_ok=True)
        artifacts = []
        script_path = os.path.join(out_dir, job.stem + ".sh")
        try:
            with open(script_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(self.render_script(job))
            os.chmod(script_path, 0o755)
            artifacts.append(script_path)
            if job.config_doc is not None:
                config_path = os.path.join(out_dir, job.stem + ".config.json")
                with open(config_path, "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(job.config_doc)
                artifacts.append(config_path)
        except OSError as exc:
            from prodkit.gridplugins import IoFailure

            raise IoFailure(str(exc)) from exc
        self._written.add(script_path)
        return artifacts

    # -- queue interaction: the dialect plugin only emits scripts; a real
    # deployment pairs it with the site's own submission tooling. Submit
    # records the script as "handed over" so the contract stays testable.

    def submit(self, artifacts) -> str:
        from prodkit.gridplugins import FRAMEWORK_TAG, SubmitFailure

        if not artifacts or artifacts[0] not in self._written:
            raise SubmitFailure("submit requires artifacts from a prior write_config")
        return "%s-script-%s" % (FRAMEWORK_TAG, os.path.basename(artifacts[0]))

    def check_job_status(self, handles) -> dict:
        from prodkit.gridplugins import VANISHED

        return {h: VANISHED for h in handles}

    def remove(self, handle):
        pass

    def clean_queue(self, expected) -> list:
        return []
