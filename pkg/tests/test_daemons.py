import configparser
import os
import time

import pytest

from harness import MONO_DOC, fast_policy, make_stack, site_config, wait_until
from prodkit.daemons.config import parse_config
from prodkit.lifecycle import Event, JobState
from prodkit.rpc import JSON_CONTENT_TYPE, RpcClient, RpcFault
from prodkit.steering import parse_steering

DAG_DOC = """\
<configuration version="3">
  <meta><description>dag</description><category>test</category><jobcount>%d</jobcount></meta>
  <tray name="t"><module name="m" class="noop"/></tray>
  <task name="A" trays="t"/>
  <task name="B" trays="t"/>
  <taskrel parent="A" child="B"/>
</configuration>
"""


@pytest.fixture
def stack(tmp_path):
    s = make_stack(tmp_path, users={"alice": "wonder"})
    yield s
    s.stop()


def submit(stack, doc):
    client = RpcClient(stack.submit_url, user="alice", secret="wonder")
    return client.call("submit_dataset", doc)


def test_monitored_submit_creates_rows(stack):
    ds = submit(stack, MONO_DOC % 10)
    jobs = stack.store.list_jobs(ds)
    assert len(jobs) == 10
    assert all(j.state == JobState.WAITING for j in jobs)


def test_unauthenticated_submit_rejected(stack):
    with pytest.raises(RpcFault) as err:
        RpcClient(stack.submit_url).call("submit_dataset", MONO_DOC % 1)
    assert err.value.code == 401
    with pytest.raises(RpcFault):
        RpcClient(stack.submit_url, user="alice", secret="nope").call(
            "submit_dataset", MONO_DOC % 1
        )


def test_unmonitored_submit_bypasses_datastore(stack):
    before = len(stack.store.list_datasets())
    client = RpcClient(stack.submit_url, user="alice", secret="wonder")
    handles = client.call("enqueue_unmonitored", MONO_DOC % 3)
    assert len(handles) == 3
    assert all(isinstance(h, str) and h for h in handles)
    assert len(stack.store.list_datasets()) == before


def test_queue_deficit_arithmetic(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=10,
                       options={"start_delay": 5, "pilot_runtime": 5})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        stack.store.create_dataset(parse_steering(MONO_DOC % 100), "t")
        daemon = stack.sites["alpha"]
        report = daemon.cycle()
        assert report.claimed == 10 and report.submitted == 10
        # 4 of the 10 finish instantly: deficit reopens to 4
        for rec in stack.store.list_jobs(1)[:10]:
            if rec.job_index < 4 and rec.state == JobState.QUEUED:
                stack.store.update_job_state(rec.key, rec.state, Event.PILOT_STARTED)
                stack.store.update_job_state(rec.key, JobState.PROCESSING, Event.WORK_COMPLETED)
                stack.store.update_job_state(rec.key, JobState.COPYING, Event.COPY_COMPLETED)
        report2 = daemon.cycle()
        assert report2.submitted == 4
        assert stack.store.active_count_for_site("alpha") == 10
    finally:
        stack.stop()


def test_queue_bound_never_exceeded(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=3,
                       options={"start_delay": 5, "pilot_runtime": 5})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        stack.store.create_dataset(parse_steering(MONO_DOC % 20), "t")
        for _ in range(5):
            stack.sites["alpha"].cycle()
            assert stack.store.active_count_for_site("alpha") <= 3
    finally:
        stack.stop()


def test_submit_failure_isolated(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=6,
                       options={"fail_first_submit": "true", "start_delay": 5})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 6), "t")
        report = stack.sites["alpha"].cycle()
        assert report.claimed == 6
        assert report.submitted == 5
        assert report.submit_errors == 1
        counts = stack.store.per_state_counts(ds)
        assert counts.get(JobState.QUEUED) == 5
        assert counts.get(JobState.ERROR) == 1
    finally:
        stack.stop()


def test_vanished_handle_resets_job(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=2,
                       options={"vanish_rate": "1.0", "start_delay": 5})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 2), "t")
        daemon = stack.sites["alpha"]
        daemon.cycle()  # submit; handles vanish immediately
        first_handles = {j.grid_id for j in stack.store.list_jobs(ds)}
        report = daemon.cycle()  # reconcile: vanished -> RESET -> cleaned -> resubmitted
        assert report.vanished == 2
        assert report.cleaned == 2
        assert report.submitted == 2
        jobs = stack.store.list_jobs(ds)
        assert all(j.state == JobState.QUEUED for j in jobs)
        assert {j.grid_id for j in jobs}.isdisjoint(first_handles)
    finally:
        stack.stop()


@pytest.mark.parametrize("backend", ["mock", "local"])
def test_end_to_end_either_backend(tmp_path, backend):
    """The daemon flow is identical behind either plugin."""
    import sys

    if backend == "mock":
        site = site_config(str(tmp_path), "alpha", max_queued=8,
                           options={"start_delay": 0.01, "pilot_runtime": 0.02})
        jobs = 12
    else:
        site = site_config(str(tmp_path), "alpha", plugin="local", max_queued=4,
                           pilot_command="%s -m prodkit.pilot" % sys.executable)
        jobs = 4
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % jobs), "t")
        ok = wait_until(
            lambda: (stack.cycle_all(), None)[1]
            or stack.store.per_state_counts(ds).get(JobState.OK, 0) == jobs,
            timeout=60,
        )
        assert ok, stack.store.per_state_counts(ds)
        assert stack.store.job_total(ds) == jobs
        if backend == "mock":
            agg = stack.store.aggregate_stats(ds)
            assert agg["events"].count == jobs  # stats flowed from the pilots
    finally:
        stack.stop()


def test_monitor_handlers_and_stale_passkey(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=1,
                       options={"start_delay": 30})  # mock pilot never reports
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 1), "t")
        stack.sites["alpha"].cycle()
        rec = stack.store.list_jobs(ds)[0]
        assert rec.state == JobState.QUEUED
        client = RpcClient(stack.monitor_url, content_type=JSON_CONTENT_TYPE)
        key = [ds, 0, None]

        assert client.call("job_started", *key, rec.passkey, "node1") == "PROCESSING"
        assert stack.store.get_record(rec.key).host == "node1"
        client.call("job_stats", *key, rec.passkey, {"events": 5000.0})
        assert client.call("job_finished", *key, rec.passkey, {}, []) == "OK"
        assert stack.store.job_stats(rec.key)["events"] == 5000.0

        # stale pilot: pre-reset passkey must be rejected with no state change
        ds2 = stack.store.create_dataset(parse_steering(MONO_DOC % 1), "t")
        stack.sites["alpha"].cycle()
        rec2 = stack.store.list_jobs(ds2)[0]
        old_key = rec2.passkey
        client.call("job_started", ds2, 0, None, old_key, "node2")
        stack.store.update_job_state(rec2.key, JobState.PROCESSING, Event.TIMEOUT_EXPIRED)
        with pytest.raises(RpcFault) as err:
            client.call("job_finished", ds2, 0, None, old_key, {}, [])
        assert err.value.code == 401
        assert stack.store.get_record(rec2.key).state == JobState.RESET
        with pytest.raises(RpcFault):
            client.call("keepalive", ds2, 0, None, old_key)
    finally:
        stack.stop()


def test_corruption_flips_job_and_quarantines(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=4,
                       options={"start_delay": 0.01, "pilot_runtime": 0.01})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 1), "t")
        assert wait_until(
            lambda: (stack.sites["alpha"].cycle(), None)[1]
            or stack.store.per_state_counts(ds).get(JobState.OK, 0) == 1,
            timeout=15,
        )
        # fake a recorded output, store the file, then corrupt it
        rec = stack.store.list_jobs(ds)[0]
        src = os.path.join(stack.root, "artifact.bin")
        with open(src, "wb") as fh:
            fh.write(b"precious output")
        entry = stack.storage.put(src, "out/artifact.bin")
        stack.store.record_output_files(rec.key, [entry])

        report = stack.datahandler.cycle()
        assert report.verified == 1  # clean digest: verified, stays OK
        assert stack.store.get_record(rec.key).state == JobState.OK

        stack.store.set_verified(rec.key, False)
        stored = os.path.join(stack.storage.base, "out", "artifact.bin")
        with open(stored, "r+b") as fh:
            data = bytearray(fh.read())
            data[5] ^= 0x04  # one bit
            fh.seek(0)
            fh.write(data)
        report = stack.datahandler.cycle()
        assert report.corrupted == [rec.key]
        # flagged to ERROR, and the retry policy picked it up in the same sweep
        after = stack.store.get_record(rec.key)
        assert after.state == JobState.RESET
        assert report.retries_granted == 1
        assert stack.storage.exists("quarantine/out/artifact.bin")
        assert not stack.storage.exists("out/artifact.bin")
    finally:
        stack.stop()


def test_retry_exhaustion_to_failed(tmp_path):
    stack = make_stack(tmp_path, policy=fast_policy(max_retries=1), with_submit=False,
                       sites=[site_config(str(tmp_path), "alpha", options={"start_delay": 30})])
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 1), "t")
        key = (ds, 0)
        for attempt in range(2):
            stack.sites["alpha"].cycle()  # also cleans + resubmits after a reset
            rec = stack.store.get_record(key)
            assert rec.state == JobState.QUEUED, (attempt, rec.state)
            stack.store.update_job_state(key, rec.state, Event.ERROR_REPORTED,
                                         error_message="boom")
            stack.datahandler.cycle()  # retry decision
            rec = stack.store.get_record(key)
            if attempt == 0:
                assert rec.state == JobState.RESET
                assert rec.retries == 1
        assert stack.store.get_record(key).state == JobState.FAILED
        assert stack.store.get_record(key).retries == 1
    finally:
        stack.stop()


def test_timeout_sweep_recovers_stuck_processing(tmp_path):
    policy = fast_policy(processing=0.2)
    site = site_config(str(tmp_path), "alpha", max_queued=1,
                       options={"start_delay": 0.01, "pilot_runtime": 30,
                                "pilot_kill_rate": "1.0"})
    stack = make_stack(tmp_path, sites=[site], policy=policy, with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 1), "t")
        stack.sites["alpha"].cycle()
        assert wait_until(
            lambda: stack.store.get_record((ds, 0)).state == JobState.PROCESSING, timeout=10
        )
        time.sleep(0.3)  # beyond the PROCESSING timeout
        report = stack.datahandler.cycle()
        assert report.timeouts_applied == 1
        assert stack.store.get_record((ds, 0)).state == JobState.RESET
    finally:
        stack.stop()


def test_site_isolation_two_sites(tmp_path):
    options = {"start_delay": 0.01, "pilot_runtime": 0.02}
    sites = [
        site_config(str(tmp_path), "east", max_queued=4, options=options),
        site_config(str(tmp_path), "west", max_queued=4, options=options),
    ]
    stack = make_stack(tmp_path, sites=sites, with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 16), "t")
        east_claims, west_claims = set(), set()
        done = wait_until(
            lambda: (
                east_claims.update(r.key for r in stack.store.records_for_site("east")),
                west_claims.update(r.key for r in stack.store.records_for_site("west")),
                stack.cycle_all(),
            )[-1]
            or stack.store.per_state_counts(ds).get(JobState.OK, 0) == 16,
            timeout=30,
        )
        assert done, stack.store.per_state_counts(ds)
        assert not (east_claims & west_claims)
        assert east_claims and west_claims
    finally:
        stack.stop()


def test_dag_dataset_completes_over_mock(tmp_path):
    site = site_config(str(tmp_path), "alpha", max_queued=8,
                       options={"start_delay": 0.01, "pilot_runtime": 0.02})
    stack = make_stack(tmp_path, sites=[site], with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(DAG_DOC % 3), "t")
        done = wait_until(
            lambda: (stack.cycle_all(), None)[1]
            or stack.store.per_state_counts(ds).get(JobState.OK, 0) == 3,
            timeout=30,
        )
        assert done, (stack.store.per_state_counts(ds),
                      [(t.task_name, t.state) for t in stack.store.list_tasks(ds)])
        for t in stack.store.list_tasks(ds):
            assert t.state == JobState.OK
    finally:
        stack.stop()


def test_eventual_completion_under_failures(tmp_path):
    site = site_config(
        str(tmp_path), "alpha", max_queued=6,
        options={"start_delay": 0.01, "pilot_runtime": 0.02,
                 "submit_failure_rate": "0.3", "pilot_kill_rate": "0.3", "seed": "42"},
    )
    policy = fast_policy(processing=0.5, queued=2.0, max_retries=10**9)
    stack = make_stack(tmp_path, sites=[site], policy=policy, with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 15), "t")
        done = wait_until(
            lambda: (stack.cycle_all(), None)[1]
            or stack.store.per_state_counts(ds).get(JobState.OK, 0) == 15,
            timeout=60,
        )
        assert done, stack.store.per_state_counts(ds)
        # orphan freedom: one more reconciliation pass leaves the backend
        # holding nothing beyond datastore-owned handles
        daemon = stack.sites["alpha"]
        daemon.cycle()
        owned = {
            r.grid_id for r in stack.store.records_for_site("alpha") if r.grid_id
        }
        assert set(daemon.plugin.backend_handles()) <= owned
    finally:
        stack.stop()


def test_crash_safety_daemon_restarts(tmp_path):
    import random as rnd

    rng = rnd.Random(5)
    site = site_config(
        str(tmp_path), "alpha", max_queued=5,
        options={"start_delay": 0.01, "pilot_runtime": 0.03, "pilot_kill_rate": "0.2",
                 "seed": "9"},
    )
    policy = fast_policy(processing=0.4, max_retries=10**9)
    stack = make_stack(tmp_path, sites=[site], policy=policy, with_submit=False)
    try:
        ds = stack.store.create_dataset(parse_steering(MONO_DOC % 12), "t")
        deadline = time.monotonic() + 60
        daemon = stack.sites["alpha"]
        while time.monotonic() < deadline:
            # kill-and-replace the site daemon between arbitrary cycle steps
            if rng.random() < 0.2:
                daemon.plugin.stop()
                from prodkit.daemons.queue import QueueDaemon

                daemon = QueueDaemon(
                    site, stack.store, monitor_url=stack.monitor_url,
                    module_cache_dir=stack.config.module_cache_dir,
                )
                stack.sites["alpha"] = daemon
            daemon.cycle()
            stack.datahandler.cycle()
            if stack.store.per_state_counts(ds).get(JobState.OK, 0) == 12:
                break
            time.sleep(0.05)
        assert stack.store.per_state_counts(ds).get(JobState.OK, 0) == 12
    finally:
        stack.stop()


def test_config_parsing_roundtrip(tmp_path):
    ini = """
[server]
host = 127.0.0.1
submit_port = 9170
monitor_port = 9180
credential_file = users.auth
unmonitored_site = farm

[database]
url = sqlite:///x.db

[queue]
plugin = mock
max_queued = 7
poll_interval = 2
keepalive = 60

[system]
scratch_dir = /tmp/scr
storage = /tmp/sto

[environment]
PATH_EXTRA = /opt/bin

[timeouts]
processing = 120
max_retries = 5

[bundles]
sim linux-x86_64 = https://bundles/sim.tar.gz 0123456789abcdef0123456789abcdef

[site:farm]
max_queued = 3
gpu = true

[site:cloud]
plugin = local
queue = long
"""
    parser = configparser.ConfigParser()
    parser.read_string(ini)
    cfg = parse_config(parser)
    assert cfg.submit_port == 9170
    assert cfg.database_url == "sqlite:///x.db"
    assert cfg.timeout_policy.max_retries == 5
    assert cfg.timeout_policy.timeout_for(JobState.PROCESSING) == 120
    assert cfg.bundles[("sim", "linux-x86_64")][0].startswith("https://")
    farm = next(s for s in cfg.sites if s.site_id == "farm")
    assert farm.plugin_name == "mock"
    assert farm.max_queued == 3
    assert farm.capabilities.has_gpu
    assert farm.queueing_options["keepalive"] == "60"
    assert farm.job_env == {"path_extra": "/opt/bin"}
    cloud = next(s for s in cfg.sites if s.site_id == "cloud")
    assert cloud.plugin_name == "local"
    assert cloud.queueing_options["queue"] == "long"


def test_example_config_parses():
    from pathlib import Path

    from prodkit.daemons.config import load_config

    cfg = load_config(Path(__file__).parent.parent / "docs" / "server-config.example.ini")
    assert cfg.submit_tls is True
    assert cfg.monitor_tls is False
    assert [s.site_id for s in cfg.sites] == ["farm", "gpufarm"]
    gpu = cfg.sites[1]
    assert gpu.capabilities.has_gpu
    assert gpu.plugin_name == "dialect"
    assert gpu.queueing_options["queue"] == "gpu_long"
    assert cfg.bundles[("sim", "linux-x86_64")][1] == "0123456789abcdef0123456789abcdef"


def test_dispatch_tables_use_canonical_vocabulary(stack):
    from prodkit.rpc import METHOD_NAMES

    monitor_names = set(stack.monitor_server.dispatch.names())
    submit_names = set(stack.submit_server.dispatch.names())
    assert monitor_names <= METHOD_NAMES
    assert submit_names <= METHOD_NAMES
