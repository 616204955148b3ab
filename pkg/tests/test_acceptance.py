"""Acceptance suite: one test per criterion, each printing PASS/FAIL.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end runs
spawn real pilot processes over the local executor; the chaos run drives
the mock backend with deterministic fault injection at the stated rates.
"""

import contextlib
import hashlib
import json
import math
import os
import random
import statistics
import sys
import threading
import time
from pathlib import Path

import pytest

from gendsl import ARGS, STEERING, SYSTEM, gen_arith, gen_template
from genspec import random_spec
from harness import fast_policy, make_stack, site_config, wait_until
from oracles import dsl_reference as dsl_ref
from oracles.md5_reference import md5_hex
from prodkit import dsl
from prodkit import dagengine
from prodkit.dagengine import SiteCapabilities
from prodkit.datastore import Datastore
from prodkit.lifecycle import Event, JobState, TIMEOUT_RESETTABLE
from prodkit.rpc import JSON_CONTENT_TYPE, RpcClient, RpcFault
from prodkit.steering import parse_steering, serialize_steering, validate_steering
from prodkit.storage import compute_md5


@contextlib.contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print("\nACCEPTANCE %-28s FAIL" % name)
        raise
    print("\nACCEPTANCE %-28s PASS" % name)


MONO_DOC = """\
<configuration version="3">
  <meta><description>accept</description><category>test</category><jobcount>%d</jobcount></meta>
  <tray name="t"><module name="m" class="noop"/></tray>
</configuration>
"""

PILOT_CMD = "%s -m prodkit.pilot" % sys.executable


def three_sites(root, plugin, max_queued=10, options=None, poll=0.25):
    return [
        site_config(
            root, name, plugin=plugin, max_queued=max_queued,
            options=dict(options or {}), poll_interval=poll, pilot_command=PILOT_CMD,
        )
        for name in ("site-a", "site-b", "site-c")
    ]


class Sampler(threading.Thread):
    """Polls invariants while a run is in flight."""

    def __init__(self, stack, dataset_id, max_queued, policy=None, poll_bound=None):
        super().__init__(daemon=True)
        self.stack = stack
        self.dataset_id = dataset_id
        self.max_queued = max_queued
        self.policy = policy
        self.poll_bound = poll_bound
        self.violations = []
        self.samples = 0
        self._halt = threading.Event()

    def run(self):
        total = self.stack.store.job_total(self.dataset_id)
        while not self._halt.is_set():
            counts = self.stack.store.per_state_counts(self.dataset_id)
            if sum(counts.values()) != total:
                self.violations.append("conservation: %r" % (counts,))
            for site in self.stack.sites:
                active = self.stack.store.active_count_for_site(site)
                if active > self.max_queued:
                    self.violations.append("queue bound: %s has %d" % (site, active))
            if self.policy is not None:
                now = time.time()
                for rec in self.stack.store.all_live_records():
                    if rec.state in (JobState.WAITING, JobState.SUSPENDED):
                        continue  # capacity waits and operator holds
                    allowed = self.policy.timeout_for(rec.state) if rec.state in self.policy.timeouts else 60.0
                    if now - rec.state_entered > allowed + 2 * self.poll_bound:
                        self.violations.append(
                            "stuck: %s in %s for %.1fs"
                            % (rec.key, rec.state.value, now - rec.state_entered)
                        )
            self.samples += 1
            self._halt.wait(0.25)

    def stop(self):
        self._halt.set()
        self.join(timeout=5)


# ---------------------------------------------------------------------------

def test_end_to_end_monolithic_three_sites(tmp_path):
    with criterion("e2e-monolithic-200"):
        started = time.monotonic()
        stack = make_stack(
            tmp_path,
            sites=three_sites(str(tmp_path), "local"),
            with_submit=False,
            start_loops=True,
            datahandler_interval=0.5,
        )
        try:
            ds = stack.store.create_dataset(parse_steering(MONO_DOC % 200), "accept")
            sampler = Sampler(stack, ds, max_queued=10)
            sampler.start()
            done = wait_until(
                lambda: stack.store.per_state_counts(ds).get(JobState.OK, 0) == 200,
                timeout=280,
                interval=0.25,
            )
            sampler.stop()
            elapsed = time.monotonic() - started
            counts = stack.store.per_state_counts(ds)
            assert done, "not all OK: %r" % (counts,)
            assert sampler.violations == [], sampler.violations[:10]
            assert sampler.samples > 10
            assert elapsed < 300, "took %.1fs" % elapsed
            print("\n  200 jobs OK across 3 local-executor sites in %.1fs" % elapsed)
        finally:
            stack.stop()


def test_chaos_recovery(tmp_path):
    with criterion("chaos-recovery"):
        policy = fast_policy(processing=10.0, queueing=30.0, max_retries=5)
        poll = 0.5
        options = {
            "start_delay": 0.02,
            "pilot_runtime": 0.05,
            "submit_failure_every": 5,  # 20% of submissions fail
            "pilot_kill_every": 10,     # 10% of pilots die mid-PROCESSING
        }
        stack = make_stack(
            tmp_path,
            sites=three_sites(str(tmp_path), "mock", options=options, poll=poll),
            policy=policy,
            with_submit=False,
            start_loops=True,
            datahandler_interval=poll,
        )
        try:
            ds = stack.store.create_dataset(parse_steering(MONO_DOC % 200), "accept")
            sampler = Sampler(stack, ds, max_queued=10, policy=policy, poll_bound=poll)
            sampler.start()
            done = wait_until(
                lambda: stack.store.per_state_counts(ds).get(JobState.OK, 0) == 200,
                timeout=240,
                interval=0.25,
            )
            sampler.stop()
            counts = stack.store.per_state_counts(ds)
            assert done, "not all OK under chaos: %r" % (counts,)
            assert counts.get(JobState.OK, 0) == 200
            stuck = [v for v in sampler.violations if v.startswith("stuck")]
            assert stuck == [], stuck[:10]
            assert sampler.violations == [], sampler.violations[:10]
            retried = [j for j in stack.store.list_jobs(ds) if j.retries > 0]
            print("\n  200/200 OK under 20%% submit failures + 10%% pilot kills; "
                  "%d jobs needed retries" % len(retried))
        finally:
            stack.stop()


def test_passkey_security_after_forced_reset(tmp_path):
    with criterion("passkey-security"):
        stack = make_stack(
            tmp_path,
            sites=[site_config(str(tmp_path), "alpha", max_queued=50,
                               options={"start_delay": 60})],
            with_submit=False,
        )
        try:
            ds = stack.store.create_dataset(parse_steering(MONO_DOC % 50), "accept")
            stack.sites["alpha"].cycle()  # 50 QUEUED, mock pilots dormant
            client = RpcClient(stack.monitor_url, content_type=JSON_CONTENT_TYPE)
            old_keys = {}
            for rec in stack.store.list_jobs(ds):
                old_keys[rec.job_index] = rec.passkey
                client.call("job_started", ds, rec.job_index, None, rec.passkey, "host-x")

            for rec in stack.store.list_jobs(ds):
                stack.store.force_reset(rec.key)
            snapshot = {
                r.job_index: (r.state, r.state_entered, r.passkey, r.retries)
                for r in stack.store.list_jobs(ds)
            }
            assert all(s[0] == JobState.RESET for s in snapshot.values())

            rejected = 0
            for idx, old in old_keys.items():
                for method, extra in (
                    ("job_status", ["copying"]),
                    ("job_stats", [{"cpu_s": 1.0}]),
                    ("job_finished", [{}, []]),
                    ("job_error", ["late report"]),
                    ("keepalive", []),
                ):
                    with pytest.raises(RpcFault) as err:
                        client.call(method, ds, idx, None, old, *extra)
                    assert err.value.code == 401, (method, err.value.code)
                    rejected += 1
            after = {
                r.job_index: (r.state, r.state_entered, r.passkey, r.retries)
                for r in stack.store.list_jobs(ds)
            }
            assert after == snapshot  # zero state changes
            assert rejected == 50 * 5
            print("\n  %d stale-passkey updates rejected, zero state changes" % rejected)
        finally:
            stack.stop()


def test_integrity_bitflip_and_md5_oracle(tmp_path):
    with criterion("integrity"):
        # 1000-file random corpus: production digests equal the RFC-style oracle
        rng = random.Random(20260810)
        corpus_dir = tmp_path / "corpus"
        corpus_dir.mkdir()
        for i in range(1000):
            blob = rng.randbytes(rng.randint(0, 4096))
            path = corpus_dir / ("f%04d" % i)
            path.write_bytes(blob)
            assert compute_md5(path) == md5_hex(blob)

        # 100 finished jobs with stored outputs; flip one bit in a known subset
        stack = make_stack(tmp_path, with_submit=False, with_monitor=False,
                           sites=[site_config(str(tmp_path), "alpha",
                                              options={"start_delay": 60})])
        try:
            ds = stack.store.create_dataset(parse_steering(MONO_DOC % 100), "accept")
            store = stack.store
            for rec in store.claim_jobs("alpha", SiteCapabilities(), 100):
                payload = rng.randbytes(256) + b"job-%d" % rec.job_index
                src = tmp_path / "out.bin"
                src.write_bytes(payload)
                entry = stack.storage.put(str(src), "out/job_%d.bin" % rec.job_index)
                store.record_output_files(rec.key, [entry])
                store.update_job_state(rec.key, JobState.QUEUEING, Event.SUBMITTED_TO_BACKEND)
                store.update_job_state(rec.key, JobState.QUEUED, Event.PILOT_STARTED)
                store.update_job_state(rec.key, JobState.PROCESSING, Event.WORK_COMPLETED)
                store.update_job_state(rec.key, JobState.COPYING, Event.COPY_COMPLETED)

            corrupted = sorted(rng.sample(range(100), 7))
            for idx in corrupted:
                stored = os.path.join(stack.storage.base, "out", "job_%d.bin" % idx)
                with open(stored, "r+b") as fh:
                    data = bytearray(fh.read())
                    bit = rng.randrange(len(data) * 8)
                    data[bit // 8] ^= 1 << (bit % 8)
                    fh.seek(0)
                    fh.write(data)

            report = stack.datahandler.cycle()
            flagged = sorted(key[1] for key in report.corrupted)
            assert flagged == corrupted, (flagged, corrupted)
            assert report.verified == 100 - len(corrupted)
            for idx in corrupted:
                assert stack.storage.exists("quarantine/out/job_%d.bin" % idx)
            print("\n  exactly %d corrupted jobs flagged; 1000-file corpus matches oracle"
                  % len(corrupted))
        finally:
            stack.stop()


def test_dsl_oracle_agreement_10k():
    with criterion("dsl-oracle-10k"):
        rng = random.Random(424242)
        agreements = 0
        for i in range(10000):
            text = "$eval(%s)" % gen_arith(rng) if i % 3 == 0 else gen_template(rng)
            ctx = dsl.EvalContext(
                args=dict(ARGS), steering=dict(STEERING), system=dict(SYSTEM), rng_seed=7
            )
            try:
                mine, mine_err = dsl.evaluate(text, ctx), None
            except dsl.DslError as exc:
                mine, mine_err = None, type(exc).__name__
            try:
                theirs, theirs_err = (
                    dsl_ref.evaluate(text, dict(ARGS), dict(STEERING), dict(SYSTEM), 7),
                    None,
                )
            except dsl_ref.RefError as exc:
                theirs, theirs_err = None, type(exc).__name__
            assert mine == theirs and mine_err == theirs_err, (text, mine, mine_err, theirs, theirs_err)
            agreements += 1
        assert agreements == 10000

        # every import/loop-bearing $eval rejected
        for bad in ("import os", "from os import sep", "while true", "for i in x",
                    "__import__('os')", "exec", "eval", "open('/etc/passwd')"):
            with pytest.raises(dsl.EvalRejected):
                dsl.eval_arith(bad)

        # recursion bound: depth 20 evaluates, 21 does not
        ctx = dsl.EvalContext(args=dict(ARGS), rng_seed=1)
        assert dsl.evaluate("$eval(" * 20 + "1" + ")" * 20, ctx) == "1"
        with pytest.raises(dsl.RecursionLimit):
            dsl.evaluate("$eval(" * 21 + "1" + ")" * 21, ctx)
        chain = {"s%d" % i: "$steering(s%d)" % (i + 1) for i in range(25)}
        chain["s25"] = "end"
        deep_ctx = dsl.EvalContext(args=dict(ARGS), steering=chain, rng_seed=1)
        with pytest.raises(dsl.RecursionLimit):
            dsl.evaluate("$steering(s0)", deep_ctx)
        print("\n  10000 expressions agree byte-for-byte; rejects and depth bound hold")


def _dag_doc(n, edges, gpu_vertices=()):
    tasks = "\n".join(
        '  <task name="t%d" trays="tr"%s/>' % (i, ' gpu="true"' if i in gpu_vertices else "")
        for i in range(n)
    )
    rels = "\n".join(
        '  <taskrel parent="t%d" child="t%d"/>' % (a, b) for a, b in edges
    )
    return """\
<configuration version="3">
  <meta><description>dag</description><category>test</category><jobcount>1</jobcount></meta>
  <tray name="tr"><module name="m" class="noop"/></tray>
%s
%s
</configuration>
""" % (tasks, rels)


def test_dag_traces_respect_edges():
    with criterion("dag-traces-500"):
        rng = random.Random(99)
        store = Datastore("sqlite://")
        caps = SiteCapabilities(has_gpu=True)
        checked_edges = 0
        for round_no in range(500):
            n = rng.randint(1, 12)
            edges = [
                (a, b)
                for a in range(n)
                for b in range(a + 1, n)
                if rng.random() < 0.25
            ]
            spec = parse_steering(_dag_doc(n, edges))
            ds = store.create_dataset(spec, "accept")
            dag = dagengine.build_dag(spec)
            starts, finishes = {}, {}
            while True:
                states = {t.task_name: t.state for t in store.list_tasks(ds)}
                expected_ready = set(dagengine.ready_tasks(dag, states))
                claims = store.claim_jobs("sim", caps, 64)
                # capacity always suffices here: dispatch the whole ready set
                assert {c.task_name for c in claims} == expected_ready
                if not claims:
                    if all(t.state == JobState.OK for t in store.list_tasks(ds)):
                        break
                    raise AssertionError("deadlock in dataset %d" % ds)
                for rec in claims:
                    starts[rec.task_name] = time.monotonic()
                    store.update_job_state(rec.key, JobState.QUEUEING, Event.SUBMITTED_TO_BACKEND)
                    store.update_job_state(rec.key, JobState.QUEUED, Event.PILOT_STARTED)
                    store.update_job_state(rec.key, JobState.PROCESSING, Event.WORK_COMPLETED)
                    store.update_job_state(rec.key, JobState.COPYING, Event.COPY_COMPLETED)
                    finishes[rec.task_name] = time.monotonic()
            for a, b in edges:
                assert starts["t%d" % b] >= finishes["t%d" % a], (ds, a, b)
                checked_edges += 1
        print("\n  500 random DAGs executed; %d edges respected" % checked_edges)


WORKFLOW_DOC = """\
<configuration version="3">
  <meta><description>wf</description><category>test</category><jobcount>1</jobcount></meta>
  <steering><parameter name="prefix">%(prefix)s</parameter></steering>
  <tray name="tA">
    <module name="getA" class="transfer">
      <parameter name="direction">download</parameter>
      <parameter name="src">seeds/%(wf)s/a.txt</parameter>
      <parameter name="dst">a.txt</parameter>
    </module>
    <module name="putA" class="transfer">
      <parameter name="direction">upload</parameter>
      <parameter name="src">a.txt</parameter>
      <parameter name="dst">$steering(prefix)/outA.txt</parameter>
    </module>
  </tray>
  <tray name="tB">
    <module name="getB" class="transfer">
      <parameter name="direction">download</parameter>
      <parameter name="src">seeds/%(wf)s/b.txt</parameter>
      <parameter name="dst">b.txt</parameter>
    </module>
    <module name="putB" class="transfer">
      <parameter name="direction">upload</parameter>
      <parameter name="src">b.txt</parameter>
      <parameter name="dst">$steering(prefix)/outB.txt</parameter>
    </module>
  </tray>
  <tray name="tC">
    <module name="getA2" class="transfer">
      <parameter name="direction">download</parameter>
      <parameter name="src">$steering(prefix)/outA.txt</parameter>
      <parameter name="dst">inA.txt</parameter>
    </module>
    <module name="getB2" class="transfer">
      <parameter name="direction">download</parameter>
      <parameter name="src">$steering(prefix)/outB.txt</parameter>
      <parameter name="dst">inB.txt</parameter>
    </module>
    <module name="cat" class="file-concatenate">
      <parameter name="inputs" type="liststring"><item>inA.txt</item><item>inB.txt</item></parameter>
      <parameter name="output">combined.txt</parameter>
    </module>
    <module name="putC" class="transfer">
      <parameter name="direction">upload</parameter>
      <parameter name="src">combined.txt</parameter>
      <parameter name="dst">$steering(prefix)/combined.txt</parameter>
    </module>
  </tray>
%(tasks)s
</configuration>
"""

DAG_TASKS_SECTION = """\
  <task name="A" trays="tA"/>
  <task name="B" trays="tB"/>
  <task name="C" trays="tC"/>
  <taskrel parent="A" child="C"/>
  <taskrel parent="B" child="C"/>
"""


def test_dag_equals_monolithic_digests(tmp_path):
    with criterion("dag-vs-monolithic-50"):
        stack = make_stack(
            tmp_path,
            sites=[site_config(str(tmp_path), "alpha", plugin="local", max_queued=10,
                               poll_interval=0.25, pilot_command=PILOT_CMD)],
            with_submit=False,
            start_loops=True,
            datahandler_interval=0.5,
        )
        try:
            rng = random.Random(1)
            datasets = []
            for i in range(50):
                seed_a = ("wf%d alpha %d\n" % (i, rng.randint(0, 10**9))).encode()
                seed_b = ("wf%d beta %d\n" % (i, rng.randint(0, 10**9))).encode()
                for name, payload in (("a", seed_a), ("b", seed_b)):
                    src = tmp_path / "seed.tmp"
                    src.write_bytes(payload)
                    stack.storage.put(str(src), "seeds/wf%d/%s.txt" % (i, name))
                for mode, tasks in (("dag", DAG_TASKS_SECTION), ("mono", "")):
                    doc = WORKFLOW_DOC % {
                        "prefix": "wf%d_%s" % (i, mode),
                        "wf": "wf%d" % i,
                        "tasks": tasks,
                    }
                    ds = stack.store.create_dataset(parse_steering(doc), "accept")
                    datasets.append((i, mode, ds))

            def finished():
                return all(
                    stack.store.per_state_counts(ds).get(JobState.OK, 0) == 1
                    for _, _, ds in datasets
                )

            assert wait_until(finished, timeout=280, interval=0.5), [
                (i, mode, stack.store.per_state_counts(ds)) for i, mode, ds in datasets
                if stack.store.per_state_counts(ds).get(JobState.OK, 0) != 1
            ][:6]
            for i in range(50):
                for artifact in ("outA.txt", "outB.txt", "combined.txt"):
                    dag_digest = stack.storage.read_digest("wf%d_dag/%s" % (i, artifact))
                    mono_digest = stack.storage.read_digest("wf%d_mono/%s" % (i, artifact))
                    assert dag_digest is not None
                    assert dag_digest == mono_digest, (i, artifact)
            print("\n  50 workflows: DAG and monolithic outputs byte-identical (by digest)")
        finally:
            stack.stop()


def test_dag_gpu_vertex_scheduling(tmp_path):
    with criterion("dag-gpu-placement"):
        doc = _dag_doc(5, [(0, 2), (1, 2), (2, 3), (2, 4)], gpu_vertices={2})
        options = {"start_delay": 0.01, "pilot_runtime": 0.02}
        sites = [
            site_config(str(tmp_path), "cpu-site", options=options),
            site_config(str(tmp_path), "gpu-site", gpu=True, options=options),
        ]
        stack = make_stack(tmp_path, sites=sites, with_submit=False)
        try:
            ds = stack.store.create_dataset(parse_steering(doc), "accept")
            done = wait_until(
                lambda: (stack.cycle_all(), None)[1]
                or all(t.state == JobState.OK for t in stack.store.list_tasks(ds)),
                timeout=60,
            )
            assert done, [(t.task_name, t.state) for t in stack.store.list_tasks(ds)]
            placement = {t.task_name: t.site for t in stack.store.list_tasks(ds)}
            assert placement["t2"] == "gpu-site", placement
            print("\n  GPU-requiring vertex ran on the GPU-capable site only")
        finally:
            stack.stop()


def test_statistics_aggregation_oracle():
    with criterion("stats-aggregation"):
        store = Datastore("sqlite://")
        ds = store.create_dataset(parse_steering(MONO_DOC % 1000), "accept")
        rng = random.Random(8)
        raw = {}
        jobs = store.list_jobs(ds)
        for rec in jobs:
            stat_map = {
                "m%d" % rng.randint(0, 11): rng.uniform(-1e8, 1e8)
                for _ in range(rng.randint(1, 4))
            }
            store.record_stats(rec.key, rec.passkey, stat_map)
            for name, value in stat_map.items():
                raw.setdefault(name, []).append(value)
        agg = store.aggregate_stats(ds)
        assert set(agg) == set(raw)
        for name, values in raw.items():
            got = agg[name]
            assert got.count == len(values)
            assert math.isclose(got.sum, math.fsum(values), rel_tol=1e-9)
            assert math.isclose(got.average, statistics.fmean(values), rel_tol=1e-9)
            assert math.isclose(
                got.stddev, statistics.pstdev(values), rel_tol=1e-9, abs_tol=1e-9
            )

        ds2 = store.create_dataset(parse_steering(MONO_DOC % 3), "accept")
        for rec, v in zip(store.list_jobs(ds2), (1.0, 2.0, 3.0)):
            store.record_stats(rec.key, rec.passkey, {"x": v})
        assert abs(store.aggregate_stats(ds2)["x"].stddev - 0.816497) < 1e-6
        print("\n  1000 StatMaps aggregate to 1e-9 of brute force; population stddev pinned")


def test_golden_submission_scripts(tmp_path):
    with criterion("golden-scripts"):
        from golden_fixtures import golden_fixtures
        from prodkit.gridplugins import create

        golden_dir = Path(__file__).parent / "golden" / "scripts"
        compared = 0
        for site, job in golden_fixtures():
            plugin = create("dialect", site)
            for artifact in plugin.write_config(job, str(tmp_path)):
                name = os.path.basename(artifact)
                assert (golden_dir / name).read_bytes() == Path(artifact).read_bytes(), name
                compared += 1
        assert compared == 30  # 20 scripts + 10 embedded config docs
        print("\n  %d golden artifacts byte-identical" % compared)


def test_steering_roundtrip_1000():
    with criterion("steering-roundtrip-1000"):
        rng = random.Random(20260810)
        for _ in range(1000):
            spec = random_spec(rng)
            assert validate_steering(spec) == []
            assert parse_steering(serialize_steering(spec)) == spec
        print("\n  1000 generated specs round-trip exactly")
