import json
import urllib.request

import pytest

from harness import MONO_DOC, make_stack, site_config, wait_until
from prodkit.lifecycle import JobState
from prodkit.steering import parse_steering


@pytest.fixture
def stack(tmp_path):
    s = make_stack(
        tmp_path,
        users={"op": "hunter2"},
        sites=[site_config(str(tmp_path), "alpha", options={"start_delay": 30})],
    )
    yield s
    s.stop()


class Browser:
    """Tiny cookie-holding client."""

    def __init__(self, base):
        self.base = base
        self.cookie = None

    def request(self, verb, path, doc=None):
        req = urllib.request.Request(
            self.base + path,
            data=json.dumps(doc).encode() if doc is not None else None,
            method=verb,
        )
        if doc is not None:
            req.add_header("Content-Type", "application/json")
        if self.cookie:
            req.add_header("Cookie", self.cookie)
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                cookie = resp.headers.get("Set-Cookie")
                if cookie:
                    self.cookie = cookie.split(";")[0]
                return resp.status, json.loads(resp.read().decode())
        except urllib.error.HTTPError as err:
            return err.code, json.loads(err.read().decode())

    def login(self, username, secret):
        return self.request("POST", "/api/login", {"username": username, "secret": secret})


def test_reads_require_session(stack):
    browser = Browser(stack.submit_url)
    status, doc = browser.request("GET", "/api/datasets")
    assert status == 401
    status, _ = browser.request(
        "POST", "/api/control", {"scope": "dataset", "dataset_id": 1, "action": "suspend"}
    )
    assert status == 401  # no write endpoint reachable without a session


def test_bad_login_rejected(stack):
    browser = Browser(stack.submit_url)
    status, _ = browser.login("op", "wrong")
    assert status == 401
    status, _ = browser.login("ghost", "hunter2")
    assert status == 401


def test_views_and_control_roundtrip(stack):
    ds = stack.store.create_dataset(parse_steering(MONO_DOC % 4), "op")
    stack.sites["alpha"].cycle()  # 4 jobs queued, mock pilots stay silent

    browser = Browser(stack.submit_url)
    status, doc = browser.login("op", "hunter2")
    assert status == 200 and doc["username"] == "op"

    status, doc = browser.request("GET", "/api/datasets")
    assert status == 200
    row = next(d for d in doc["datasets"] if d["dataset_id"] == ds)
    assert row["states"].get("QUEUED") == 4

    status, doc = browser.request("GET", "/api/datasets/%d/jobs" % ds)
    assert status == 200 and len(doc["jobs"]) == 4

    status, doc = browser.request("GET", "/api/jobs/%d.0" % ds)
    assert status == 200 and doc["job"]["state"] == "QUEUED"

    # suspend one job from the browser
    status, doc = browser.request(
        "POST",
        "/api/control",
        {"scope": "job", "dataset_id": ds, "job_index": 0, "action": "suspend"},
    )
    assert status == 200
    assert stack.store.get_record((ds, 0)).state == JobState.SUSPENDED

    # dataset-wide suspend covers the rest
    status, doc = browser.request(
        "POST", "/api/control", {"scope": "dataset", "dataset_id": ds, "action": "suspend"}
    )
    assert status == 200
    states = {j.state for j in stack.store.list_jobs(ds)}
    assert states == {JobState.SUSPENDED}

    # action failures surface inline with fault text
    status, doc = browser.request(
        "POST",
        "/api/control",
        {"scope": "job", "dataset_id": ds, "job_index": 0, "action": "explode"},
    )
    assert status == 400
    assert "explode" in doc["error"]


def test_stats_and_runs_views(stack):
    ds = stack.store.create_dataset(parse_steering(MONO_DOC % 2), "op")
    rec = stack.store.get_record((ds, 0))
    stack.store.record_stats(rec.key, rec.passkey, {"events": 10.0})
    browser = Browser(stack.submit_url)
    browser.login("op", "hunter2")
    status, doc = browser.request("GET", "/api/datasets/%d/stats" % ds)
    assert status == 200
    assert doc["stats"]["events"]["count"] == 1
    status, doc = browser.request("GET", "/api/datasets/%d/runs" % ds)
    assert status == 200 and doc["runs"] == []
