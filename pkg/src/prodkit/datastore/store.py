"""Transactional datastore over any SQL backend SQLAlchemy can reach.

The embedded default is a sqlite file (zero setup); pointing the URL at
an external server uses the same code path. All job/task state mutation
goes through one primitive: a compare-and-swap keyed on the expected
state, so concurrent daemons can never double-apply a transition.
"""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

from sqlalchemy import and_, create_engine, event, exists, func, not_, or_, select
from sqlalchemy.exc import OperationalError
from sqlalchemy.pool import StaticPool

from prodkit import steering as steering_mod
from prodkit.auth import new_passkey_token, tokens_match
from prodkit.datastore import schema
from prodkit.lifecycle import (
    ACTIVE_STATES,
    Event,
    IllegalTransition,
    JobRecord,
    JobState,
    TaskRecord,
    TERMINAL_STATES,
    transition,
)
from prodkit.steering import (
    SteeringSpec,
    parse_steering,
    serialize_steering,
    validate_steering,
)


class DatastoreError(Exception):
    pass


class ValidationFailed(DatastoreError):
    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


class AliasCollision(DatastoreError):
    pass


class StorageUnavailable(DatastoreError):
    pass


class StaleState(DatastoreError):
    pass


class BadPasskey(DatastoreError):
    pass


class UnknownJob(DatastoreError):
    pass


class NonFiniteValue(DatastoreError):
    pass


class DuplicatePath(DatastoreError):
    pass


class DatasetNotGrowable(DatastoreError):
    pass


class UnknownFilter(DatastoreError):
    pass


class UnknownDataset(DatastoreError):
    pass


@dataclass
class StatAggregate:
    count: int
    sum: float
    average: float
    stddev: float


@dataclass
class FileEntry:
    path: str
    size: int = 0
    run_number: int | None = None
    date: str | None = None
    md5: str | None = None


#: job states whose tasks may be claimed / keep running
_TASK_ELIGIBLE_JOB_STATES = ("WAITING", "QUEUEING", "QUEUED", "PROCESSING")


def make_engine(url: str, echo: bool = False):
    kwargs = {"echo": echo}
    if url.startswith("sqlite"):
        kwargs["connect_args"] = {"check_same_thread": False, "timeout": 30}
        if ":memory:" in url or url in ("sqlite://", "sqlite:///"):
            kwargs["poolclass"] = StaticPool
    engine = create_engine(url, **kwargs)
    if url.startswith("sqlite"):
        wal = ":memory:" not in url and url not in ("sqlite://", "sqlite:///")

        @event.listens_for(engine, "connect")
        def _configure(dbapi_conn, _record):
            dbapi_conn.isolation_level = None  # we emit BEGIN ourselves
            cur = dbapi_conn.cursor()
            cur.execute("PRAGMA busy_timeout=30000")
            cur.execute("PRAGMA synchronous=NORMAL")
            cur.execute("PRAGMA foreign_keys=ON")
            if wal:
                cur.execute("PRAGMA journal_mode=WAL")
            cur.close()

        @event.listens_for(engine, "begin")
        def _begin_immediate(conn):
            # take the write lock up front: claim transactions serialize
            # cleanly instead of failing on snapshot upgrade
            conn.exec_driver_sql("BEGIN IMMEDIATE")

    return engine


class Datastore:
    def __init__(self, engine_or_url, create: bool = True):
        if isinstance(engine_or_url, str):
            self.engine = make_engine(engine_or_url)
        else:
            self.engine = engine_or_url
        if create:
            schema.metadata.create_all(self.engine)

    def read_only(self):
        return ReadOnlyDatastore(self)

    @contextmanager
    def _begin(self):
        try:
            with self.engine.begin() as conn:
                yield conn
        except OperationalError as exc:
            raise StorageUnavailable(str(exc)) from exc

    # -- dataset creation --------------------------------------------------

    def create_dataset(self, spec: SteeringSpec, submitter: str) -> int:
        violations = validate_steering(spec)
        if violations:
            raise ValidationFailed(violations)
        now = time.time()
        workflow = "dag" if spec.task_defs else "monolithic"
        with self._begin() as conn:
            if spec.dataset_meta.alias is not None:
                hit = conn.execute(
                    select(schema.dataset.c.dataset_id).where(
                        schema.dataset.c.alias == spec.dataset_meta.alias
                    )
                ).first()
                if hit:
                    raise AliasCollision(spec.dataset_meta.alias)
            dataset_id = conn.execute(
                schema.dataset.insert().values(
                    description=spec.dataset_meta.description,
                    category=spec.dataset_meta.category,
                    job_count=spec.dataset_meta.job_count,
                    alias=spec.dataset_meta.alias,
                    workflow=workflow,
                    submitter=submitter,
                    created_at=now,
                    steering_xml=serialize_steering(spec),
                )
            ).inserted_primary_key[0]
            self._insert_decomposition(conn, dataset_id, spec)
            self._insert_jobs(conn, dataset_id, spec, range(spec.dataset_meta.job_count), now)
        return dataset_id

    def _insert_decomposition(self, conn, dataset_id, spec):
        for i, p in enumerate(spec.parameters):
            conn.execute(
                schema.steering_parameter.insert().values(
                    dataset_id=dataset_id, name=p.name, ordinal=i, value=p.value
                )
            )
        for i, mp in enumerate(spec.metaprojects):
            conn.execute(
                schema.meta_project.insert().values(
                    dataset_id=dataset_id, name=mp.name, ordinal=i, version=mp.version
                )
            )
        for i, tr in enumerate(spec.trays):
            conn.execute(
                schema.tray.insert().values(
                    dataset_id=dataset_id,
                    name=tr.name,
                    ordinal=i,
                    iterations=tr.iterations,
                    metaproject_refs=json.dumps(tr.metaproject_refs),
                )
            )
            for j, mod in enumerate(tr.modules):
                conn.execute(
                    schema.module.insert().values(
                        dataset_id=dataset_id,
                        tray_name=tr.name,
                        name=mod.name,
                        ordinal=j,
                        class_name=mod.class_name,
                        metaproject=mod.metaproject,
                    )
                )
                for k, param in enumerate(mod.parameters):
                    value = (
                        json.dumps(param.value)
                        if param.type == "liststring"
                        else param.value
                    )
                    conn.execute(
                        schema.cparameter.insert().values(
                            dataset_id=dataset_id,
                            tray_name=tr.name,
                            module_name=mod.name,
                            name=param.name,
                            ordinal=k,
                            type=param.type,
                            value=value,
                        )
                    )

    def _insert_jobs(self, conn, dataset_id, spec, indices, now):
        keys = []
        for idx in indices:
            conn.execute(
                schema.job.insert().values(
                    dataset_id=dataset_id,
                    job_index=idx,
                    state=JobState.WAITING.value,
                    retries=0,
                    passkey=new_passkey_token(),
                    last_update=now,
                    state_entered=now,
                    needs_gpu=False,
                    min_memory_mb=0,
                    min_disk_mb=0,
                    max_walltime_s=3600,
                    verified=False,
                )
            )
            keys.append((dataset_id, idx))
            for ordinal, td in enumerate(spec.task_defs):
                r = td.requirements
                conn.execute(
                    schema.task.insert().values(
                        dataset_id=dataset_id,
                        job_index=idx,
                        task_name=td.name,
                        ordinal=ordinal,
                        tray_refs=json.dumps(td.tray_refs),
                        state=JobState.WAITING.value,
                        retries=0,
                        passkey=new_passkey_token(),
                        last_update=now,
                        state_entered=now,
                        needs_gpu=r.needs_gpu,
                        min_memory_mb=r.min_memory_mb,
                        min_disk_mb=r.min_disk_mb,
                        max_walltime_s=r.max_walltime_s,
                    )
                )
            for parent, child in spec.task_edges:
                conn.execute(
                    schema.task_rel.insert().values(
                        dataset_id=dataset_id, job_index=idx, parent=parent, child=child
                    )
                )
        return keys

    # -- record access ------------------------------------------------------

    @staticmethod
    def _job_record(row) -> JobRecord:
        return JobRecord(
            dataset_id=row.dataset_id,
            job_index=row.job_index,
            state=JobState(row.state),
            retries=row.retries,
            passkey=row.passkey,
            host=row.host,
            grid_id=row.grid_id,
            site=row.site,
            last_update=row.last_update,
            state_entered=row.state_entered,
            error_message=row.error_message,
        )

    @staticmethod
    def _task_record(row) -> TaskRecord:
        return TaskRecord(
            dataset_id=row.dataset_id,
            job_index=row.job_index,
            task_name=row.task_name,
            state=JobState(row.state),
            retries=row.retries,
            passkey=row.passkey,
            host=row.host,
            grid_id=row.grid_id,
            site=row.site,
            last_update=row.last_update,
            state_entered=row.state_entered,
            error_message=row.error_message,
        )

    @staticmethod
    def _table_for(key):
        if len(key) == 2:
            return schema.job
        if len(key) == 3:
            return schema.task
        raise ValueError("record key must be (dataset, job) or (dataset, job, task)")

    @staticmethod
    def _key_clause(table, key):
        clause = and_(table.c.dataset_id == key[0], table.c.job_index == key[1])
        if len(key) == 3:
            clause = and_(clause, table.c.task_name == key[2])
        return clause

    def _fetch(self, conn, key):
        table = self._table_for(key)
        row = conn.execute(select(table).where(self._key_clause(table, key))).first()
        if row is None:
            raise UnknownJob(str(key))
        return row

    def get_record(self, key):
        with self._begin() as conn:
            row = self._fetch(conn, key)
        return self._job_record(row) if len(key) == 2 else self._task_record(row)

    # -- claiming -----------------------------------------------------------

    def claim_jobs(self, site: str, capabilities, limit: int):
        """Atomically move up to `limit` eligible records to QUEUEING."""
        if limit < 1:
            raise ValueError("limit must be >= 1")
        now = time.time()
        claimed = []
        with self._begin() as conn:
            gate = self._site_gate(site)
            caps = self._capability_clause(schema.job, capabilities)
            rows = conn.execute(
                select(schema.job)
                .join(schema.dataset, schema.dataset.c.dataset_id == schema.job.c.dataset_id)
                .where(
                    schema.job.c.state == JobState.WAITING.value,
                    schema.dataset.c.workflow == "monolithic",
                    caps,
                    gate,
                )
                .order_by(schema.job.c.dataset_id, schema.job.c.job_index)
                .limit(limit)
            ).fetchall()
            for row in rows:
                ok = conn.execute(
                    schema.job.update()
                    .where(
                        schema.job.c.dataset_id == row.dataset_id,
                        schema.job.c.job_index == row.job_index,
                        schema.job.c.state == JobState.WAITING.value,
                    )
                    .values(
                        state=JobState.QUEUEING.value,
                        site=site,
                        last_update=now,
                        state_entered=now,
                    )
                ).rowcount
                if ok:
                    claimed.append((row.dataset_id, row.job_index))

            remaining = limit - len(claimed)
            task_claims = []
            if remaining > 0:
                task_claims = self._claim_ready_tasks(conn, site, capabilities, remaining, now)

        records = [self.get_record(k) for k in claimed] + task_claims
        return records

    def _claim_ready_tasks(self, conn, site, capabilities, limit, now):
        t = schema.task
        r = schema.task_rel
        p = schema.task.alias("parent_task")
        unfinished_parent = (
            select(r.c.parent)
            .join(
                p,
                and_(
                    p.c.dataset_id == r.c.dataset_id,
                    p.c.job_index == r.c.job_index,
                    p.c.task_name == r.c.parent,
                ),
            )
            .where(
                r.c.dataset_id == t.c.dataset_id,
                r.c.job_index == t.c.job_index,
                r.c.child == t.c.task_name,
                p.c.state != JobState.OK.value,
            )
        )
        rows = conn.execute(
            select(t)
            .join(schema.job, and_(
                schema.job.c.dataset_id == t.c.dataset_id,
                schema.job.c.job_index == t.c.job_index,
            ))
            .join(schema.dataset, schema.dataset.c.dataset_id == t.c.dataset_id)
            .where(
                t.c.state == JobState.WAITING.value,
                schema.job.c.state.in_(_TASK_ELIGIBLE_JOB_STATES),
                self._capability_clause(t, capabilities),
                self._site_gate(site),
                not_(exists(unfinished_parent)),
            )
            .order_by(t.c.dataset_id, t.c.job_index, t.c.ordinal)
            .limit(limit)
        ).fetchall()
        claimed = []
        for row in rows:
            ok = conn.execute(
                t.update()
                .where(
                    t.c.dataset_id == row.dataset_id,
                    t.c.job_index == row.job_index,
                    t.c.task_name == row.task_name,
                    t.c.state == JobState.WAITING.value,
                )
                .values(
                    state=JobState.QUEUEING.value,
                    site=site,
                    last_update=now,
                    state_entered=now,
                )
            ).rowcount
            if not ok:
                continue
            # first claim pulls the whole job out of WAITING
            conn.execute(
                schema.job.update()
                .where(
                    schema.job.c.dataset_id == row.dataset_id,
                    schema.job.c.job_index == row.job_index,
                    schema.job.c.state == JobState.WAITING.value,
                )
                .values(state=JobState.QUEUEING.value, last_update=now, state_entered=now)
            )
            fresh = conn.execute(
                select(t).where(
                    t.c.dataset_id == row.dataset_id,
                    t.c.job_index == row.job_index,
                    t.c.task_name == row.task_name,
                )
            ).first()
            claimed.append(self._task_record(fresh))
        return claimed

    @staticmethod
    def _capability_clause(table, caps):
        clauses = [
            table.c.min_memory_mb <= caps.max_memory_mb,
            table.c.min_disk_mb <= caps.max_disk_mb,
            table.c.max_walltime_s <= caps.max_walltime_s,
        ]
        if not caps.has_gpu:
            clauses.append(table.c.needs_gpu.is_(False))
        return and_(*clauses)

    @staticmethod
    def _site_gate(site):
        g = schema.grid_statistics
        d = schema.dataset
        stopped_here = exists(
            select(g.c.site_id).where(
                g.c.dataset_id == d.c.dataset_id,
                g.c.site_id == site,
                g.c.status == "stopped",
            )
        )
        any_assigned = exists(
            select(g.c.site_id).where(
                g.c.dataset_id == d.c.dataset_id, g.c.assigned.is_(True)
            )
        )
        assigned_here = exists(
            select(g.c.site_id).where(
                g.c.dataset_id == d.c.dataset_id,
                g.c.site_id == site,
                g.c.assigned.is_(True),
            )
        )
        return and_(not_(stopped_here), or_(not_(any_assigned), assigned_here))

    # -- state mutation -----------------------------------------------------

    def update_job_state(
        self,
        key,
        expected_state: JobState,
        event: Event,
        passkey: str | None = None,
        host: str | None = None,
        error_message: str | None = None,
        grid_id: str | None = None,
    ) -> JobState:
        """CAS transition; extra effects keyed on the entered state."""
        table = self._table_for(key)
        now = time.time()
        with self._begin() as conn:
            row = self._fetch(conn, key)
            if passkey is not None and not tokens_match(row.passkey, passkey):
                raise BadPasskey(str(key))
            new_state = transition(expected_state, event)
            values = {"state": new_state.value, "last_update": now, "state_entered": now}
            if event == Event.RETRY_GRANTED:
                values["retries"] = row.retries + 1
            if event == Event.OPERATOR_RESET:
                values["retries"] = 0
            if new_state == JobState.RESET:
                values["passkey"] = new_passkey_token()
                if table is schema.job:
                    conn.execute(
                        schema.job_statistics.delete().where(
                            schema.job_statistics.c.dataset_id == key[0],
                            schema.job_statistics.c.job_index == key[1],
                        )
                    )
            if new_state == JobState.PROCESSING and host is not None:
                values["host"] = host
            if new_state == JobState.ERROR:
                values["error_message"] = error_message or "error reported"
            if new_state == JobState.WAITING:
                values.update(site=None, grid_id=None, host=None, error_message=None)
                if table is schema.job:
                    values["verified"] = False
            if grid_id is not None:
                values["grid_id"] = grid_id
            done = conn.execute(
                table.update()
                .where(
                    self._key_clause(table, key),
                    table.c.state == expected_state.value,
                )
                .values(**values)
            ).rowcount
            if done != 1:
                raise StaleState("%s is no longer in %s" % (key, expected_state.value))
            if table is schema.job and new_state == JobState.WAITING:
                self._reset_tasks_of_job(conn, key[0], key[1], now)
        return new_state

    def _reset_tasks_of_job(self, conn, dataset_id, job_index, now):
        conn.execute(
            schema.task.update()
            .where(
                schema.task.c.dataset_id == dataset_id,
                schema.task.c.job_index == job_index,
            )
            .values(
                state=JobState.WAITING.value,
                retries=0,
                passkey=new_passkey_token(),
                site=None,
                grid_id=None,
                host=None,
                error_message=None,
                last_update=now,
                state_entered=now,
            )
        )

    def integrity_flip(self, key, message: str) -> JobState:
        """Post-verification correction: a job whose stored outputs fail
        their digest check leaves OK for ERROR so the retry policy can
        re-produce it. This is the one state change outside the normal
        event table (which has no arcs out of OK); it is still a CAS.
        """
        now = time.time()
        with self._begin() as conn:
            self._fetch(conn, key)
            table = self._table_for(key)
            done = conn.execute(
                table.update()
                .where(
                    self._key_clause(table, key),
                    table.c.state == JobState.OK.value,
                )
                .values(
                    state=JobState.ERROR.value,
                    error_message=message,
                    last_update=now,
                    state_entered=now,
                )
            ).rowcount
            if done != 1:
                raise StaleState("%s is no longer OK" % (key,))
        return JobState.ERROR

    def touch(self, key, passkey: str | None = None):
        """keepalive: refresh last_update only."""
        table = self._table_for(key)
        with self._begin() as conn:
            row = self._fetch(conn, key)
            if passkey is not None and not tokens_match(row.passkey, passkey):
                raise BadPasskey(str(key))
            conn.execute(
                table.update()
                .where(self._key_clause(table, key))
                .values(last_update=time.time())
            )

    def set_grid_id(self, key, grid_id):
        table = self._table_for(key)
        with self._begin() as conn:
            conn.execute(
                table.update().where(self._key_clause(table, key)).values(grid_id=grid_id)
            )

    def set_verified(self, key, flag=True):
        with self._begin() as conn:
            conn.execute(
                schema.job.update()
                .where(self._key_clause(schema.job, key))
                .values(verified=bool(flag))
            )

    # -- operator actions ---------------------------------------------------

    def force_reset(self, key) -> JobState:
        """Operator reset, composed from the state machine's own arcs."""
        record = self.get_record(key)
        state = record.state
        if state in (JobState.RESET, JobState.CLEANING, JobState.WAITING):
            return state
        if state == JobState.FAILED:
            return self.update_job_state(key, state, Event.OPERATOR_RESET)
        if state == JobState.SUSPENDED:
            return self.update_job_state(key, state, Event.OPERATOR_RESUME)
        if state == JobState.ERROR:
            self.update_job_state(key, state, Event.OPERATOR_SUSPEND)
            return self.update_job_state(key, JobState.SUSPENDED, Event.OPERATOR_RESUME)
        if state in ACTIVE_STATES:
            return self.update_job_state(key, state, Event.TIMEOUT_EXPIRED)
        raise IllegalTransition(state, Event.OPERATOR_RESET)

    def suspend(self, key) -> JobState:
        record = self.get_record(key)
        return self.update_job_state(key, record.state, Event.OPERATOR_SUSPEND)

    def resume(self, key) -> JobState:
        record = self.get_record(key)
        return self.update_job_state(key, record.state, Event.OPERATOR_RESUME)

    def control_dataset(self, dataset_id: int, action: str) -> dict:
        """suspend | resume | reset across every record of a dataset."""
        handler = {"suspend": self.suspend, "resume": self.resume, "reset": self.force_reset}.get(
            action
        )
        if handler is None:
            raise ValueError("unknown control action %r" % action)
        self.dataset_info(dataset_id)  # UnknownDataset for bad ids
        applied = 0
        skipped = 0
        for record in self.list_jobs(dataset_id) + self.list_tasks(dataset_id):
            try:
                handler(record.key)
                applied += 1
            except (IllegalTransition, StaleState):
                skipped += 1
        return {"applied": applied, "skipped": skipped}

    # -- passkeys -----------------------------------------------------------

    def issue_passkey(self, key) -> str:
        table = self._table_for(key)
        token = new_passkey_token()
        with self._begin() as conn:
            self._fetch(conn, key)
            conn.execute(
                table.update().where(self._key_clause(table, key)).values(passkey=token)
            )
        return token

    def validate_passkey(self, key, token: str) -> bool:
        with self._begin() as conn:
            row = self._fetch(conn, key)
        return tokens_match(row.passkey, token)

    # -- statistics -----------------------------------------------------------

    def record_stats(self, key, passkey: str | None, stats: dict):
        if len(key) not in (2, 3):
            raise ValueError("bad record key")
        for name, value in stats.items():
            if not name or not isinstance(name, str):
                raise NonFiniteValue("statistic names must be nonempty strings")
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise NonFiniteValue("statistic %r has non-finite value %r" % (name, value))
        with self._begin() as conn:
            row = self._fetch(conn, key)
            if passkey is not None and not tokens_match(row.passkey, passkey):
                raise BadPasskey(str(key))
            js = schema.job_statistics
            for name, value in stats.items():
                updated = conn.execute(
                    js.update()
                    .where(
                        js.c.dataset_id == key[0],
                        js.c.job_index == key[1],
                        js.c.name == name,
                    )
                    .values(value=float(value))
                ).rowcount
                if not updated:
                    conn.execute(
                        js.insert().values(
                            dataset_id=key[0], job_index=key[1], name=name, value=float(value)
                        )
                    )

    def aggregate_stats(self, dataset_id: int) -> dict:
        """Per name: count, sum, mean, population stddev (two-pass)."""
        js = schema.job_statistics
        with self._begin() as conn:
            rows = conn.execute(
                select(js.c.name, js.c.value).where(js.c.dataset_id == dataset_id)
            ).fetchall()
        by_name = {}
        for name, value in rows:
            by_name.setdefault(name, []).append(value)
        out = {}
        for name, values in sorted(by_name.items()):
            n = len(values)
            total = math.fsum(values)
            mean = total / n
            variance = math.fsum((v - mean) ** 2 for v in values) / n
            out[name] = StatAggregate(count=n, sum=total, average=mean, stddev=math.sqrt(variance))
        return out

    def job_stats(self, key) -> dict:
        js = schema.job_statistics
        with self._begin() as conn:
            rows = conn.execute(
                select(js.c.name, js.c.value).where(
                    js.c.dataset_id == key[0], js.c.job_index == key[1]
                )
            ).fetchall()
        return {name: value for name, value in rows}

    # -- off-line growth ------------------------------------------------------

    def grow_dataset(self, dataset_id: int, file_manifest, group_size: int = 1):
        """Map input files onto new jobs; returns the new job keys."""
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        entries = [e if isinstance(e, FileEntry) else FileEntry(*e) for e in file_manifest]
        seen = set()
        for e in entries:
            if e.path in seen:
                raise DuplicatePath(e.path)
            seen.add(e.path)
        now = time.time()
        with self._begin() as conn:
            ds = conn.execute(
                select(schema.dataset).where(schema.dataset.c.dataset_id == dataset_id)
            ).first()
            if ds is None:
                raise UnknownDataset(str(dataset_id))
            if ds.job_count != 0:
                raise DatasetNotGrowable(
                    "dataset %d declared %d jobs; only zero-job datasets grow"
                    % (dataset_id, ds.job_count)
                )
            existing = conn.execute(
                select(schema.run.c.path).where(
                    schema.run.c.dataset_id == dataset_id, schema.run.c.kind == "input"
                )
            ).fetchall()
            existing_paths = {r.path for r in existing}
            for e in entries:
                if e.path in existing_paths:
                    raise DuplicatePath(e.path)
            next_index = conn.execute(
                select(func.coalesce(func.max(schema.job.c.job_index), -1)).where(
                    schema.job.c.dataset_id == dataset_id
                )
            ).scalar_one() + 1

            spec = self._load_spec(conn, dataset_id)
            new_keys = []
            for start in range(0, len(entries), group_size):
                group = entries[start : start + group_size]
                idx = next_index
                next_index += 1
                self._insert_jobs(conn, dataset_id, spec, [idx], now)
                new_keys.append((dataset_id, idx))
                for e in group:
                    conn.execute(
                        schema.run.insert().values(
                            dataset_id=dataset_id,
                            kind="input",
                            path=e.path,
                            job_index=idx,
                            run_number=e.run_number,
                            date=e.date,
                            size=e.size,
                            md5=e.md5,
                        )
                    )
        return new_keys

    # -- file catalog -----------------------------------------------------------

    def record_output_files(self, key, outputs):
        """outputs: iterable of {path, size, md5} dicts from job_finished."""
        with self._begin() as conn:
            for out in outputs:
                r = schema.run
                clause = and_(
                    r.c.dataset_id == key[0], r.c.kind == "output", r.c.path == out["path"]
                )
                updated = conn.execute(
                    r.update()
                    .where(clause)
                    .values(
                        job_index=key[1],
                        task_name=key[2] if len(key) == 3 else None,
                        size=int(out.get("size", 0)),
                        md5=out.get("md5"),
                    )
                ).rowcount
                if not updated:
                    conn.execute(
                        r.insert().values(
                            dataset_id=key[0],
                            kind="output",
                            path=out["path"],
                            job_index=key[1],
                            task_name=key[2] if len(key) == 3 else None,
                            size=int(out.get("size", 0)),
                            md5=out.get("md5"),
                        )
                    )

    def list_output_files(self, dataset_id, job_index=None):
        r = schema.run
        clause = and_(r.c.dataset_id == dataset_id, r.c.kind == "output")
        if job_index is not None:
            clause = and_(clause, r.c.job_index == job_index)
        with self._begin() as conn:
            rows = conn.execute(select(r).where(clause).order_by(r.c.path)).fetchall()
        return [dict(row._mapping) for row in rows]

    def list_runs(self, dataset_id):
        r = schema.run
        with self._begin() as conn:
            rows = conn.execute(
                select(r)
                .where(r.c.dataset_id == dataset_id, r.c.kind == "input")
                .order_by(r.c.run_number, r.c.path)
            ).fetchall()
        return [dict(row._mapping) for row in rows]

    # -- site assignment / counters ----------------------------------------------

    def assign_site(self, dataset_id, site_id):
        self._upsert_grid(dataset_id, site_id, assigned=True, status="active")

    def remove_site(self, dataset_id, site_id):
        self._upsert_grid(dataset_id, site_id, assigned=False)

    def set_site_status(self, dataset_id, site_id, status):
        if status not in ("active", "stopped"):
            raise ValueError(status)
        self._upsert_grid(dataset_id, site_id, status=status)

    def _upsert_grid(self, dataset_id, site_id, **fields):
        g = schema.grid_statistics
        fields["updated_at"] = time.time()
        with self._begin() as conn:
            updated = conn.execute(
                g.update()
                .where(g.c.dataset_id == dataset_id, g.c.site_id == site_id)
                .values(**fields)
            ).rowcount
            if not updated:
                conn.execute(
                    g.insert().values(
                        dataset_id=dataset_id,
                        site_id=site_id,
                        assigned=fields.get("assigned", False),
                        status=fields.get("status", "active"),
                        submitted=fields.get("submitted", 0),
                        finished=fields.get("finished", 0),
                        errors=fields.get("errors", 0),
                        updated_at=fields["updated_at"],
                    )
                )

    def bump_site_counters(self, dataset_id, site_id, submitted=0, finished=0, errors=0):
        g = schema.grid_statistics
        with self._begin() as conn:
            row = conn.execute(
                select(g).where(g.c.dataset_id == dataset_id, g.c.site_id == site_id)
            ).first()
            if row is None:
                conn.execute(
                    g.insert().values(
                        dataset_id=dataset_id,
                        site_id=site_id,
                        assigned=False,
                        status="active",
                        submitted=submitted,
                        finished=finished,
                        errors=errors,
                        updated_at=time.time(),
                    )
                )
            else:
                conn.execute(
                    g.update()
                    .where(g.c.dataset_id == dataset_id, g.c.site_id == site_id)
                    .values(
                        submitted=row.submitted + submitted,
                        finished=row.finished + finished,
                        errors=row.errors + errors,
                        updated_at=time.time(),
                    )
                )

    # -- listings used by daemons -------------------------------------------------

    def list_jobs(self, dataset_id, state=None):
        j = schema.job
        clause = j.c.dataset_id == dataset_id
        if state is not None:
            clause = and_(clause, j.c.state == state.value)
        with self._begin() as conn:
            rows = conn.execute(
                select(j).where(clause).order_by(j.c.job_index)
            ).fetchall()
        return [self._job_record(r) for r in rows]

    def list_tasks(self, dataset_id, job_index=None):
        t = schema.task
        clause = t.c.dataset_id == dataset_id
        if job_index is not None:
            clause = and_(clause, t.c.job_index == job_index)
        with self._begin() as conn:
            rows = conn.execute(
                select(t).where(clause).order_by(t.c.job_index, t.c.ordinal)
            ).fetchall()
        return [self._task_record(r) for r in rows]

    def records_for_site(self, site):
        """Everything a site owns, jobs and tasks."""
        with self._begin() as conn:
            jrows = conn.execute(
                select(schema.job).where(schema.job.c.site == site)
            ).fetchall()
            trows = conn.execute(
                select(schema.task).where(schema.task.c.site == site)
            ).fetchall()
        return [self._job_record(r) for r in jrows] + [self._task_record(r) for r in trows]

    def all_live_records(self):
        """Every job/task row outside terminal states (timeout sweeps)."""
        terminal = tuple(s.value for s in TERMINAL_STATES)
        with self._begin() as conn:
            jrows = conn.execute(
                select(schema.job).where(schema.job.c.state.not_in(terminal))
            ).fetchall()
            trows = conn.execute(
                select(schema.task).where(schema.task.c.state.not_in(terminal))
            ).fetchall()
        return [self._job_record(r) for r in jrows] + [self._task_record(r) for r in trows]

    def records_in_state(self, state: JobState):
        with self._begin() as conn:
            jrows = conn.execute(
                select(schema.job).where(schema.job.c.state == state.value)
            ).fetchall()
            trows = conn.execute(
                select(schema.task).where(schema.task.c.state == state.value)
            ).fetchall()
        return [self._job_record(r) for r in jrows] + [self._task_record(r) for r in trows]

    def unverified_ok_jobs(self):
        j = schema.job
        with self._begin() as conn:
            rows = conn.execute(
                select(j).where(j.c.state == JobState.OK.value, j.c.verified.is_(False))
            ).fetchall()
        return [self._job_record(r) for r in rows]

    def stranded_tasks(self, site):
        """Tasks a site owns whose job has left the running set (fail fast)."""
        t = schema.task
        j = schema.job
        with self._begin() as conn:
            rows = conn.execute(
                select(t)
                .join(j, and_(j.c.dataset_id == t.c.dataset_id, j.c.job_index == t.c.job_index))
                .where(
                    t.c.site == site,
                    t.c.state.in_(tuple(s.value for s in ACTIVE_STATES)),
                    j.c.state.not_in(_TASK_ELIGIBLE_JOB_STATES),
                )
            ).fetchall()
        return [self._task_record(r) for r in rows]

    def active_count_for_site(self, site):
        active = tuple(s.value for s in ACTIVE_STATES)
        with self._begin() as conn:
            jobs = conn.execute(
                select(func.count())
                .select_from(schema.job)
                .where(schema.job.c.site == site, schema.job.c.state.in_(active))
            ).scalar_one()
            # only count task rows, not their aggregate job rows, for dag work
            d = schema.dataset
            dag_jobs = conn.execute(
                select(func.count())
                .select_from(schema.job.join(d, d.c.dataset_id == schema.job.c.dataset_id))
                .where(
                    schema.job.c.site == site,
                    schema.job.c.state.in_(active),
                    d.c.workflow == "dag",
                )
            ).scalar_one()
            tasks = conn.execute(
                select(func.count())
                .select_from(schema.task)
                .where(schema.task.c.site == site, schema.task.c.state.in_(active))
            ).scalar_one()
        return jobs - dag_jobs + tasks

    def per_state_counts(self, dataset_id):
        j = schema.job
        with self._begin() as conn:
            rows = conn.execute(
                select(j.c.state, func.count())
                .where(j.c.dataset_id == dataset_id)
                .group_by(j.c.state)
            ).fetchall()
        return {JobState(state): count for state, count in rows}

    def job_total(self, dataset_id):
        with self._begin() as conn:
            return conn.execute(
                select(func.count())
                .select_from(schema.job)
                .where(schema.job.c.dataset_id == dataset_id)
            ).scalar_one()

    def dataset_info(self, dataset_id):
        with self._begin() as conn:
            row = conn.execute(
                select(schema.dataset).where(schema.dataset.c.dataset_id == dataset_id)
            ).first()
        if row is None:
            raise UnknownDataset(str(dataset_id))
        return dict(row._mapping)

    def list_datasets(self):
        with self._begin() as conn:
            rows = conn.execute(
                select(schema.dataset).order_by(schema.dataset.c.dataset_id)
            ).fetchall()
        return [dict(row._mapping) for row in rows]

    # -- steering reassembly ----------------------------------------------------

    def _load_spec(self, conn, dataset_id) -> SteeringSpec:
        ds = conn.execute(
            select(schema.dataset).where(schema.dataset.c.dataset_id == dataset_id)
        ).first()
        if ds is None:
            raise UnknownDataset(str(dataset_id))
        spec = SteeringSpec()
        spec.dataset_meta = steering_mod.DatasetMeta(
            description=ds.description,
            category=ds.category,
            job_count=ds.job_count,
            alias=ds.alias,
        )
        sp = schema.steering_parameter
        for row in conn.execute(
            select(sp).where(sp.c.dataset_id == dataset_id).order_by(sp.c.ordinal)
        ):
            spec.parameters.append(steering_mod.SteeringParam(name=row.name, value=row.value))
        mp = schema.meta_project
        for row in conn.execute(
            select(mp).where(mp.c.dataset_id == dataset_id).order_by(mp.c.ordinal)
        ):
            spec.metaprojects.append(
                steering_mod.Metaproject(name=row.name, version=row.version)
            )
        tr = schema.tray
        mo = schema.module
        cp = schema.cparameter
        for trow in conn.execute(
            select(tr).where(tr.c.dataset_id == dataset_id).order_by(tr.c.ordinal)
        ):
            tray = steering_mod.Tray(
                name=trow.name,
                iterations=trow.iterations,
                metaproject_refs=json.loads(trow.metaproject_refs),
            )
            for mrow in conn.execute(
                select(mo)
                .where(mo.c.dataset_id == dataset_id, mo.c.tray_name == trow.name)
                .order_by(mo.c.ordinal)
            ):
                inst = steering_mod.ModuleInstance(
                    name=mrow.name, class_name=mrow.class_name, metaproject=mrow.metaproject
                )
                for prow in conn.execute(
                    select(cp)
                    .where(
                        cp.c.dataset_id == dataset_id,
                        cp.c.tray_name == trow.name,
                        cp.c.module_name == mrow.name,
                    )
                    .order_by(cp.c.ordinal)
                ):
                    value = json.loads(prow.value) if prow.type == "liststring" else prow.value
                    inst.parameters.append(
                        steering_mod.ModuleParam(name=prow.name, type=prow.type, value=value)
                    )
                tray.modules.append(inst)
            spec.trays.append(tray)

        # task definitions are configuration, not per-job state; a zero-job
        # off-line dataset has no task rows, so they come from the stored
        # canonical document
        if ds.steering_xml:
            stored = parse_steering(ds.steering_xml)
            spec.task_defs = stored.task_defs
            spec.task_edges = stored.task_edges
        return spec

    def get_steering_document(self, dataset_id) -> tuple[str, int]:
        """Reassembled steering XML plus the effective job count."""
        with self._begin() as conn:
            spec = self._load_spec(conn, dataset_id)
            total = conn.execute(
                select(func.count())
                .select_from(schema.job)
                .where(schema.job.c.dataset_id == dataset_id)
            ).scalar_one()
        effective = spec.dataset_meta.job_count or total
        return serialize_steering(spec), effective

    def get_spec(self, dataset_id) -> SteeringSpec:
        with self._begin() as conn:
            return self._load_spec(conn, dataset_id)

    # -- views ------------------------------------------------------------------

    _VIEW_FILTERS = {
        "general": {"status", "category", "grid"},
        "grid": {"grid"},
        "dataset": {"dataset_id", "status"},
        "job": {"dataset_id", "job_index"},
    }

    def query_view(self, view: str, filters: dict | None = None):
        filters = dict(filters or {})
        if view not in self._VIEW_FILTERS:
            raise UnknownFilter("unknown view %r" % view)
        unknown = set(filters) - self._VIEW_FILTERS[view]
        if unknown:
            raise UnknownFilter("unknown filter(s) %s for %s view" % (sorted(unknown), view))
        if view == "general":
            return self._view_general(filters)
        if view == "grid":
            if "grid" not in filters:
                raise UnknownFilter("grid view requires a grid filter")
            return self._view_grid(filters["grid"])
        if view == "dataset":
            if "dataset_id" not in filters:
                raise UnknownFilter("dataset view requires dataset_id")
            return self._view_dataset(int(filters["dataset_id"]), filters.get("status"))
        if "dataset_id" not in filters or "job_index" not in filters:
            raise UnknownFilter("job view requires dataset_id and job_index")
        return self._view_job(int(filters["dataset_id"]), int(filters["job_index"]))

    def _view_general(self, filters):
        out = []
        for ds in self.list_datasets():
            counts = self.per_state_counts(ds["dataset_id"])
            if "category" in filters and ds["category"] != filters["category"]:
                continue
            if "status" in filters:
                wanted = JobState(filters["status"])
                if counts.get(wanted, 0) == 0:
                    continue
            if "grid" in filters:
                sites = self._dataset_sites(ds["dataset_id"])
                if filters["grid"] not in sites:
                    continue
            out.append(
                {
                    "dataset_id": ds["dataset_id"],
                    "description": ds["description"],
                    "category": ds["category"],
                    "alias": ds["alias"],
                    "workflow": ds["workflow"],
                    # declared count; 0 marks an off-line (grown) dataset
                    "declared_jobs": ds["job_count"],
                    "total_jobs": sum(counts.values()),
                    "states": {s.value: n for s, n in sorted(counts.items(), key=lambda kv: kv[0].value)},
                }
            )
        return out

    def _dataset_sites(self, dataset_id):
        g = schema.grid_statistics
        with self._begin() as conn:
            rows = conn.execute(select(g.c.site_id).where(g.c.dataset_id == dataset_id)).fetchall()
            jrows = conn.execute(
                select(schema.job.c.site)
                .where(schema.job.c.dataset_id == dataset_id, schema.job.c.site.is_not(None))
                .distinct()
            ).fetchall()
        return {r.site_id for r in rows} | {r.site for r in jrows}

    def _view_grid(self, site):
        g = schema.grid_statistics
        with self._begin() as conn:
            rows = conn.execute(select(g).where(g.c.site_id == site)).fetchall()
        known = {r.dataset_id: dict(r._mapping) for r in rows}
        out = []
        for ds in self.list_datasets():
            did = ds["dataset_id"]
            live = [r for r in self.records_for_site(site) if r.dataset_id == did]
            if did not in known and not live:
                continue
            entry = known.get(
                did,
                {"dataset_id": did, "site_id": site, "status": "active", "submitted": 0, "finished": 0, "errors": 0},
            )
            entry = dict(entry)
            entry["owned_active"] = len(live)
            out.append(entry)
        return out

    def _view_dataset(self, dataset_id, status=None):
        rows = []
        for rec in self.list_jobs(dataset_id):
            if status is not None and rec.state.value != status:
                continue
            rows.append(
                {
                    "dataset_id": rec.dataset_id,
                    "job_index": rec.job_index,
                    "state": rec.state.value,
                    "retries": rec.retries,
                    "site": rec.site,
                    "host": rec.host,
                    "error": rec.error_message,
                    "stats": self.job_stats(rec.key),
                }
            )
        return rows

    def _view_job(self, dataset_id, job_index):
        try:
            rec = self.get_record((dataset_id, job_index))
        except UnknownJob:
            return []
        tasks = [
            {
                "task_name": t.task_name,
                "state": t.state.value,
                "retries": t.retries,
                "site": t.site,
                "host": t.host,
                "error": t.error_message,
            }
            for t in self.list_tasks(dataset_id, job_index)
        ]
        return [
            {
                "dataset_id": rec.dataset_id,
                "job_index": rec.job_index,
                "state": rec.state.value,
                "retries": rec.retries,
                "site": rec.site,
                "host": rec.host,
                "error": rec.error_message,
                "stats": self.job_stats(rec.key),
                "tasks": tasks,
            }
        ]


class ReadOnlyDatastore:
    """Monitoring role: query surface only, no mutation methods."""

    _ALLOWED = (
        "query_view",
        "aggregate_stats",
        "per_state_counts",
        "job_total",
        "dataset_info",
        "list_datasets",
        "list_jobs",
        "list_tasks",
        "list_runs",
        "list_output_files",
        "job_stats",
        "get_record",
        "get_steering_document",
    )

    def __init__(self, store: Datastore):
        for name in self._ALLOWED:
            setattr(self, name, getattr(store, name))
