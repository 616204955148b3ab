"""Per-job task DAG: construction, ready-set computation, completion events.

Decisions made here are pure graph functions; the queue daemons and the
datastore apply them transactionally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from prodkit.lifecycle import Event, JobState
from prodkit.steering import ResourceRequirements, SteeringSpec, TaskDef

#: name given to the implicit single task of a monolithic spec
MONOLITHIC_TASK = "job"


@dataclass(frozen=True)
class SiteCapabilities:
    """What one site can offer a task."""

    has_gpu: bool = False
    max_memory_mb: int = 4096
    max_disk_mb: int = 10240
    max_walltime_s: int = 86400


class CycleDetected(Exception):
    pass


class DanglingRef(Exception):
    pass


@dataclass
class TaskDag:
    """Vertices in declaration order; edges parent -> child."""

    vertices: list[str] = field(default_factory=list)
    requirements: dict[str, ResourceRequirements] = field(default_factory=dict)
    tray_refs: dict[str, list[str]] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def parents(self):
        out = {name: [] for name in self.vertices}
        for p, c in self.edges:
            out[c].append(p)
        return out

    @property
    def children(self):
        out = {name: [] for name in self.vertices}
        for p, c in self.edges:
            out[p].append(c)
        return out

    @property
    def roots(self):
        with_parent = {c for _, c in self.edges}
        return [v for v in self.vertices if v not in with_parent]

    @property
    def leaves(self):
        with_child = {p for p, _ in self.edges}
        return [v for v in self.vertices if v not in with_child]


def effective_tasks(spec: SteeringSpec) -> list[TaskDef]:
    """Declared tasks, or the implicit whole-job task for monolithic specs."""
    if spec.task_defs:
        return spec.task_defs
    return [
        TaskDef(
            name=MONOLITHIC_TASK,
            tray_refs=[t.name for t in spec.trays],
            requirements=ResourceRequirements(),
        )
    ]


def build_dag(spec: SteeringSpec) -> TaskDag:
    """One vertex per task, one edge per declared relation; rejects cycles."""
    tasks = effective_tasks(spec)
    dag = TaskDag()
    for t in tasks:
        dag.vertices.append(t.name)
        dag.requirements[t.name] = t.requirements
        dag.tray_refs[t.name] = list(t.tray_refs)
    names = set(dag.vertices)
    for parent, child in spec.task_edges:
        if parent not in names or child not in names:
            raise DanglingRef("edge %s -> %s references an undeclared task" % (parent, child))
        dag.edges.append((parent, child))

    # Kahn: everything must drain or there is a cycle
    indeg = {v: 0 for v in dag.vertices}
    for _, c in dag.edges:
        indeg[c] += 1
    queue = [v for v in dag.vertices if indeg[v] == 0]
    drained = 0
    children = dag.children
    while queue:
        v = queue.pop()
        drained += 1
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if drained != len(dag.vertices):
        stuck = sorted(v for v, d in indeg.items() if d > 0)
        raise CycleDetected("cycle through %s" % ", ".join(stuck))
    return dag


def ready_tasks(dag: TaskDag, states: dict[str, JobState]) -> list[str]:
    """Tasks that are WAITING with every parent OK, in declaration order."""
    parents = dag.parents
    return [
        v
        for v in dag.vertices
        if states.get(v) == JobState.WAITING
        and all(states.get(p) == JobState.OK for p in parents[v])
    ]


@dataclass
class CompletionOutcome:
    """Result of applying one task outcome to the job's DAG."""

    newly_ready: list[str] = field(default_factory=list)
    job_event: Event | None = None
    cancel: list[str] = field(default_factory=list)


def on_task_complete(dag: TaskDag, task: str, outcome: JobState, states: dict) -> CompletionOutcome:
    """Plan after `task` settles: unlock children, or raise a job-level event.

    Works whether or not `states` already records the settled outcome for
    `task`. A FAILED task dooms the job (fail fast): running siblings are
    cancelled.
    """
    result = CompletionOutcome()
    if outcome == JobState.OK:
        before = dict(states)
        before[task] = JobState.PROCESSING
        after = dict(states)
        after[task] = JobState.OK
        before_ready = set(ready_tasks(dag, before))
        result.newly_ready = [v for v in ready_tasks(dag, after) if v not in before_ready]
        if all(after.get(v) == JobState.OK for v in dag.vertices):
            result.job_event = Event.WORK_COMPLETED
        return result
    if outcome == JobState.FAILED:
        result.job_event = Event.ERROR_REPORTED
        result.cancel = [
            v
            for v in dag.vertices
            if v != task and states.get(v) not in (JobState.OK, JobState.FAILED, JobState.WAITING)
        ]
        return result
    return result


def match_requirements(reqs: ResourceRequirements, caps) -> bool:
    """True iff a site's capability set satisfies the task's needs."""
    if reqs.needs_gpu and not caps.has_gpu:
        return False
    return (
        reqs.min_memory_mb <= caps.max_memory_mb
        and reqs.min_disk_mb <= caps.max_disk_mb
        and reqs.max_walltime_s <= caps.max_walltime_s
    )
