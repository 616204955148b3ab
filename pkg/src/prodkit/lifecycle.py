"""Job and task state machines: transitions, timeouts, retry budgets.

Pure functions over immutable inputs. Applying a transition to a stored
record atomically is the datastore's job (compare-and-swap there).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class JobState(str, enum.Enum):
    WAITING = "WAITING"
    QUEUEING = "QUEUEING"
    QUEUED = "QUEUED"
    PROCESSING = "PROCESSING"
    COPYING = "COPYING"
    OK = "OK"
    ERROR = "ERROR"
    RESET = "RESET"
    SUSPENDED = "SUSPENDED"
    FAILED = "FAILED"
    CLEANING = "CLEANING"


class Event(str, enum.Enum):
    ENQUEUE_REQUESTED = "EnqueueRequested"
    SUBMITTED_TO_BACKEND = "SubmittedToBackend"
    PILOT_STARTED = "PilotStarted"
    WORK_COMPLETED = "WorkCompleted"
    COPY_COMPLETED = "CopyCompleted"
    ERROR_REPORTED = "ErrorReported"
    TIMEOUT_EXPIRED = "TimeoutExpired"
    OPERATOR_SUSPEND = "OperatorSuspend"
    OPERATOR_RESUME = "OperatorResume"
    OPERATOR_RESET = "OperatorReset"
    RETRY_GRANTED = "RetryGranted"
    RETRY_EXHAUSTED = "RetryExhausted"
    CLEANUP_DONE = "CleanupDone"
    # emitted only by framework daemons: the automatic RESET -> CLEANING hop
    CLEANUP_STARTED = "CleanupStarted"


TERMINAL_STATES = frozenset({JobState.OK, JobState.FAILED})
NON_TERMINAL_STATES = frozenset(s for s in JobState if s not in TERMINAL_STATES)

#: states a timeout can legally reset (the queue/run arc of the diagram)
TIMEOUT_RESETTABLE = frozenset(
    {JobState.QUEUEING, JobState.QUEUED, JobState.PROCESSING, JobState.COPYING}
)

#: states carrying a timeout: every non-terminal, non-error state
TIMED_STATES = frozenset(s for s in NON_TERMINAL_STATES if s is not JobState.ERROR)

#: states counted against a site's queue bound
ACTIVE_STATES = frozenset(
    {JobState.QUEUEING, JobState.QUEUED, JobState.PROCESSING, JobState.COPYING}
)


class IllegalTransition(Exception):
    def __init__(self, state, event):
        super().__init__("no transition for (%s, %s)" % (state.value, event.value))
        self.state = state
        self.event = event


def _build_table():
    t = {}
    t[(JobState.WAITING, Event.ENQUEUE_REQUESTED)] = JobState.QUEUEING
    t[(JobState.QUEUEING, Event.SUBMITTED_TO_BACKEND)] = JobState.QUEUED
    t[(JobState.QUEUED, Event.PILOT_STARTED)] = JobState.PROCESSING
    t[(JobState.PROCESSING, Event.WORK_COMPLETED)] = JobState.COPYING
    t[(JobState.COPYING, Event.COPY_COMPLETED)] = JobState.OK
    for s in NON_TERMINAL_STATES:
        t[(s, Event.ERROR_REPORTED)] = JobState.ERROR
        t[(s, Event.OPERATOR_SUSPEND)] = JobState.SUSPENDED
    for s in TIMEOUT_RESETTABLE:
        t[(s, Event.TIMEOUT_EXPIRED)] = JobState.RESET
    t[(JobState.ERROR, Event.RETRY_GRANTED)] = JobState.RESET
    t[(JobState.ERROR, Event.RETRY_EXHAUSTED)] = JobState.FAILED
    t[(JobState.RESET, Event.CLEANUP_STARTED)] = JobState.CLEANING
    t[(JobState.CLEANING, Event.CLEANUP_DONE)] = JobState.WAITING
    t[(JobState.SUSPENDED, Event.OPERATOR_RESUME)] = JobState.RESET
    t[(JobState.FAILED, Event.OPERATOR_RESET)] = JobState.RESET
    return t


TRANSITIONS = _build_table()


def transition(current: JobState, event: Event) -> JobState:
    """Next state per the fixed table; IllegalTransition otherwise."""
    try:
        return TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


DEFAULT_TIMEOUTS = {
    JobState.WAITING: 14 * 86400.0,
    JobState.QUEUEING: 600.0,
    JobState.QUEUED: 2 * 86400.0,
    JobState.PROCESSING: 6 * 3600.0,
    JobState.COPYING: 3600.0,
    JobState.RESET: 600.0,
    JobState.CLEANING: 600.0,
    JobState.SUSPENDED: 30 * 86400.0,
}


@dataclass
class TimeoutPolicy:
    """Per-state timeout seconds for every non-terminal, non-error state."""

    timeouts: dict = field(default_factory=lambda: dict(DEFAULT_TIMEOUTS))
    max_retries: int = 3

    def __post_init__(self):
        missing = TIMED_STATES - set(self.timeouts)
        if missing:
            raise ValueError("missing timeouts for %s" % sorted(s.value for s in missing))
        for state, seconds in self.timeouts.items():
            if seconds <= 0:
                raise ValueError("timeout for %s must be > 0" % state.value)
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def timeout_for(self, state: JobState) -> float:
        return self.timeouts[state]

    def with_timeout(self, state: JobState, seconds: float) -> "TimeoutPolicy":
        t = dict(self.timeouts)
        t[state] = seconds
        return TimeoutPolicy(timeouts=t, max_retries=self.max_retries)


@dataclass
class JobRecord:
    dataset_id: int
    job_index: int
    state: JobState = JobState.WAITING
    retries: int = 0
    passkey: str = ""
    host: str | None = None
    grid_id: str | None = None
    site: str | None = None
    last_update: float = 0.0
    state_entered: float = 0.0
    error_message: str | None = None

    @property
    def key(self):
        return (self.dataset_id, self.job_index)


@dataclass
class TaskRecord:
    dataset_id: int
    job_index: int
    task_name: str
    state: JobState = JobState.WAITING
    retries: int = 0
    passkey: str = ""
    host: str | None = None
    grid_id: str | None = None
    site: str | None = None
    last_update: float = 0.0
    state_entered: float = 0.0
    error_message: str | None = None

    @property
    def key(self):
        return (self.dataset_id, self.job_index, self.task_name)


def check_timeouts(records, policy: TimeoutPolicy, now: float):
    """Overdue (record, TimeoutExpired) pairs, ordered by record key.

    A record is overdue when now - state_entered strictly exceeds the
    state's timeout; terminal and ERROR states are exempt.
    """
    flagged = [
        r
        for r in records
        if r.state in TIMED_STATES and (now - r.state_entered) > policy.timeout_for(r.state)
    ]
    flagged.sort(key=lambda r: r.key)
    return [(r, Event.TIMEOUT_EXPIRED) for r in flagged]


def grant_or_exhaust(record, policy: TimeoutPolicy) -> Event:
    """Retry decision for a record in ERROR: grant while budget remains."""
    if record.retries < policy.max_retries:
        return Event.RETRY_GRANTED
    return Event.RETRY_EXHAUSTED
