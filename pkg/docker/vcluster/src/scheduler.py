"""Slurm-like strict FIFO queue.

Jobs start in submit order (ties broken by job id) and only when enough
Idle nodes are free at once. There is no backfill: a job that cannot be
placed blocks every job behind it.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field, replace

from .errors import ConfigValidationError, JobTooLarge, NotRunning, UnknownJob
from .events import EventKind, EventLog, transition_node
from .models import (
    SUPPLY_NODE_STATES,
    TERMINAL_JOB_STATES,
    JobRecord,
    JobSpec,
    JobState,
    NodeRecord,
    NodeState,
)


LOGGER = logging.getLogger("vcluster.scheduler")


@dataclass
class QueueState:
    pending: list[str] = field(default_factory=list)
    running: set[str] = field(default_factory=set)
    _order: dict[str, tuple[int, str]] = field(default_factory=dict, repr=False)

    def enqueue(self, spec: JobSpec) -> None:
        self._order[spec.job_id] = (spec.submit_time, spec.job_id)
        bisect.insort(self.pending, spec.job_id, key=self._order.__getitem__)

    def start(self, job_id: str) -> None:
        self.pending.remove(job_id)
        self._order.pop(job_id, None)
        self.running.add(job_id)


@dataclass(frozen=True)
class Assignment:
    job_id: str
    node_ids: tuple[str, ...]


def validate_job_spec(spec: JobSpec) -> None:
    problems: list[str] = []
    if not spec.job_id:
        problems.append("job_id is required")
    if spec.node_count < 1:
        problems.append("node_count must be >= 1")
    if spec.tasks_per_node < 1:
        problems.append("tasks_per_node must be >= 1")
    if spec.walltime_limit <= 0:
        problems.append("walltime_limit must be > 0")
    if problems:
        raise ConfigValidationError(context=f"job {spec.job_id or '?'}", problems=problems)


def submit(
    spec: JobSpec,
    queue: QueueState,
    jobs: dict[str, JobRecord],
    *,
    max_nodes: int,
    log: EventLog | None = None,
) -> tuple[str, QueueState]:
    validate_job_spec(spec)
    if spec.node_count > max_nodes:
        raise JobTooLarge(job_id=spec.job_id, node_count=spec.node_count, max_nodes=max_nodes)
    if spec.job_id in jobs:
        raise ConfigValidationError(context=f"job {spec.job_id}", problems=["job_id already submitted"])

    jobs[spec.job_id] = JobRecord(spec=spec)
    queue.enqueue(spec)

    if log is not None:
        log.append(
            spec.submit_time,
            EventKind.JOB_SUBMITTED,
            job_id=spec.job_id,
            node_count=spec.node_count,
            tasks_per_node=spec.tasks_per_node,
            walltime_ms=spec.walltime_limit,
            image=str(spec.image),
            command=spec.command or None,
        )
        if not spec.image.pinned:
            log.append(spec.submit_time, EventKind.IMAGE_UNPINNED, job_id=spec.job_id, image=str(spec.image))
    if not spec.image.pinned:
        LOGGER.warning("[VCLUSTER]: job %s uses unpinned image %s", spec.job_id, spec.image)
    return spec.job_id, queue


def pending_need(queue: QueueState, jobs: dict[str, JobRecord]) -> int:
    return sum(jobs[job_id].spec.node_count for job_id in queue.pending)


def demand(
    queue: QueueState,
    jobs: dict[str, JobRecord],
    nodes: dict[str, NodeRecord],
    max_nodes: int,
) -> int:
    need = min(max_nodes, pending_need(queue, jobs))
    supply = sum(1 for node in nodes.values() if node.state in SUPPLY_NODE_STATES)
    return max(0, need - supply)


def try_schedule(
    queue: QueueState,
    jobs: dict[str, JobRecord],
    nodes: dict[str, NodeRecord],
    now: int,
    *,
    log: EventLog | None = None,
) -> list[Assignment]:
    idle = sorted(
        (node for node in nodes.values() if node.state == NodeState.IDLE),
        key=lambda node: (node.idle_since, node.node_id),
    )
    assignments: list[Assignment] = []

    for job_id in list(queue.pending):
        record = jobs[job_id]
        need = record.spec.node_count
        if len(idle) < need:
            break

        chosen, idle = idle[:need], idle[need:]
        node_ids = tuple(sorted(node.node_id for node in chosen))
        for node_id in node_ids:
            nodes[node_id] = transition_node(nodes[node_id], NodeState.ALLOCATED, now, log=log, job_id=job_id)

        jobs[job_id] = replace(
            record,
            state=JobState.RUNNING,
            assigned_nodes=frozenset(node_ids),
            start_time=int(now),
        )
        queue.start(job_id)
        if log is not None:
            log.append(now, EventKind.JOB_STARTED, job_id=job_id, nodes=",".join(node_ids))
        assignments.append(Assignment(job_id=job_id, node_ids=node_ids))

    return assignments


def finish(
    job_id: str,
    outcome: JobState,
    queue: QueueState,
    jobs: dict[str, JobRecord],
    nodes: dict[str, NodeRecord],
    now: int,
    *,
    log: EventLog | None = None,
) -> JobRecord:
    if outcome not in TERMINAL_JOB_STATES:
        raise ValueError(f"outcome must be terminal, got {outcome}")
    if job_id not in jobs:
        raise UnknownJob(f"job '{job_id}' was never submitted")
    if job_id not in queue.running:
        raise NotRunning(f"job '{job_id}' is {jobs[job_id].state.value}, not Running")

    record = jobs[job_id]
    for node_id in sorted(record.assigned_nodes):
        nodes[node_id] = transition_node(nodes[node_id], NodeState.IDLE, now, log=log)

    finished = replace(record, state=outcome, assigned_nodes=frozenset(), end_time=int(now))
    jobs[job_id] = finished
    queue.running.discard(job_id)
    if log is not None:
        log.append(now, EventKind.JOB_ENDED, job_id=job_id, state=outcome.value)
    return finished
