"""Clock, append-only event log and usage accounting.

The log is the faithful serialization of cluster history: replaying it
reproduces every job and node record, and its rendered form is byte-stable
for identical inputs. One event per line, tab-separated::

    <seq>\t<time_ms>\t<kind>\t<key>=<value> <key>=<value> ...

Payload keys are sorted and values are percent-encoded.
"""

from __future__ import annotations

import time
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol
from urllib.parse import quote, unquote

from .errors import IllegalTransition, MalformedLog
from .models import (
    LIVE_NODE_STATES,
    RUNNING_INSTANCE_STATES,
    JobRecord,
    JobSpec,
    JobState,
    NodeRecord,
    NodeState,
    UsageReport,
    apply_transition,
    is_legal_transition,
    ms_to_seconds,
)
from .store import ImageRef


class EventKind(str, Enum):
    JOB_SUBMITTED = "JobSubmitted"
    IMAGE_UNPINNED = "ImageUnpinned"
    JOB_STARTED = "JobStarted"
    JOB_ENDED = "JobEnded"
    NODE_REQUESTED = "NodeRequested"
    NODE_PROVISIONING = "NodeProvisioning"
    NODE_ACTIVE = "NodeActive"
    NODE_ALLOCATED = "NodeAllocated"
    NODE_IDLE = "NodeIdle"
    NODE_DRAINING = "NodeDraining"
    NODE_TERMINATING = "NodeTerminating"
    NODE_TERMINATED = "NodeTerminated"
    NODE_FAILED = "NodeFailed"
    PROVIDER_RETRY = "ProviderRetry"
    RECONCILE_RAN = "ReconcileRan"


NODE_EVENT_TARGETS: dict[EventKind, NodeState] = {
    EventKind.NODE_PROVISIONING: NodeState.PROVISIONING,
    EventKind.NODE_ACTIVE: NodeState.IDLE,
    EventKind.NODE_IDLE: NodeState.IDLE,
    EventKind.NODE_ALLOCATED: NodeState.ALLOCATED,
    EventKind.NODE_DRAINING: NodeState.DRAINING,
    EventKind.NODE_TERMINATING: NodeState.TERMINATING,
    EventKind.NODE_TERMINATED: NodeState.TERMINATED,
    EventKind.NODE_FAILED: NodeState.FAILED,
}


def node_event_kind(from_state: NodeState, to_state: NodeState) -> EventKind:
    if to_state == NodeState.IDLE:
        return EventKind.NODE_ACTIVE if from_state == NodeState.PROVISIONING else EventKind.NODE_IDLE
    for kind, target in NODE_EVENT_TARGETS.items():
        if target == to_state:
            return kind
    raise IllegalTransition(from_state.value, to_state.value)


# ---------------------------------------------------------------------------
# Clocks
# ---------------------------------------------------------------------------


class Clock(Protocol):
    def now(self) -> int: ...


class VirtualClock:
    """Integer-millisecond clock that only moves when told to."""

    def __init__(self, start: int = 0):
        self._now = int(start)

    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> int:
        if int(t) < self._now:
            raise ValueError(f"clock cannot move backwards ({t} < {self._now})")
        self._now = int(t)
        return self._now


class WallClock:
    """Wall time in milliseconds since the clock was created."""

    def __init__(self) -> None:
        self._origin = time.monotonic()

    def now(self) -> int:
        return int((time.monotonic() - self._origin) * 1000)


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    seq: int
    time: int
    kind: EventKind
    payload: dict[str, str] = field(default_factory=dict)

    def render(self) -> str:
        pairs = " ".join(f"{key}={quote(value, safe='')}" for key, value in sorted(self.payload.items()))
        return f"{self.seq}\t{self.time}\t{self.kind.value}\t{pairs}"

    @classmethod
    def parse(cls, line: str, *, line_no: int = 0) -> "Event":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise MalformedLog(f"line {line_no}: expected 4 tab-separated fields, got {len(parts)}")
        seq_text, time_text, kind_text, payload_text = parts
        try:
            kind = EventKind(kind_text)
            seq = int(seq_text)
            at = int(time_text)
        except ValueError as exc:
            raise MalformedLog(f"line {line_no}: {exc}") from exc

        payload: dict[str, str] = {}
        for token in payload_text.split(" ") if payload_text else []:
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise MalformedLog(f"line {line_no}: payload token '{token}' is not key=value")
            payload[key] = unquote(value)
        return cls(seq=seq, time=at, kind=kind, payload=payload)


class EventLog:
    """Append-only, gap-free event sequence with non-decreasing time."""

    def __init__(self) -> None:
        self._events: list[Event] = []

    def append(self, at: int, kind: EventKind, **payload: object) -> Event:
        if self._events and int(at) < self._events[-1].time:
            raise ValueError(f"event time {at} precedes last event time {self._events[-1].time}")
        event = Event(
            seq=len(self._events) + 1,
            time=int(at),
            kind=kind,
            payload={key: str(value) for key, value in payload.items() if value is not None},
        )
        self._events.append(event)
        return event

    @property
    def events(self) -> tuple[Event, ...]:
        return tuple(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(tuple(self._events))

    def render(self) -> str:
        return render_event_log(self._events)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.render().encode("utf-8"))
        return path


def render_event_log(events: Iterable[Event]) -> str:
    return "".join(event.render() + "\n" for event in events)


def parse_event_log(text: str) -> list[Event]:
    return [
        Event.parse(line, line_no=index)
        for index, line in enumerate(text.splitlines(), start=1)
        if line.strip()
    ]


def read_event_log(path: Path) -> list[Event]:
    return parse_event_log(Path(path).read_bytes().decode("utf-8"))


def transition_node(
    node: NodeRecord,
    target: NodeState,
    now: int,
    *,
    log: EventLog | None = None,
    job_id: str | None = None,
    **details: object,
) -> NodeRecord:
    updated = apply_transition(node, target, now, job_id=job_id)
    if log is not None:
        log.append(
            now,
            node_event_kind(node.state, target),
            node_id=updated.node_id,
            instance_id=updated.instance_id,
            job_id=updated.job_id,
            **details,
        )
    return updated


# ---------------------------------------------------------------------------
# Replay and accounting
# ---------------------------------------------------------------------------


def _check_order(events: list[Event]) -> None:
    previous: Event | None = None
    for event in events:
        if previous is not None:
            if event.seq != previous.seq + 1:
                raise MalformedLog(f"seq {event.seq} does not follow {previous.seq}")
            if event.time < previous.time:
                raise MalformedLog(f"seq {event.seq}: time {event.time} precedes {previous.time}")
        previous = event


def _step_node(states: dict[str, NodeState], event: Event) -> tuple[str, NodeState, NodeState]:
    node_id = event.payload.get("node_id", "")
    if event.kind == EventKind.NODE_REQUESTED:
        if node_id in states:
            raise MalformedLog(f"seq {event.seq}: node {node_id} requested twice")
        states[node_id] = NodeState.REQUESTED
        return node_id, NodeState.REQUESTED, NodeState.REQUESTED

    target = NODE_EVENT_TARGETS[event.kind]
    current = states.get(node_id)
    if current is None:
        raise MalformedLog(f"seq {event.seq}: {event.kind.value} for unknown node '{node_id}'")
    if not is_legal_transition(current, target) or node_event_kind(current, target) != event.kind:
        raise MalformedLog(f"seq {event.seq}: node {node_id} cannot go {current.value} -> {target.value}")
    states[node_id] = target
    return node_id, current, target


def _is_node_event(event: Event) -> bool:
    return event.kind == EventKind.NODE_REQUESTED or event.kind in NODE_EVENT_TARGETS


def accumulate_usage(events: Iterable[Event]) -> UsageReport:
    ordered = list(events)
    if not ordered:
        return UsageReport()
    _check_order(ordered)

    states: dict[str, NodeState] = {}
    provisioned_at: dict[str, int] = {}
    allocated_at: dict[str, int] = {}
    terminated_at: dict[str, int] = {}
    busy_ms = 0
    running = 0
    max_running = 0
    submitted: dict[str, int] = {}
    waits: dict[str, float] = {}

    for event in ordered:
        if _is_node_event(event):
            node_id, before, after = _step_node(states, event)
            if after == NodeState.PROVISIONING:
                provisioned_at.setdefault(node_id, event.time)
            if before == NodeState.ALLOCATED:
                busy_ms += event.time - allocated_at.pop(node_id)
            if after == NodeState.ALLOCATED:
                allocated_at[node_id] = event.time
            if after == NodeState.TERMINATED:
                terminated_at[node_id] = event.time

            was_running = before in RUNNING_INSTANCE_STATES and before != after
            now_running = after in RUNNING_INSTANCE_STATES and before != after
            running += int(now_running) - int(was_running)
            max_running = max(max_running, running)
        elif event.kind == EventKind.JOB_SUBMITTED:
            submitted[event.payload.get("job_id", "")] = event.time
        elif event.kind == EventKind.JOB_STARTED:
            job_id = event.payload.get("job_id", "")
            if job_id not in submitted:
                raise MalformedLog(f"seq {event.seq}: job {job_id} started before submission")
            waits[job_id] = ms_to_seconds(event.time - submitted[job_id])

    horizon = ordered[-1].time
    for node_id, since in allocated_at.items():
        busy_ms += horizon - since
    total_ms = sum(terminated_at.get(node_id, horizon) - since for node_id, since in provisioned_at.items())

    total = ms_to_seconds(total_ms)
    busy = ms_to_seconds(busy_ms)
    return UsageReport(
        node_seconds_total=total,
        node_seconds_busy=busy,
        utilization=(busy / total) if total > 0 else 0.0,
        max_concurrent_nodes=max_running,
        per_job_wait=dict(sorted(waits.items())),
    )


def scaling_timeline(events: Iterable[Event]) -> list[tuple[int, int]]:
    """Return (time, live node count) at every change of the live count."""
    states: dict[str, NodeState] = {}
    live = 0
    out: list[tuple[int, int]] = []
    for event in events:
        if not _is_node_event(event):
            continue
        _, before, after = _step_node(states, event)
        delta = 0
        if after in LIVE_NODE_STATES and (before == after or before not in LIVE_NODE_STATES):
            delta = 1
        elif before in LIVE_NODE_STATES and after not in LIVE_NODE_STATES:
            delta = -1
        if delta:
            live += delta
            out.append((event.time, live))
    return out


def replay(events: Iterable[Event]) -> tuple[dict[str, JobRecord], dict[str, NodeRecord]]:
    """Rebuild job and node tables from a log."""
    jobs: dict[str, JobRecord] = {}
    nodes: dict[str, NodeRecord] = {}

    for event in events:
        payload = event.payload
        if event.kind == EventKind.JOB_SUBMITTED:
            spec = JobSpec(
                job_id=payload["job_id"],
                node_count=int(payload["node_count"]),
                tasks_per_node=int(payload["tasks_per_node"]),
                walltime_limit=int(payload["walltime_ms"]),
                image=ImageRef.parse(payload["image"]),
                command=payload.get("command", ""),
                submit_time=event.time,
            )
            jobs[spec.job_id] = JobRecord(spec=spec)
        elif event.kind == EventKind.JOB_STARTED:
            record = _job(jobs, payload, event)
            assigned = frozenset(item for item in payload.get("nodes", "").split(",") if item)
            jobs[record.job_id] = replace(
                record, state=JobState.RUNNING, assigned_nodes=assigned, start_time=event.time
            )
        elif event.kind == EventKind.JOB_ENDED:
            record = _job(jobs, payload, event)
            jobs[record.job_id] = replace(
                record, state=JobState(payload["state"]), assigned_nodes=frozenset(), end_time=event.time
            )
        elif event.kind == EventKind.NODE_REQUESTED:
            node_id = payload["node_id"]
            if node_id in nodes:
                raise MalformedLog(f"seq {event.seq}: node {node_id} requested twice")
            nodes[node_id] = NodeRecord(
                node_id=node_id,
                flavor=payload.get("flavor", ""),
                image=payload.get("image", ""),
                created_at=event.time,
                state_since=event.time,
            )
        elif event.kind in NODE_EVENT_TARGETS:
            node = nodes.get(payload.get("node_id", ""))
            if node is None:
                raise MalformedLog(f"seq {event.seq}: {event.kind.value} for unknown node")
            if payload.get("instance_id"):
                node = replace(node, instance_id=payload["instance_id"])
            try:
                nodes[node.node_id] = apply_transition(
                    node, NODE_EVENT_TARGETS[event.kind], event.time, job_id=payload.get("job_id")
                )
            except IllegalTransition as exc:
                raise MalformedLog(f"seq {event.seq}: {exc}") from exc

    return jobs, nodes


def _job(jobs: dict[str, JobRecord], payload: dict[str, str], event: Event) -> JobRecord:
    record = jobs.get(payload.get("job_id", ""))
    if record is None:
        raise MalformedLog(f"seq {event.seq}: {event.kind.value} for unknown job")
    return record
