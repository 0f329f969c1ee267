"""Discrete-event simulation of the elastic cluster.

The driver binds every module over a virtual clock: trace submissions,
periodic reconciliation, provider activations and job completions. At any
instant the agenda runs in a fixed order (activations, job ends, submits,
reconcile) and the scheduler is offered the queue after each step, so a
given (config, profile, seed, trace) always yields the same event log.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .autoscaler import RetryPolicy, apply, reconcile
from .cluster import ClusterState
from .config import append_trace_row, read_trace_rows
from .errors import ConfigValidationError, IncompatibleMpi, JobTooLarge, SimulationStalled
from .events import (
    Event,
    EventKind,
    EventLog,
    VirtualClock,
    accumulate_usage,
    render_event_log,
    scaling_timeline,
)
from .models import (
    ClusterConfig,
    JobSpec,
    JobState,
    NodeState,
    UsageReport,
    ms_to_seconds,
    seconds_to_ms,
)
from .providers import CloudProfile, SimProviderConfig, SimulatedProvider, resolve, validate_profile
from .store import ImageRef, MpiRuntime, check_mpi_compat


LOGGER = logging.getLogger("vcluster.simulation")

# Slack past the last possible job end before the run is declared stalled.
HORIZON_SLACK = 7 * 24 * 3600 * 1000


@dataclass(frozen=True)
class TraceEntry:
    submit_time: int
    node_count: int
    tasks_per_node: int
    duration: int
    walltime_limit: int
    image: ImageRef
    mpi: MpiRuntime | None = None
    command: str = ""

    def as_row(self) -> dict[str, object]:
        return {
            "submit_time": _format_seconds(self.submit_time),
            "node_count": self.node_count,
            "tasks_per_node": self.tasks_per_node,
            "duration": _format_seconds(self.duration),
            "walltime_limit": _format_seconds(self.walltime_limit),
            "image": str(self.image),
            "mpi": str(self.mpi) if self.mpi else "",
            "command": self.command,
        }


@dataclass(frozen=True)
class WorkloadTrace:
    entries: tuple[TraceEntry, ...] = ()

    def __post_init__(self) -> None:
        problems: list[str] = []
        for index, entry in enumerate(self.entries):
            if index and entry.submit_time < self.entries[index - 1].submit_time:
                problems.append(f"entry {index + 1}: submit_time goes backwards")
            if entry.duration <= 0:
                problems.append(f"entry {index + 1}: duration must be > 0")
            if entry.walltime_limit <= 0:
                problems.append(f"entry {index + 1}: walltime_limit must be > 0")
            if entry.node_count < 1 or entry.tasks_per_node < 1:
                problems.append(f"entry {index + 1}: node_count and tasks_per_node must be >= 1")
            if entry.submit_time < 0:
                problems.append(f"entry {index + 1}: submit_time must be >= 0")
        if problems:
            raise ConfigValidationError(context="workload trace", problems=problems)

    def __len__(self) -> int:
        return len(self.entries)


def _format_seconds(ms: int) -> str:
    seconds = ms_to_seconds(ms)
    return str(int(seconds)) if float(seconds).is_integer() else str(seconds)


def trace_entry_from_row(row: dict[str, str], *, context: str = "trace") -> TraceEntry:
    try:
        return TraceEntry(
            submit_time=seconds_to_ms(float(row["submit_time"])),
            node_count=int(row["node_count"]),
            tasks_per_node=int(row["tasks_per_node"]),
            duration=seconds_to_ms(float(row["duration"])),
            walltime_limit=seconds_to_ms(float(row["walltime_limit"])),
            image=ImageRef.parse(row["image"]),
            mpi=MpiRuntime.parse(row["mpi"]) if row.get("mpi") else None,
            command=row.get("command", ""),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigValidationError(context=context, problems=[str(exc)]) from exc


def load_trace(path: Path) -> WorkloadTrace:
    entries = [
        trace_entry_from_row(row, context=f"{path} entry {index}")
        for index, row in enumerate(read_trace_rows(path), start=1)
    ]
    return WorkloadTrace(entries=tuple(entries))


def append_trace_entry(path: Path, entry: TraceEntry) -> Path:
    return append_trace_row(path, entry.as_row())


@dataclass(frozen=True)
class JobOutcome:
    job_id: str
    state: JobState
    submit_time: int
    start_time: int | None
    end_time: int | None

    @property
    def wait_seconds(self) -> float | None:
        if self.start_time is None:
            return None
        return ms_to_seconds(self.start_time - self.submit_time)


@dataclass(frozen=True)
class SimulationReport:
    usage: UsageReport
    outcomes: dict[str, JobOutcome]
    timeline: list[tuple[int, int]]
    leak_check: bool
    events: tuple[Event, ...] = ()
    end_time: int = 0
    leaked_instances: tuple[str, ...] = field(default_factory=tuple)

    @property
    def event_log(self) -> str:
        return render_event_log(self.events)

    @property
    def peak_live_nodes(self) -> int:
        return max((count for _, count in self.timeline), default=0)

    def render_text(self) -> str:
        usage = self.usage
        lines = [
            f"simulated time: {ms_to_seconds(self.end_time):.1f}s",
            f"jobs: {len(self.outcomes)}",
            f"node-seconds total: {usage.node_seconds_total:.1f}",
            f"node-seconds busy: {usage.node_seconds_busy:.1f}",
            f"utilization: {usage.utilization:.4f}",
            f"max concurrent nodes: {usage.max_concurrent_nodes}",
            f"leak check: {'ok' if self.leak_check else 'LEAKED ' + ','.join(self.leaked_instances)}",
        ]
        if self.outcomes:
            lines.append("")
            lines.append(f"{'JOB':<10} {'STATE':<10} {'WAIT_S':>8} {'START_S':>9} {'END_S':>9}")
            for outcome in self.outcomes.values():
                lines.append(
                    f"{outcome.job_id:<10} {outcome.state.value:<10} "
                    f"{_cell(outcome.wait_seconds):>8} {_cell(outcome.start_time, ms=True):>9} "
                    f"{_cell(outcome.end_time, ms=True):>9}"
                )
        return "\n".join(lines) + "\n"

    def render_records(self) -> str:
        """One JSON object per line: a summary, then jobs, then the timeline."""
        usage = self.usage
        records: list[dict[str, object]] = [
            {
                "record": "summary",
                "end_time_ms": self.end_time,
                "node_seconds_total": usage.node_seconds_total,
                "node_seconds_busy": usage.node_seconds_busy,
                "utilization": usage.utilization,
                "max_concurrent_nodes": usage.max_concurrent_nodes,
                "leak_check": self.leak_check,
            }
        ]
        for outcome in self.outcomes.values():
            records.append(
                {
                    "record": "job",
                    "job_id": outcome.job_id,
                    "state": outcome.state.value,
                    "submit_time_ms": outcome.submit_time,
                    "start_time_ms": outcome.start_time,
                    "end_time_ms": outcome.end_time,
                    "wait_s": outcome.wait_seconds,
                }
            )
        for at, live in self.timeline:
            records.append({"record": "scale", "time_ms": at, "live_nodes": live})
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in records)


def _cell(value: float | int | None, *, ms: bool = False) -> str:
    if value is None:
        return "-"
    return f"{ms_to_seconds(int(value)) if ms else value:.1f}"


def job_specs_for(trace: WorkloadTrace, config: ClusterConfig) -> list[tuple[JobSpec, TraceEntry]]:
    """Assign `job-NNNN` ids in trace order and check each entry can ever run."""
    specs: list[tuple[JobSpec, TraceEntry]] = []
    for index, entry in enumerate(trace.entries, start=1):
        job_id = f"job-{index:04d}"
        if entry.node_count > config.max_nodes:
            raise JobTooLarge(job_id=job_id, node_count=entry.node_count, max_nodes=config.max_nodes)
        container_mpi = entry.mpi or config.host_mpi
        compat = check_mpi_compat(config.host_mpi, container_mpi, max_major_skew=config.mpi_major_skew)
        if not compat:
            raise IncompatibleMpi(compat.reason, context=f"trace entry {index} ({job_id})")
        spec = JobSpec(
            job_id=job_id,
            node_count=entry.node_count,
            tasks_per_node=entry.tasks_per_node,
            walltime_limit=entry.walltime_limit,
            image=entry.image,
            command=entry.command,
            submit_time=entry.submit_time,
        )
        specs.append((spec, entry))
    return specs


class Simulation:
    """One run over a virtual clock; `run()` may be called once."""

    def __init__(
        self,
        config: ClusterConfig,
        profile: CloudProfile,
        provider_config: SimProviderConfig,
        trace: WorkloadTrace,
        *,
        retry: RetryPolicy | None = None,
        horizon: int | None = None,
    ):
        validate_profile(profile, config)
        self.config = config
        self.request = resolve(config, profile)
        self.retry = retry or RetryPolicy()
        self.clock = VirtualClock(0)
        self.cluster = ClusterState(config=config, clock=self.clock, log=EventLog())
        self.provider = SimulatedProvider(provider_config, clock=self.clock)
        self.provider.subscribe(self._on_active)

        self._arrivals = job_specs_for(trace, config)
        self._durations = {spec.job_id: entry.duration for spec, entry in self._arrivals}
        self._next_arrival = 0
        self._ends: dict[str, tuple[int, JobState]] = {}
        self._next_tick = 0
        if horizon is None:
            last_submit = trace.entries[-1].submit_time if trace.entries else 0
            horizon = last_submit + sum(entry.walltime_limit for entry in trace.entries) + HORIZON_SLACK
        self.horizon = horizon

    def _on_active(self, instance_id: str, at: int) -> None:
        node = self.cluster.node_for_instance(instance_id)
        if node is not None and node.state == NodeState.PROVISIONING:
            self.cluster.transition(node.node_id, NodeState.IDLE)

    def _schedule(self) -> None:
        for assignment in self.cluster.schedule():
            job = self.cluster.jobs[assignment.job_id]
            duration = self._durations[job.job_id]
            limit = job.spec.walltime_limit
            outcome = JobState.TIMED_OUT if duration > limit else JobState.COMPLETED
            self._ends[job.job_id] = (int(job.start_time or 0) + min(duration, limit), outcome)

    def _next_time(self) -> int:
        candidates = [self._next_tick]
        activation = self.provider.next_activation_time()
        if activation is not None:
            candidates.append(activation)
        if self._ends:
            candidates.append(min(end for end, _ in self._ends.values()))
        if self._next_arrival < len(self._arrivals):
            candidates.append(self._arrivals[self._next_arrival][0].submit_time)
        return min(candidates)

    def _done(self) -> bool:
        return self._next_arrival >= len(self._arrivals) and not self._ends and self.cluster.settled()

    def _step(self, now: int) -> None:
        self.clock.advance_to(now)

        self.provider.advance(now)
        self._schedule()

        for job_id in sorted(job_id for job_id, (end, _) in self._ends.items() if end == now):
            _, outcome = self._ends.pop(job_id)
            self.cluster.finish(job_id, outcome)
        self._schedule()

        while self._next_arrival < len(self._arrivals) and self._arrivals[self._next_arrival][0].submit_time == now:
            spec, _ = self._arrivals[self._next_arrival]
            self.cluster.submit(spec)
            self._next_arrival += 1
        self._schedule()

        if now == self._next_tick:
            self._reconcile(now)
            self._next_tick += self.config.reconcile_interval
            self._schedule()

    def _reconcile(self, now: int) -> None:
        demand = self.cluster.demand()
        actions = reconcile(self.cluster.snapshot(), demand, self.config, now)
        if not actions:
            return
        self.cluster.log.append(
            now,
            EventKind.RECONCILE_RAN,
            demand=demand,
            live=self.cluster.live_count(),
            actions=",".join(action.kind.value for action in actions),
        )
        outcomes = apply(actions, cluster=self.cluster, provider=self.provider, request=self.request, retry=self.retry)
        failed = [outcome for outcome in outcomes if not outcome.ok and outcome.error]
        if failed:
            LOGGER.debug("[SIM]: t=%d %d of %d actions did not complete", now, len(failed), len(outcomes))

    def run(self) -> SimulationReport:
        LOGGER.info("[SIM]: starting with %d jobs, max_nodes=%d", len(self._arrivals), self.config.max_nodes)
        while True:
            now = self._next_time()
            if now > self.horizon:
                raise SimulationStalled(f"cluster did not settle before t={self.horizon}ms")
            self._step(now)
            if self._done():
                break
        return self._report()

    def _report(self) -> SimulationReport:
        events = self.cluster.log.events
        outcomes: dict[str, JobOutcome] = {}
        for spec, _ in self._arrivals:
            record = self.cluster.jobs[spec.job_id]
            outcomes[spec.job_id] = JobOutcome(
                job_id=spec.job_id,
                state=record.state,
                submit_time=spec.submit_time,
                start_time=record.start_time,
                end_time=record.end_time,
            )
        provider_ids = {instance_id for instance_id, _ in self.provider.list_instances()}
        leaked = tuple(sorted(provider_ids - self.cluster.owned_instance_ids()))
        leak_check = not leaked
        if leaked:
            LOGGER.warning("[SIM]: leaked instances at end of run: %s", ", ".join(leaked))
        report = SimulationReport(
            usage=accumulate_usage(events),
            outcomes=outcomes,
            timeline=scaling_timeline(events),
            leak_check=leak_check,
            events=events,
            end_time=self.clock.now(),
            leaked_instances=leaked,
        )
        LOGGER.info(
            "[SIM]: finished at t=%.1fs, %d events, utilization %.3f",
            ms_to_seconds(report.end_time),
            len(events),
            report.usage.utilization,
        )
        return report


def run_simulation(
    config: ClusterConfig,
    profile: CloudProfile,
    provider_config: SimProviderConfig,
    trace: WorkloadTrace,
    *,
    retry: RetryPolicy | None = None,
    horizon: int | None = None,
) -> SimulationReport:
    return Simulation(config, profile, provider_config, trace, retry=retry, horizon=horizon).run()
