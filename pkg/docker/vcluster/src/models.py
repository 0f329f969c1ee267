"""Cluster domain records and the node state machine.

All timestamps and durations are integer milliseconds on the cluster clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import ConfigValidationError, IllegalTransition
from .store import ImageRef, MpiRuntime


MS_PER_SECOND = 1000


def seconds_to_ms(seconds: float) -> int:
    return int(round(float(seconds) * MS_PER_SECOND))


def ms_to_seconds(ms: int) -> float:
    return int(ms) / MS_PER_SECOND


class JobState(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    TIMED_OUT = "TimedOut"


TERMINAL_JOB_STATES = frozenset({JobState.COMPLETED, JobState.FAILED, JobState.TIMED_OUT})


class NodeState(str, Enum):
    REQUESTED = "Requested"
    PROVISIONING = "Provisioning"
    IDLE = "Idle"
    ALLOCATED = "Allocated"
    DRAINING = "Draining"
    TERMINATING = "Terminating"
    TERMINATED = "Terminated"
    FAILED = "Failed"


# Counted against max_nodes.
LIVE_NODE_STATES = frozenset(
    {
        NodeState.REQUESTED,
        NodeState.PROVISIONING,
        NodeState.IDLE,
        NodeState.ALLOCATED,
        NodeState.DRAINING,
        NodeState.TERMINATING,
    }
)

# Spare or incoming capacity that can absorb pending work.
SUPPLY_NODE_STATES = frozenset({NodeState.REQUESTED, NodeState.PROVISIONING, NodeState.IDLE})

# Counted by max_concurrent_nodes in usage reports.
RUNNING_INSTANCE_STATES = frozenset(
    {NodeState.PROVISIONING, NodeState.IDLE, NodeState.ALLOCATED, NodeState.DRAINING}
)

_LEGAL_EDGES: frozenset[tuple[NodeState, NodeState]] = frozenset(
    {
        (NodeState.REQUESTED, NodeState.PROVISIONING),
        (NodeState.PROVISIONING, NodeState.IDLE),
        (NodeState.IDLE, NodeState.ALLOCATED),
        (NodeState.ALLOCATED, NodeState.IDLE),
        (NodeState.IDLE, NodeState.DRAINING),
        (NodeState.DRAINING, NodeState.TERMINATING),
        (NodeState.TERMINATING, NodeState.TERMINATED),
        (NodeState.FAILED, NodeState.TERMINATING),
    }
)


def is_legal_transition(from_state: NodeState, to_state: NodeState) -> bool:
    if to_state == NodeState.FAILED:
        return from_state not in (NodeState.TERMINATED, NodeState.FAILED)
    return (from_state, to_state) in _LEGAL_EDGES


@dataclass(frozen=True)
class SharedStorageSpec:
    """Sizes of the home, work and software shared spaces. Metadata only."""

    home_gb: int = 0
    work_gb: int = 0
    software_gb: int = 0


@dataclass(frozen=True)
class ClusterConfig:
    max_nodes: int
    node_flavor: str
    node_image: str
    cores_per_node: int
    mem_per_node_bytes: int
    rmax_per_node_gflops: float
    host_mpi: MpiRuntime
    min_nodes: int = 0
    idle_timeout: int = 300_000
    reconcile_interval: int = 10_000
    drain_grace: int = 0
    storage: SharedStorageSpec = field(default_factory=SharedStorageSpec)
    name: str = "vcluster"
    headnode_flavor: str = ""
    mpi_major_skew: int = 1

    def __post_init__(self) -> None:
        # Durations are checked after rounding to milliseconds.
        problems: list[str] = []
        if self.max_nodes < 1:
            problems.append(f"max_nodes must be >= 1, got {self.max_nodes}")
        if not 0 <= self.min_nodes <= max(self.max_nodes, 0):
            problems.append(f"min_nodes must be within [0, max_nodes], got {self.min_nodes}")
        if self.idle_timeout < 1:
            problems.append(f"idle_timeout must be >= 1 ms, got {self.idle_timeout} ms")
        if self.reconcile_interval < 1:
            problems.append(f"reconcile_interval must be >= 1 ms, got {self.reconcile_interval} ms")
        if self.drain_grace < 0:
            problems.append(f"drain_grace must be >= 0 ms, got {self.drain_grace} ms")
        if self.cores_per_node < 1:
            problems.append(f"cores_per_node must be >= 1, got {self.cores_per_node}")
        if self.mem_per_node_bytes < 1:
            problems.append(f"mem_per_node_bytes must be >= 1, got {self.mem_per_node_bytes}")
        if self.rmax_per_node_gflops <= 0:
            problems.append(f"rmax_per_node_gflops must be > 0, got {self.rmax_per_node_gflops}")
        if self.mpi_major_skew < 0:
            problems.append(f"mpi_major_skew must be >= 0, got {self.mpi_major_skew}")
        if problems:
            raise ConfigValidationError(context=f"cluster {self.name}", problems=problems)


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    node_count: int
    tasks_per_node: int
    walltime_limit: int
    image: ImageRef
    command: str = ""
    submit_time: int = 0

    @property
    def num_procs(self) -> int:
        return self.node_count * self.tasks_per_node


@dataclass(frozen=True)
class JobRecord:
    spec: JobSpec
    state: JobState = JobState.PENDING
    assigned_nodes: frozenset[str] = frozenset()
    start_time: int | None = None
    end_time: int | None = None

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    @property
    def wait_time(self) -> int | None:
        if self.start_time is None:
            return None
        return self.start_time - self.spec.submit_time


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    flavor: str
    image: str
    state: NodeState = NodeState.REQUESTED
    created_at: int = 0
    instance_id: str | None = None
    idle_since: int | None = None
    terminated_at: int | None = None
    job_id: str | None = None
    state_since: int = 0


def apply_transition(
    node: NodeRecord,
    target: NodeState,
    now: int,
    *,
    job_id: str | None = None,
) -> NodeRecord:
    """Return *node* moved to *target*; raises IllegalTransition for any other edge."""
    if not is_legal_transition(node.state, target):
        raise IllegalTransition(node.state.value, target.value)

    idle_since = int(now) if target == NodeState.IDLE else None
    terminated_at = int(now) if target == NodeState.TERMINATED else node.terminated_at
    job_id = job_id if target == NodeState.ALLOCATED else None
    return replace(
        node,
        state=target,
        state_since=int(now),
        idle_since=idle_since,
        terminated_at=terminated_at,
        job_id=job_id,
    )


@dataclass(frozen=True)
class UsageReport:
    node_seconds_total: float = 0.0
    node_seconds_busy: float = 0.0
    utilization: float = 0.0
    max_concurrent_nodes: int = 0
    per_job_wait: dict[str, float] = field(default_factory=dict)
