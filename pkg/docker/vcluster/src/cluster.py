from __future__ import annotations

from dataclasses import dataclass, field, replace

from .events import Clock, EventKind, EventLog, transition_node
from .models import (
    LIVE_NODE_STATES,
    ClusterConfig,
    JobRecord,
    JobSpec,
    JobState,
    NodeRecord,
    NodeState,
)
from .scheduler import Assignment, QueueState, demand, finish, pending_need, submit, try_schedule


@dataclass(frozen=True)
class ClusterSnapshot:
    now: int
    nodes: tuple[NodeRecord, ...]
    pending_need: int

    @property
    def live_count(self) -> int:
        return sum(1 for node in self.nodes if node.state in LIVE_NODE_STATES)


@dataclass
class ClusterState:
    """Single writer for jobs, nodes and the event log.

    `nodes` holds every node that has not reached Terminated; terminated
    records move to `retired`.
    """

    config: ClusterConfig
    clock: Clock
    log: EventLog = field(default_factory=EventLog)
    queue: QueueState = field(default_factory=QueueState)
    jobs: dict[str, JobRecord] = field(default_factory=dict)
    nodes: dict[str, NodeRecord] = field(default_factory=dict)
    retired: dict[str, NodeRecord] = field(default_factory=dict)
    _by_instance: dict[str, str] = field(default_factory=dict, repr=False)
    _node_counter: int = 0

    def now(self) -> int:
        return self.clock.now()

    def request_node(self) -> NodeRecord:
        self._node_counter += 1
        now = self.now()
        node = NodeRecord(
            node_id=f"node-{self._node_counter:05d}",
            flavor=self.config.node_flavor,
            image=self.config.node_image,
            created_at=now,
            state_since=now,
        )
        self.nodes[node.node_id] = node
        self.log.append(
            now,
            EventKind.NODE_REQUESTED,
            node_id=node.node_id,
            flavor=node.flavor,
            image=node.image,
        )
        return node

    def transition(
        self,
        node_id: str,
        target: NodeState,
        *,
        instance_id: str | None = None,
        job_id: str | None = None,
        **details: object,
    ) -> NodeRecord:
        node = self.nodes[node_id]
        if instance_id is not None:
            node = replace(node, instance_id=instance_id)
            self._by_instance[instance_id] = node_id
        updated = transition_node(node, target, self.now(), log=self.log, job_id=job_id, **details)
        if updated.state == NodeState.TERMINATED:
            del self.nodes[node_id]
            self.retired[node_id] = updated
            if updated.instance_id:
                self._by_instance.pop(updated.instance_id, None)
        else:
            self.nodes[node_id] = updated
        return updated

    def node(self, node_id: str) -> NodeRecord:
        return self.nodes.get(node_id) or self.retired[node_id]

    def node_for_instance(self, instance_id: str) -> NodeRecord | None:
        node_id = self._by_instance.get(instance_id)
        return self.nodes.get(node_id) if node_id else None

    def all_nodes(self) -> list[NodeRecord]:
        merged = {**self.retired, **self.nodes}
        return [merged[node_id] for node_id in sorted(merged)]

    def live_count(self) -> int:
        return sum(1 for node in self.nodes.values() if node.state in LIVE_NODE_STATES)

    def owned_instance_ids(self) -> set[str]:
        return {node.instance_id for node in self.nodes.values() if node.instance_id}

    def snapshot(self) -> ClusterSnapshot:
        return ClusterSnapshot(
            now=self.now(),
            nodes=tuple(self.nodes[node_id] for node_id in sorted(self.nodes)),
            pending_need=pending_need(self.queue, self.jobs),
        )

    def submit(self, spec: JobSpec) -> str:
        job_id, _ = submit(spec, self.queue, self.jobs, max_nodes=self.config.max_nodes, log=self.log)
        return job_id

    def schedule(self) -> list[Assignment]:
        return try_schedule(self.queue, self.jobs, self.nodes, self.now(), log=self.log)

    def finish(self, job_id: str, outcome: JobState) -> JobRecord:
        return finish(job_id, outcome, self.queue, self.jobs, self.nodes, self.now(), log=self.log)

    def demand(self) -> int:
        return demand(self.queue, self.jobs, self.nodes, self.config.max_nodes)

    def settled(self) -> bool:
        """No queued or running work and only the warm pool left, all Idle."""
        if self.queue.pending or self.queue.running:
            return False
        if any(node.state != NodeState.IDLE for node in self.nodes.values()):
            return False
        return len(self.nodes) == self.config.min_nodes
