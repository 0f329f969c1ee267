"""Reconciliation: compare queue demand with node supply and act on it.

`reconcile` is a pure planner; `apply` carries the plan out against a
provider, retrying transient failures, and routes every resulting state
change through the cluster's single writer.

Scale-down is per node: an Idle node that has been idle for at least
`idle_timeout` and is not needed by pending work is drained and
terminated, never below `min_nodes`. With an empty queue every idle node
times out, so the cluster scales to zero.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum

from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from .cluster import ClusterSnapshot, ClusterState
from .errors import ConfigValidationError, ProviderError, ProviderUnavailable
from .events import EventKind
from .models import LIVE_NODE_STATES, SUPPLY_NODE_STATES, ClusterConfig, NodeState
from .providers import CloudProvider, ConcreteInstanceRequest


LOGGER = logging.getLogger("vcluster.autoscaler")


class ActionKind(str, Enum):
    CREATE_NODE = "CreateNode"
    DRAIN_NODE = "DrainNode"
    TERMINATE_NODE = "TerminateNode"


@dataclass(frozen=True)
class ScaleAction:
    kind: ActionKind
    node_id: str | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if self.kind != ActionKind.CREATE_NODE and not self.node_id:
            raise ValueError(f"{self.kind.value} requires a node_id")


@dataclass(frozen=True)
class RetryPolicy:
    """Attempt k that fails waits `backoff_base * backoff_factor**(k-1)` ms.

    The live service sleeps for that long. The simulation does not advance
    its virtual clock: every attempt of an action happens at the reconcile
    instant and the wait is only recorded as `delay_ms` on the
    `ProviderRetry` event.
    """

    max_attempts: int = 3
    backoff_base: int = 2_000
    backoff_factor: float = 2.0

    def __post_init__(self) -> None:
        problems: list[str] = []
        if self.max_attempts < 1:
            problems.append("max_attempts must be >= 1")
        if self.backoff_base < 0:
            problems.append("backoff_base must be >= 0")
        if self.backoff_factor < 1:
            problems.append("backoff_factor must be >= 1")
        if problems:
            raise ConfigValidationError(context="retry policy", problems=problems)


@dataclass(frozen=True)
class ActionOutcome:
    action: ScaleAction
    ok: bool
    node_id: str | None = None
    instance_id: str | None = None
    attempts: int = 0
    error: str = ""


def reconcile(snapshot: ClusterSnapshot, demand: int, config: ClusterConfig, now: int) -> list[ScaleAction]:
    nodes = snapshot.nodes
    live_count = sum(1 for node in nodes if node.state in LIVE_NODE_STATES)
    # Failed nodes pass back through Terminating on their way out.
    failed_count = sum(1 for node in nodes if node.state == NodeState.FAILED)
    headroom = max(0, config.max_nodes - live_count - failed_count)

    wanted = max(int(demand), config.min_nodes - live_count, 0)
    creates = min(wanted, headroom)
    reason = f"demand={demand} live={live_count}"
    actions = [ScaleAction(ActionKind.CREATE_NODE, reason=reason) for _ in range(creates)]

    supply = sum(1 for node in nodes if node.state in SUPPLY_NODE_STATES)
    needed = min(config.max_nodes, snapshot.pending_need)
    releasable = min(max(0, supply - needed), max(0, live_count - config.min_nodes))

    timed_out = sorted(
        (
            node
            for node in nodes
            if node.state == NodeState.IDLE and now - int(node.idle_since or 0) >= config.idle_timeout
        ),
        key=lambda node: (node.idle_since, node.node_id),
    )[:releasable]

    per_node: dict[str, list[ScaleAction]] = {}
    for node in timed_out:
        idle_for = now - int(node.idle_since or 0)
        steps = [ScaleAction(ActionKind.DRAIN_NODE, node.node_id, f"idle {idle_for}ms")]
        if config.drain_grace <= 0:
            steps.append(ScaleAction(ActionKind.TERMINATE_NODE, node.node_id, "drained"))
        per_node[node.node_id] = steps

    for node in nodes:
        if node.state == NodeState.FAILED:
            per_node[node.node_id] = [ScaleAction(ActionKind.TERMINATE_NODE, node.node_id, "failed")]
        elif node.state == NodeState.TERMINATING:
            per_node[node.node_id] = [ScaleAction(ActionKind.TERMINATE_NODE, node.node_id, "delete pending")]
        elif node.state == NodeState.DRAINING and now - node.state_since >= config.drain_grace:
            per_node[node.node_id] = [ScaleAction(ActionKind.TERMINATE_NODE, node.node_id, "drain grace over")]

    for node_id in sorted(per_node):
        actions.extend(per_node[node_id])
    return actions


def _no_sleep(_seconds: float) -> None:
    return None


class ActionApplier:
    """Apply scale actions through a provider with retry."""

    def __init__(
        self,
        *,
        cluster: ClusterState,
        provider: CloudProvider,
        request: ConcreteInstanceRequest,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._cluster = cluster
        self._provider = provider
        self._request = request
        self._retry = retry or RetryPolicy()
        self._sleep = sleep

    def apply(self, actions: list[ScaleAction]) -> list[ActionOutcome]:
        outcomes: list[ActionOutcome] = []
        for action in actions:
            if action.kind == ActionKind.CREATE_NODE:
                outcomes.append(self._create(action))
            elif action.kind == ActionKind.DRAIN_NODE:
                outcomes.append(self._drain(action))
            else:
                outcomes.append(self._terminate(action))
        return outcomes

    def _call(self, action: ScaleAction, node_id: str, fn: Callable[[], object]) -> tuple[object, int]:
        attempts = 0

        def attempt() -> object:
            nonlocal attempts
            attempts += 1
            return fn()

        def on_retry(retry_state) -> None:
            delay = retry_state.next_action.sleep if retry_state.next_action else 0.0
            error = retry_state.outcome.exception() if retry_state.outcome else None
            self._cluster.log.append(
                self._cluster.now(),
                EventKind.PROVIDER_RETRY,
                action=action.kind.value,
                node_id=node_id,
                attempt=retry_state.attempt_number,
                delay_ms=int(round(delay * 1000)),
                error=str(error) if error else None,
            )
            LOGGER.warning(
                "[PROVIDER]: %s for %s failed on attempt %d, retrying in %.1fs",
                action.kind.value,
                node_id,
                retry_state.attempt_number,
                delay,
            )

        retrying = Retrying(
            stop=stop_after_attempt(self._retry.max_attempts),
            wait=wait_exponential(
                multiplier=self._retry.backoff_base / 1000,
                exp_base=self._retry.backoff_factor,
            ),
            retry=retry_if_exception_type(ProviderError),
            sleep=self._sleep,
            before_sleep=on_retry,
            reraise=True,
        )
        try:
            return retrying(attempt), attempts
        except ProviderError as exc:
            raise ProviderUnavailable(f"{action.kind.value} failed after {attempts} attempts: {exc}") from exc

    def _create(self, action: ScaleAction) -> ActionOutcome:
        node = self._cluster.request_node()
        request = self._request.with_metadata(node_id=node.node_id)
        try:
            instance_id, attempts = self._call(action, node.node_id, lambda: self._provider.create_instance(request))
        except ProviderUnavailable as exc:
            self._cluster.transition(node.node_id, NodeState.FAILED, reason=str(exc))
            LOGGER.warning("[VCLUSTER]: node %s failed: %s", node.node_id, exc)
            return ActionOutcome(action, ok=False, node_id=node.node_id, attempts=self._retry.max_attempts, error=str(exc))

        self._cluster.transition(node.node_id, NodeState.PROVISIONING, instance_id=str(instance_id))
        return ActionOutcome(action, ok=True, node_id=node.node_id, instance_id=str(instance_id), attempts=attempts)

    def _drain(self, action: ScaleAction) -> ActionOutcome:
        node = self._cluster.nodes.get(str(action.node_id))
        if node is None or node.state != NodeState.IDLE:
            return ActionOutcome(action, ok=False, node_id=action.node_id, error="node is no longer Idle")
        self._cluster.transition(node.node_id, NodeState.DRAINING)
        return ActionOutcome(action, ok=True, node_id=node.node_id, instance_id=node.instance_id)

    def _terminate(self, action: ScaleAction) -> ActionOutcome:
        node = self._cluster.nodes.get(str(action.node_id))
        if node is None or node.state not in (NodeState.DRAINING, NodeState.FAILED, NodeState.TERMINATING):
            return ActionOutcome(action, ok=False, node_id=action.node_id, error="node is not terminable")

        if node.state != NodeState.TERMINATING:
            node = self._cluster.transition(node.node_id, NodeState.TERMINATING)

        attempts = 0
        if node.instance_id:
            instance_id = node.instance_id
            try:
                _, attempts = self._call(action, node.node_id, lambda: self._provider.delete_instance(instance_id))
            except ProviderUnavailable as exc:
                LOGGER.warning("[VCLUSTER]: delete of %s (%s) deferred: %s", node.node_id, instance_id, exc)
                return ActionOutcome(
                    action,
                    ok=False,
                    node_id=node.node_id,
                    instance_id=instance_id,
                    attempts=self._retry.max_attempts,
                    error=str(exc),
                )

        self._cluster.transition(node.node_id, NodeState.TERMINATED)
        return ActionOutcome(action, ok=True, node_id=node.node_id, instance_id=node.instance_id, attempts=attempts)


def apply(
    actions: list[ScaleAction],
    *,
    cluster: ClusterState,
    provider: CloudProvider,
    request: ConcreteInstanceRequest,
    retry: RetryPolicy | None = None,
    sleep: Callable[[float], None] = _no_sleep,
) -> list[ActionOutcome]:
    applier = ActionApplier(cluster=cluster, provider=provider, request=request, retry=retry, sleep=sleep)
    return applier.apply(actions)
