"""Deterministic in-memory provider.

Every create and delete call draws exactly one uniform variate from the
seeded stream to decide failure, so a seed and a call sequence fix the
whole failure schedule, the latencies and the ids.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass

from ..errors import CapacityExceeded, ConfigValidationError, ProviderError, UnknownInstance
from ..events import Clock
from .base import CloudProvider, InstanceState
from .profiles import ConcreteInstanceRequest


LOGGER = logging.getLogger("vcluster.provider")


@dataclass(frozen=True)
class SimProviderConfig:
    seed: int = 0
    provision_latency: int = 30_000
    # Uniform in [provision_latency, provision_latency_max] when set.
    provision_latency_max: int | None = None
    failure_rate: float = 0.0
    capacity: int | None = None

    def __post_init__(self) -> None:
        problems: list[str] = []
        if not 0.0 <= float(self.failure_rate) <= 1.0:
            problems.append(f"failure_rate must be within [0, 1], got {self.failure_rate}")
        if self.provision_latency < 0:
            problems.append("provision_latency must be >= 0")
        if self.provision_latency_max is not None and self.provision_latency_max < self.provision_latency:
            problems.append("provision_latency_max must be >= provision_latency")
        if self.capacity is not None and self.capacity < 0:
            problems.append("capacity must be >= 0")
        if problems:
            raise ConfigValidationError(context="simulated provider", problems=problems)


@dataclass
class _SimInstance:
    instance_id: str
    request: ConcreteInstanceRequest
    state: InstanceState
    activate_at: int


class SimulatedProvider(CloudProvider):
    def __init__(self, config: SimProviderConfig, *, clock: Clock):
        super().__init__()
        self._config = config
        self._clock = clock
        self._rng = random.Random(config.seed)
        self._counter = 0
        self._instances: dict[str, _SimInstance] = {}
        self._issued: set[str] = set()
        self._pending: list[tuple[int, int, str]] = []

    @property
    def config(self) -> SimProviderConfig:
        return self._config

    def create_instance(self, request: ConcreteInstanceRequest) -> str:
        draw = self._rng.random()
        capacity = self._config.capacity
        if capacity is not None and len(self._instances) >= capacity:
            raise CapacityExceeded(f"capacity {capacity} reached")
        if draw < self._config.failure_rate:
            raise ProviderError("injected create failure")

        self._counter += 1
        instance_id = f"sim-{self._counter}"
        activate_at = self._clock.now() + self._draw_latency()
        self._instances[instance_id] = _SimInstance(
            instance_id=instance_id,
            request=request,
            state=InstanceState.BUILD,
            activate_at=activate_at,
        )
        self._issued.add(instance_id)
        heapq.heappush(self._pending, (activate_at, self._counter, instance_id))
        LOGGER.debug("[PROVIDER]: created %s active at %d", instance_id, activate_at)
        return instance_id

    def delete_instance(self, instance_id: str) -> None:
        if instance_id not in self._issued:
            raise UnknownInstance(f"instance '{instance_id}' was never issued")
        draw = self._rng.random()
        if instance_id not in self._instances:
            return
        if draw < self._config.failure_rate:
            raise ProviderError("injected delete failure")
        del self._instances[instance_id]
        LOGGER.debug("[PROVIDER]: deleted %s", instance_id)

    def list_instances(self) -> list[tuple[str, InstanceState]]:
        ordered = sorted(self._instances.values(), key=lambda item: int(item.instance_id.split("-", 1)[1]))
        return [(item.instance_id, item.state) for item in ordered]

    def next_activation_time(self) -> int | None:
        while self._pending and self._pending[0][2] not in self._instances:
            heapq.heappop(self._pending)
        return self._pending[0][0] if self._pending else None

    def advance(self, now: int) -> None:
        while self._pending and self._pending[0][0] <= now:
            activate_at, _, instance_id = heapq.heappop(self._pending)
            instance = self._instances.get(instance_id)
            if instance is None:
                continue
            instance.state = InstanceState.ACTIVE
            self._notify_active(instance_id, activate_at)

    def _draw_latency(self) -> int:
        low = self._config.provision_latency
        high = self._config.provision_latency_max
        if high is None or high == low:
            return low
        return self._rng.randint(low, high)
