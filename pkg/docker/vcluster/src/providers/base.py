from abc import ABC, abstractmethod
from collections.abc import Callable
from enum import Enum

from .profiles import ConcreteInstanceRequest


ActivationListener = Callable[[str, int], None]


class InstanceState(str, Enum):
    BUILD = "BUILD"
    ACTIVE = "ACTIVE"


class CloudProvider(ABC):
    """Four-operation compute contract.

    Implementations must be linearizable per instance id. Activation is
    asynchronous: `create_instance` returns immediately and listeners are
    told `(instance_id, activated_at)` once the instance is ACTIVE.
    """

    def __init__(self) -> None:
        self._listeners: list[ActivationListener] = []

    def subscribe(self, listener: ActivationListener) -> None:
        self._listeners.append(listener)

    def _notify_active(self, instance_id: str, at: int) -> None:
        for listener in self._listeners:
            listener(instance_id, at)

    @abstractmethod
    def create_instance(self, request: ConcreteInstanceRequest) -> str:
        """Start an instance and return its provider id."""

    @abstractmethod
    def delete_instance(self, instance_id: str) -> None:
        """Remove an instance. Deleting an already-deleted id succeeds."""

    @abstractmethod
    def list_instances(self) -> list[tuple[str, InstanceState]]:
        """Return the live instances in issue order."""

    def advance(self, now: int) -> None:
        """Deliver activations due by *now*. No-op for providers that push them."""
