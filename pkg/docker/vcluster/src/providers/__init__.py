from .base import CloudProvider, InstanceState
from .profiles import (
    CloudProfile,
    ConcreteInstanceRequest,
    NetworkSpec,
    headnode_request,
    resolve,
    validate_profile,
)
from .simulated import SimProviderConfig, SimulatedProvider


PROVIDERS: dict[str, type[CloudProvider]] = {
    "simulated": SimulatedProvider,
}


__all__ = [
    "CloudProvider",
    "InstanceState",
    "CloudProfile",
    "ConcreteInstanceRequest",
    "NetworkSpec",
    "SimProviderConfig",
    "SimulatedProvider",
    "headnode_request",
    "resolve",
    "validate_profile",
    "PROVIDERS",
]
