"""Per-cloud naming and network rules.

Moving the cluster between OpenStack clouds changes exactly three things:
the base image name, the instance flavor names and whether the private
network needs explicit DHCP servers. A profile captures those edits as data
so the cluster config itself never changes.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Any

from ..errors import ConfigValidationError, UnmappedName
from ..models import ClusterConfig


@dataclass(frozen=True)
class NetworkSpec:
    private_net_name: str
    explicit_dhcp: bool = False
    dhcp_servers: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, Any]:
        return {
            "private_net_name": self.private_net_name,
            "explicit_dhcp": self.explicit_dhcp,
            "dhcp_servers": list(self.dhcp_servers),
        }


@dataclass(frozen=True)
class CloudProfile:
    name: str
    image_map: Mapping[str, str]
    flavor_map: Mapping[str, str]
    network: NetworkSpec


@dataclass(frozen=True)
class ConcreteInstanceRequest:
    image_name: str
    flavor_name: str
    network: NetworkSpec
    metadata: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def with_metadata(self, **tags: str) -> "ConcreteInstanceRequest":
        merged = dict(self.metadata)
        merged.update({key: str(value) for key, value in tags.items()})
        return replace(self, metadata=tuple(sorted(merged.items())))

    def as_dict(self) -> dict[str, Any]:
        return {
            "image_name": self.image_name,
            "flavor_name": self.flavor_name,
            "network": self.network.as_dict(),
            "metadata": dict(self.metadata),
        }


def _lookup(mapping: Mapping[str, str], logical: str, *, kind: str) -> str:
    value = mapping.get(logical)
    if not value:
        raise UnmappedName(logical, context=f"{kind} map")
    return value


def resolve(config: ClusterConfig, profile: CloudProfile) -> ConcreteInstanceRequest:
    return ConcreteInstanceRequest(
        image_name=_lookup(profile.image_map, config.node_image, kind="image"),
        flavor_name=_lookup(profile.flavor_map, config.node_flavor, kind="flavor"),
        network=profile.network,
        metadata=(("cluster", config.name), ("role", "worker")),
    )


def headnode_request(config: ClusterConfig, profile: CloudProfile) -> ConcreteInstanceRequest:
    """Resolve the persistent headnode. It is not counted against max_nodes."""
    flavor = config.headnode_flavor or config.node_flavor
    return ConcreteInstanceRequest(
        image_name=_lookup(profile.image_map, config.node_image, kind="image"),
        flavor_name=_lookup(profile.flavor_map, flavor, kind="flavor"),
        network=profile.network,
        metadata=(("cluster", config.name), ("role", "headnode")),
    )


def validate_profile(profile: CloudProfile, config: ClusterConfig | None = None) -> None:
    problems: list[str] = []
    context = f"profile {profile.name}"

    if not profile.network.private_net_name:
        problems.append("network.private_net_name is required")
    if profile.network.explicit_dhcp and not profile.network.dhcp_servers:
        problems.append("network.explicit_dhcp requires at least one dhcp_servers entry")

    for kind, mapping in (("image", profile.image_map), ("flavor", profile.flavor_map)):
        seen: dict[str, str] = {}
        for logical in sorted(mapping):
            target = mapping[logical]
            if target in seen:
                problems.append(f"{kind} '{target}' is mapped from both '{seen[target]}' and '{logical}'")
            seen[target] = logical

    if config is not None:
        if config.node_image not in profile.image_map:
            problems.append(f"image '{config.node_image}' is not in the image map")
        flavors = [config.node_flavor] + ([config.headnode_flavor] if config.headnode_flavor else [])
        for flavor in flavors:
            if flavor not in profile.flavor_map:
                problems.append(f"flavor '{flavor}' is not in the flavor map")

    if problems:
        raise ConfigValidationError(context=context, problems=problems)
