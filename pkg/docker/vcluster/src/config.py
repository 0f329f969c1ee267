"""YAML config loading with a strict, typed schema.

Every config file is a set of named sections holding `key: value` pairs.
Each key is declared with a type (integer, real, string, boolean or string
list); unknown keys, missing mandatory keys and type mismatches are all
collected and reported together. String values support `${VAR}` and
`${VAR:-default}` interpolation from the environment.

Durations are written in seconds and converted to integer milliseconds.
"""

from __future__ import annotations

import csv
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .autoscaler import RetryPolicy
from .errors import ConfigValidationError
from .models import ClusterConfig, SharedStorageSpec, seconds_to_ms
from .providers import CloudProfile, NetworkSpec, SimProviderConfig
from .store import Derivation, MpiRuntime, is_digest


INTERPOLATION_PATTERN = re.compile(r"\$\{([^}:]+)(?::-([^}]*))?\}")
BYTES_PER_GB = 1_000_000_000


class FieldKind(str, Enum):
    INT = "integer"
    REAL = "real"
    STR = "string"
    BOOL = "boolean"
    STR_LIST = "string list"


@dataclass(frozen=True)
class FieldSpec:
    key: str
    kind: FieldKind
    mandatory: bool = False
    default: Any = None


CLUSTER_SCHEMA: dict[str, tuple[FieldSpec, ...]] = {
    "cluster": (
        FieldSpec("name", FieldKind.STR, default="vcluster"),
        FieldSpec("max_nodes", FieldKind.INT, mandatory=True),
        FieldSpec("min_nodes", FieldKind.INT, default=0),
        FieldSpec("idle_timeout", FieldKind.REAL, default=300),
        FieldSpec("reconcile_interval", FieldKind.REAL, default=10),
        FieldSpec("drain_grace", FieldKind.REAL, default=0),
    ),
    "nodes": (
        FieldSpec("flavor", FieldKind.STR, mandatory=True),
        FieldSpec("image", FieldKind.STR, mandatory=True),
        FieldSpec("cores_per_node", FieldKind.INT, mandatory=True),
        FieldSpec("mem_per_node_gb", FieldKind.REAL, mandatory=True),
        FieldSpec("rmax_per_node_gflops", FieldKind.REAL, mandatory=True),
    ),
    "headnode": (FieldSpec("flavor", FieldKind.STR, default=""),),
    "storage": (
        FieldSpec("home_gb", FieldKind.INT, default=0),
        FieldSpec("work_gb", FieldKind.INT, default=0),
        FieldSpec("software_gb", FieldKind.INT, default=0),
    ),
    "mpi": (
        FieldSpec("host", FieldKind.STR, mandatory=True),
        FieldSpec("max_major_skew", FieldKind.INT, default=1),
    ),
}

PROFILE_SCHEMA: dict[str, tuple[FieldSpec, ...]] = {
    "profile": (FieldSpec("name", FieldKind.STR, mandatory=True),),
    "network": (
        FieldSpec("private_net_name", FieldKind.STR, mandatory=True),
        FieldSpec("explicit_dhcp", FieldKind.BOOL, default=False),
        FieldSpec("dhcp_servers", FieldKind.STR_LIST, default=[]),
    ),
}
PROFILE_MAP_SECTIONS = ("images", "flavors")

PROVIDER_SCHEMA: dict[str, tuple[FieldSpec, ...]] = {
    "provider": (
        FieldSpec("seed", FieldKind.INT, default=0),
        FieldSpec("provision_latency", FieldKind.REAL, default=30),
        FieldSpec("provision_latency_max", FieldKind.REAL),
        FieldSpec("failure_rate", FieldKind.REAL, default=0.0),
        FieldSpec("capacity", FieldKind.INT),
    ),
    "retry": (
        FieldSpec("max_attempts", FieldKind.INT, default=3),
        FieldSpec("backoff_base", FieldKind.REAL, default=2),
        FieldSpec("backoff_factor", FieldKind.REAL, default=2.0),
    ),
}

DERIVATION_SCHEMA: dict[str, tuple[FieldSpec, ...]] = {
    "derivation": (
        FieldSpec("name", FieldKind.STR, mandatory=True),
        FieldSpec("builder", FieldKind.STR, default=""),
    ),
}


def interpolate_value(value: str) -> str:
    def replace_match(match: re.Match) -> str:
        env_val = os.getenv(match.group(1))
        if env_val is not None:
            return env_val
        return match.group(2) if match.group(2) is not None else ""

    return INTERPOLATION_PATTERN.sub(replace_match, value)


def _check_kind(spec: FieldSpec, value: Any) -> tuple[Any, str | None]:
    kind = spec.kind
    if kind == FieldKind.INT and isinstance(value, int) and not isinstance(value, bool):
        return value, None
    if kind == FieldKind.REAL and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value), None
    if kind == FieldKind.BOOL and isinstance(value, bool):
        return value, None
    if kind == FieldKind.STR and isinstance(value, str):
        return interpolate_value(value), None
    if kind == FieldKind.STR_LIST and isinstance(value, list) and all(isinstance(item, str) for item in value):
        return [interpolate_value(item) for item in value], None
    return None, f"{spec.key} must be {kind.value}, got {type(value).__name__}"


def read_yaml(path: Path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigValidationError(context=str(path), problems=[f"invalid YAML: {exc}"]) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigValidationError(context=str(path), problems=["top level must be a mapping of sections"])
    return data


def validate_sections(
    data: Mapping[str, Any],
    schema: Mapping[str, tuple[FieldSpec, ...]],
    *,
    context: str,
    extra_sections: tuple[str, ...] = (),
) -> dict[str, dict[str, Any]]:
    problems: list[str] = []
    out: dict[str, dict[str, Any]] = {}

    for section in sorted(set(data) - set(schema) - set(extra_sections)):
        problems.append(f"unknown section '{section}'")

    for section, specs in schema.items():
        raw = data.get(section) or {}
        if not isinstance(raw, dict):
            problems.append(f"section '{section}' must be a mapping")
            continue
        known = {spec.key for spec in specs}
        for key in sorted(set(raw) - known):
            problems.append(f"{section}.{key} is not a known key")

        values: dict[str, Any] = {}
        for spec in specs:
            if spec.key not in raw or raw[spec.key] is None:
                if spec.mandatory:
                    problems.append(f"{section}.{spec.key} is required")
                values[spec.key] = spec.default
                continue
            value, problem = _check_kind(spec, raw[spec.key])
            if problem:
                problems.append(f"{section}.{problem}")
            values[spec.key] = value
        out[section] = values

    if problems:
        raise ConfigValidationError(context=context, problems=problems)
    return out


def _string_map(data: Mapping[str, Any], section: str, problems: list[str]) -> dict[str, str]:
    raw = data.get(section) or {}
    if not isinstance(raw, dict):
        problems.append(f"section '{section}' must be a mapping")
        return {}
    out: dict[str, str] = {}
    for key, value in raw.items():
        if not isinstance(value, str) or not value:
            problems.append(f"{section}.{key} must be a non-empty string")
            continue
        out[str(key)] = interpolate_value(value)
    return out


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def cluster_config_from_dict(data: Mapping[str, Any], *, context: str = "cluster config") -> ClusterConfig:
    sections = validate_sections(data, CLUSTER_SCHEMA, context=context)
    cluster, nodes, mpi = sections["cluster"], sections["nodes"], sections["mpi"]
    problems: list[str] = []

    if cluster["max_nodes"] is not None and cluster["max_nodes"] < 1:
        problems.append("cluster.max_nodes must be >= 1")
    if cluster["min_nodes"] < 0:
        problems.append("cluster.min_nodes must be >= 0")
    elif cluster["max_nodes"] is not None and cluster["min_nodes"] > cluster["max_nodes"]:
        problems.append("cluster.min_nodes must be <= cluster.max_nodes")
    if cluster["idle_timeout"] <= 0:
        problems.append("cluster.idle_timeout must be > 0")
    if cluster["reconcile_interval"] <= 0:
        problems.append("cluster.reconcile_interval must be > 0")
    if cluster["drain_grace"] < 0:
        problems.append("cluster.drain_grace must be >= 0")
    if nodes["cores_per_node"] < 1:
        problems.append("nodes.cores_per_node must be >= 1")
    if nodes["mem_per_node_gb"] <= 0:
        problems.append("nodes.mem_per_node_gb must be > 0")
    if nodes["rmax_per_node_gflops"] <= 0:
        problems.append("nodes.rmax_per_node_gflops must be > 0")
    for key, value in sections["storage"].items():
        if value < 0:
            problems.append(f"storage.{key} must be >= 0")
    if mpi["max_major_skew"] < 0:
        problems.append("mpi.max_major_skew must be >= 0")

    host_mpi = None
    try:
        host_mpi = MpiRuntime.parse(mpi["host"])
    except ValueError as exc:
        problems.append(f"mpi.host: {exc}")

    if problems:
        raise ConfigValidationError(context=context, problems=problems)

    try:
        return _build_cluster_config(sections, host_mpi)
    except ConfigValidationError as exc:
        raise ConfigValidationError(context=context, problems=[f"cluster.{p}" for p in exc.problems]) from exc


def _build_cluster_config(sections: Mapping[str, Mapping[str, Any]], host_mpi: MpiRuntime) -> ClusterConfig:
    cluster, nodes, mpi = sections["cluster"], sections["nodes"], sections["mpi"]
    return ClusterConfig(
        name=cluster["name"],
        max_nodes=cluster["max_nodes"],
        min_nodes=cluster["min_nodes"],
        idle_timeout=seconds_to_ms(cluster["idle_timeout"]),
        reconcile_interval=seconds_to_ms(cluster["reconcile_interval"]),
        drain_grace=seconds_to_ms(cluster["drain_grace"]),
        node_flavor=nodes["flavor"],
        node_image=nodes["image"],
        cores_per_node=nodes["cores_per_node"],
        mem_per_node_bytes=int(round(nodes["mem_per_node_gb"] * BYTES_PER_GB)),
        rmax_per_node_gflops=nodes["rmax_per_node_gflops"],
        headnode_flavor=sections["headnode"]["flavor"],
        storage=SharedStorageSpec(**sections["storage"]),
        host_mpi=host_mpi,
        mpi_major_skew=mpi["max_major_skew"],
    )


def load_cluster_config(path: Path) -> ClusterConfig:
    return cluster_config_from_dict(read_yaml(path), context=str(path))


def profile_from_dict(data: Mapping[str, Any], *, context: str = "cloud profile") -> CloudProfile:
    sections = validate_sections(data, PROFILE_SCHEMA, context=context, extra_sections=PROFILE_MAP_SECTIONS)
    problems: list[str] = []
    image_map = _string_map(data, "images", problems)
    flavor_map = _string_map(data, "flavors", problems)
    network = sections["network"]
    if network["explicit_dhcp"] and not network["dhcp_servers"]:
        problems.append("network.explicit_dhcp requires dhcp_servers")
    if problems:
        raise ConfigValidationError(context=context, problems=problems)

    return CloudProfile(
        name=sections["profile"]["name"],
        image_map=image_map,
        flavor_map=flavor_map,
        network=NetworkSpec(
            private_net_name=network["private_net_name"],
            explicit_dhcp=network["explicit_dhcp"],
            dhcp_servers=tuple(network["dhcp_servers"] or ()),
        ),
    )


def load_profile(path: Path) -> CloudProfile:
    return profile_from_dict(read_yaml(path), context=str(path))


def provider_config_from_dict(
    data: Mapping[str, Any],
    *,
    context: str = "provider config",
) -> tuple[SimProviderConfig, RetryPolicy]:
    sections = validate_sections(data, PROVIDER_SCHEMA, context=context)
    provider, retry = sections["provider"], sections["retry"]
    latency_max = provider["provision_latency_max"]
    return (
        SimProviderConfig(
            seed=provider["seed"],
            provision_latency=seconds_to_ms(provider["provision_latency"]),
            provision_latency_max=seconds_to_ms(latency_max) if latency_max is not None else None,
            failure_rate=provider["failure_rate"],
            capacity=provider["capacity"],
        ),
        RetryPolicy(
            max_attempts=retry["max_attempts"],
            backoff_base=seconds_to_ms(retry["backoff_base"]),
            backoff_factor=retry["backoff_factor"],
        ),
    )


def load_provider_config(path: Path | None) -> tuple[SimProviderConfig, RetryPolicy]:
    if path is None:
        return SimProviderConfig(), RetryPolicy()
    return provider_config_from_dict(read_yaml(path), context=str(path))


def derivation_from_dict(data: Mapping[str, Any], *, context: str = "derivation") -> Derivation:
    sections = validate_sections(
        data, DERIVATION_SCHEMA, context=context, extra_sections=("inputs", "sources", "config")
    )
    problems: list[str] = []

    inputs = data.get("inputs") or []
    if not isinstance(inputs, list) or not all(isinstance(item, str) and is_digest(item) for item in inputs):
        problems.append("inputs must be a list of 64-character hex digests")
        inputs = []

    sources: list[tuple[str, str]] = []
    for index, item in enumerate(data.get("sources") or []):
        if not isinstance(item, dict) or set(item) != {"uri", "digest"}:
            problems.append(f"sources[{index}] must have exactly 'uri' and 'digest'")
            continue
        if not is_digest(str(item["digest"])):
            problems.append(f"sources[{index}].digest must be a 64-character hex digest")
            continue
        sources.append((interpolate_value(str(item["uri"])), str(item["digest"])))

    config = data.get("config") or {}
    if not isinstance(config, dict):
        problems.append("section 'config' must be a mapping")
        config = {}
    for key, value in config.items():
        if not isinstance(value, (str, int, float, bool)):
            problems.append(f"config.{key} must be a scalar")

    if problems:
        raise ConfigValidationError(context=context, problems=problems)

    return Derivation(
        name=sections["derivation"]["name"],
        inputs=frozenset(inputs),
        sources=frozenset(sources),
        config={str(key): value for key, value in config.items()},
        builder=sections["derivation"]["builder"],
    )


def load_derivation(path: Path) -> Derivation:
    return derivation_from_dict(read_yaml(path), context=str(path))


def load_registry(path: Path) -> dict[str, str]:
    """Read a `registry/name:tag -> digest` map from a `digests` section."""
    data = read_yaml(path)
    problems: list[str] = []
    for section in sorted(set(data) - {"digests"}):
        problems.append(f"unknown section '{section}'")
    digests = _string_map(data, "digests", problems)
    for reference, digest in digests.items():
        if not is_digest(digest):
            problems.append(f"digests.{reference} is not a 64-character hex digest")
    if problems:
        raise ConfigValidationError(context=str(path), problems=problems)
    return digests


# ---------------------------------------------------------------------------
# Workload traces
# ---------------------------------------------------------------------------


TRACE_COLUMNS = [
    "submit_time",
    "node_count",
    "tasks_per_node",
    "duration",
    "walltime_limit",
    "image",
    "mpi",
    "command",
]


def read_trace_rows(path: Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return []
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        return []
    header = rows[0]
    if header != TRACE_COLUMNS:
        raise ConfigValidationError(
            context=str(path),
            problems=[f"trace header must be {','.join(TRACE_COLUMNS)}"],
        )
    out: list[dict[str, str]] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise ConfigValidationError(
                context=f"{path}:{line_no}",
                problems=[f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}"],
            )
        out.append(dict(zip(TRACE_COLUMNS, (cell.strip() for cell in row))))
    return out


def append_trace_row(path: Path, row: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = read_trace_rows(path)
    if existing:
        last = float(existing[-1]["submit_time"])
        if float(str(row["submit_time"])) < last:
            raise ConfigValidationError(
                context=str(path),
                problems=[f"submit_time {row['submit_time']} precedes the last entry ({last})"],
            )
    write_header = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if write_header:
            writer.writerow(TRACE_COLUMNS)
        writer.writerow(["" if row.get(column) is None else str(row.get(column)) for column in TRACE_COLUMNS])
    return path
