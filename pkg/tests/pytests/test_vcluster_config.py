from __future__ import annotations

import importlib
from pathlib import Path

import pytest
import yaml


config = importlib.import_module("src.config")
errors = importlib.import_module("src.errors")
store = importlib.import_module("src.store")


def _write_yaml(path: Path, data) -> Path:
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def _cluster_dict(**cluster_overrides) -> dict:
    cluster = {"name": "test", "max_nodes": 4, "idle_timeout": 300, "reconcile_interval": 10}
    cluster.update(cluster_overrides)
    return {
        "cluster": cluster,
        "nodes": {
            "flavor": "m1.quad",
            "image": "centos7-hpc",
            "cores_per_node": 4,
            "mem_per_node_gb": 10,
            "rmax_per_node_gflops": 160,
        },
        "mpi": {"host": "OpenMPI 3.1.0"},
    }


def test_bundled_cluster_config(config_dir: Path, monkeypatch) -> None:
    monkeypatch.delenv("VC_CLUSTER_NAME", raising=False)
    cluster = config.load_cluster_config(config_dir / "cluster.yml")

    assert cluster.name == "vcluster"
    assert cluster.max_nodes == 4
    assert cluster.idle_timeout == 300_000
    assert cluster.reconcile_interval == 10_000
    assert cluster.mem_per_node_bytes == 10_000_000_000
    assert cluster.headnode_flavor == "m1.medium"
    assert cluster.storage.work_gb == 500
    assert str(cluster.host_mpi) == "OpenMPI 3.1.0"


def test_environment_interpolation(config_dir: Path, monkeypatch) -> None:
    monkeypatch.setenv("VC_CLUSTER_NAME", "hpl-lab")
    assert config.load_cluster_config(config_dir / "cluster.yml").name == "hpl-lab"

    monkeypatch.delenv("VC_UNSET_FOR_TEST", raising=False)
    assert config.interpolate_value("${VC_UNSET_FOR_TEST:-fallback}") == "fallback"
    assert config.interpolate_value("x${VC_UNSET_FOR_TEST}y") == "xy"


def test_problems_are_collected_together() -> None:
    data = _cluster_dict(max_nodes="four", idle_timeout=300)
    data["nodes"]["colour"] = "blue"
    data["extras"] = {}
    del data["mpi"]

    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.cluster_config_from_dict(data, context="cluster.yml")

    problems = excinfo.value.problems
    assert "unknown section 'extras'" in problems
    assert "nodes.colour is not a known key" in problems
    assert "cluster.max_nodes must be integer, got str" in problems
    assert "mpi.host is required" in problems
    assert excinfo.value.format().startswith("[config] validation failed: cluster.yml")


@pytest.mark.parametrize(
    "overrides,problem",
    [
        ({"max_nodes": 0}, "cluster.max_nodes must be >= 1"),
        ({"min_nodes": 5}, "cluster.min_nodes must be <= cluster.max_nodes"),
        ({"idle_timeout": 0}, "cluster.idle_timeout must be > 0"),
        ({"reconcile_interval": -1}, "cluster.reconcile_interval must be > 0"),
    ],
)
def test_cluster_ranges(overrides, problem) -> None:
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.cluster_config_from_dict(_cluster_dict(**overrides))
    assert problem in excinfo.value.problems


def test_booleans_are_not_integers() -> None:
    with pytest.raises(errors.ConfigValidationError):
        config.cluster_config_from_dict(_cluster_dict(max_nodes=True))


def test_invalid_yaml_and_non_mapping(tmp_path: Path) -> None:
    broken = tmp_path / "broken.yml"
    broken.write_text("cluster: [unclosed\n", encoding="utf-8")
    with pytest.raises(errors.ConfigValidationError):
        config.load_cluster_config(broken)

    listing = tmp_path / "list.yml"
    listing.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(errors.ConfigValidationError):
        config.read_yaml(listing)


def test_profiles_load(jetstream_profile, redcloud_profile) -> None:
    assert jetstream_profile.image_map["centos7-hpc"] == "JS-API-Featured-CentOS7-Latest"
    assert jetstream_profile.network.explicit_dhcp is False
    assert redcloud_profile.flavor_map["m1.quad"] == "c4.m32"
    assert redcloud_profile.network.dhcp_servers == ("10.0.0.2", "10.0.0.3")


def test_profile_requires_dhcp_servers_when_explicit(tmp_path: Path) -> None:
    path = _write_yaml(
        tmp_path / "profile.yml",
        {
            "profile": {"name": "p"},
            "images": {"centos7-hpc": "centos-7"},
            "flavors": {"m1.quad": ""},
            "network": {"private_net_name": "net", "explicit_dhcp": True},
        },
    )
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.load_profile(path)
    assert "network.explicit_dhcp requires dhcp_servers" in excinfo.value.problems
    assert "flavors.m1.quad must be a non-empty string" in excinfo.value.problems


def test_provider_config(config_dir: Path) -> None:
    provider, retry = config.load_provider_config(config_dir / "sim-provider.yml")
    assert provider.provision_latency == 30_000
    assert provider.failure_rate == 0.0
    assert retry.max_attempts == 3
    assert retry.backoff_base == 2_000
    assert retry.backoff_factor == 2.0

    default_provider, default_retry = config.load_provider_config(None)
    assert default_provider.provision_latency == 30_000
    assert default_retry.max_attempts == 3


def test_provider_config_ranges_are_checked() -> None:
    with pytest.raises(errors.ConfigValidationError):
        config.provider_config_from_dict({"provider": {"failure_rate": 2.0}})
    with pytest.raises(errors.ConfigValidationError):
        config.provider_config_from_dict({"retry": {"max_attempts": 0}})


def test_derivation_file(config_dir: Path) -> None:
    derivation = config.load_derivation(config_dir / "derivations" / "openmpi.yml")
    assert derivation.name == "openmpi"
    assert derivation.builder == "nix-build"
    assert dict(derivation.config)["with_pmi"] is True
    assert store.is_digest(store.hash_derivation(derivation))


def test_derivation_rejects_bad_digests() -> None:
    data = {
        "derivation": {"name": "hpl"},
        "inputs": ["abc"],
        "sources": [{"uri": "https://example.org/hpl.tgz", "digest": "nope"}],
    }
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.derivation_from_dict(data)
    assert len(excinfo.value.problems) == 2


def test_registry(config_dir: Path, tmp_path: Path) -> None:
    registry = config.load_registry(config_dir / "registry.yml")
    assert set(registry) == {"hub/hpl:latest", "hub/hpl:openmpi-4.0.1", "hub/nix-ompi:latest"}
    assert all(store.is_digest(digest) for digest in registry.values())

    bad = _write_yaml(tmp_path / "registry.yml", {"digests": {"hub/hpl:latest": "short"}, "extra": {}})
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.load_registry(bad)
    assert len(excinfo.value.problems) == 2


def test_trace_rows(config_dir: Path, tmp_path: Path) -> None:
    rows = config.read_trace_rows(config_dir / "traces" / "hpl-burst.csv")
    assert len(rows) == 4
    assert rows[2]["walltime_limit"] == "240"
    assert rows[2]["mpi"] == ""

    assert config.read_trace_rows(tmp_path / "missing.csv") == []
    empty = tmp_path / "empty.csv"
    empty.touch()
    assert config.read_trace_rows(empty) == []


def test_trace_header_and_width_are_checked(tmp_path: Path) -> None:
    bad_header = tmp_path / "header.csv"
    bad_header.write_text("when,nodes\n0,1\n", encoding="utf-8")
    with pytest.raises(errors.ConfigValidationError):
        config.read_trace_rows(bad_header)

    short_row = tmp_path / "short.csv"
    short_row.write_text(",".join(config.TRACE_COLUMNS) + "\n0,1,4\n", encoding="utf-8")
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.read_trace_rows(short_row)
    assert excinfo.value.context.endswith(":2")


def test_append_trace_row(tmp_path: Path) -> None:
    path = tmp_path / "traces" / "new.csv"
    row = {
        "submit_time": 10,
        "node_count": 2,
        "tasks_per_node": 4,
        "duration": 60,
        "walltime_limit": 120,
        "image": "hub/hpl:latest",
        "mpi": None,
        "command": "xhpl",
    }
    config.append_trace_row(path, row)
    config.append_trace_row(path, {**row, "submit_time": 10, "node_count": 1})

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(config.TRACE_COLUMNS)
    assert lines[1] == "10,2,4,60,120,hub/hpl:latest,,xhpl"
    assert len(lines) == 3

    with pytest.raises(errors.ConfigValidationError):
        config.append_trace_row(path, {**row, "submit_time": 5})
    assert len(path.read_text(encoding="utf-8").splitlines()) == 3


def test_durations_are_checked_after_rounding() -> None:
    with pytest.raises(errors.ConfigValidationError) as excinfo:
        config.cluster_config_from_dict(
            _cluster_dict(reconcile_interval=0.0004, idle_timeout=0.0004), context="cluster.yml"
        )

    assert excinfo.value.context == "cluster.yml"
    assert "cluster.reconcile_interval must be >= 1 ms, got 0 ms" in excinfo.value.problems
    assert "cluster.idle_timeout must be >= 1 ms, got 0 ms" in excinfo.value.problems
    assert config.cluster_config_from_dict(_cluster_dict(reconcile_interval=0.001)).reconcile_interval == 1


@pytest.mark.parametrize(
    "overrides",
    [
        {"reconcile_interval": 0},
        {"idle_timeout": 0},
        {"min_nodes": 5},
        {"max_nodes": 0},
        {"drain_grace": -1},
    ],
)
def test_cluster_config_rejects_out_of_range_values(make_config, overrides) -> None:
    with pytest.raises(errors.ConfigValidationError):
        make_config(**overrides)
