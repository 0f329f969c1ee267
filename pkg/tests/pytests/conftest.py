from __future__ import annotations

import importlib
import sys
from dataclasses import replace
from pathlib import Path

import pytest


REPO_ROOT = Path(__file__).parents[2]
VCLUSTER_ROOT = REPO_ROOT / "docker" / "vcluster"
CONFIG_DIR = VCLUSTER_ROOT / "config"


def pytest_configure() -> None:
    # Allow tests to import `scripts.*` and the orchestrator package `src.*`.
    for path in (REPO_ROOT, VCLUSTER_ROOT):
        if str(path) not in sys.path:
            sys.path.append(str(path))


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture
def make_config():
    models = importlib.import_module("src.models")
    store = importlib.import_module("src.store")

    base = models.ClusterConfig(
        max_nodes=4,
        node_flavor="m1.quad",
        node_image="centos7-hpc",
        cores_per_node=4,
        mem_per_node_bytes=10_000_000_000,
        rmax_per_node_gflops=160.0,
        host_mpi=store.MpiRuntime.parse("OpenMPI 3.1.0"),
        idle_timeout=300_000,
        reconcile_interval=10_000,
    )

    def _make(**overrides):
        return replace(base, **overrides)

    return _make


@pytest.fixture
def jetstream_profile():
    config = importlib.import_module("src.config")
    return config.load_profile(CONFIG_DIR / "profiles" / "jetstream-like.yml")


@pytest.fixture
def redcloud_profile():
    config = importlib.import_module("src.config")
    return config.load_profile(CONFIG_DIR / "profiles" / "redcloud-like.yml")
