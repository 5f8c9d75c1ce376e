from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from parashard.config import MAMBA2, TRANSFORMER, ClusterSpec, ConfigBundle, ModelSpec, WorkloadSpec, load_config

CONFIG_DIR = ROOT / "baseline" / "configs"


def shipped(name: str) -> ConfigBundle:
    return load_config(CONFIG_DIR / f"{name}.json")


@pytest.fixture
def llama7b() -> ConfigBundle:
    return shipped("llama7b")


@pytest.fixture
def mamba7b() -> ConfigBundle:
    return shipped("mamba7b")


@pytest.fixture
def small_transformer() -> ModelSpec:
    return ModelSpec(name="small", block_kind=TRANSFORMER, layers=4, d=64, a=8, k=2, d_h=8, I=256, v=1000)


@pytest.fixture
def small_mamba() -> ModelSpec:
    return ModelSpec(
        name="small-ssm",
        block_kind=MAMBA2,
        layers=4,
        d=64,
        n=16,
        expand_mamba=2,
        d_inner=128,
        ngroups_ssm=2,
        h=8,
        p=16,
        l=8,
    )


@pytest.fixture
def small_workload() -> WorkloadSpec:
    return WorkloadSpec(b=2, global_batch=16, s=64)


@pytest.fixture
def small_cluster() -> ClusterSpec:
    return ClusterSpec(
        world=8,
        devices_per_node=4,
        mem_capacity=10**12,
        cube_peak=1e12,
        vector_peak=1e11,
        mem_bandwidth=1e11,
        intra_bw=1e10,
        inter_bw=1e9,
    )


def with_training_state(bundle: ConfigBundle, bytes_per_param: int) -> ConfigBundle:
    cluster = dataclasses.replace(bundle.cluster, training_state_bytes_per_param=bytes_per_param)
    return bundle._replace(cluster=cluster)
