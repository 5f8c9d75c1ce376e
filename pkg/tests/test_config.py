from __future__ import annotations

import json

import pytest

from conftest import CONFIG_DIR, shipped
from parashard.config import (
    TP_PLAIN,
    TP_SP,
    BindingError,
    ConfigError,
    ParallelConfig,
    UnsupportedBlockError,
    UnsupportedFlavorError,
    bind,
    default_tp_flavor,
    derive_dims,
    load_config,
    parse_config,
    parse_parallel_tuple,
    serialize,
)


def _doc(**model_overrides):
    model = {"name": "m", "block_kind": "transformer", "layers": 2, "d": 64, "a": 8, "k": 2, "d_h": 8, "I": 128}
    model.update(model_overrides)
    return {
        "model": model,
        "workload": {"b": 1, "global_batch": 8, "s": 32},
        "cluster": {
            "world": 8,
            "devices_per_node": 8,
            "mem_capacity": 1000000,
            "cube_peak": 1e12,
            "vector_peak": 1e11,
            "mem_bandwidth": 1e11,
            "intra_bw": 1e10,
            "inter_bw": 1e9,
        },
    }


@pytest.mark.parametrize("name", ["llama1b", "llama7b", "mamba1b", "mamba7b"])
def test_shipped_configs_load(name):
    bundle = shipped(name)
    assert bundle.model.name == name
    assert bundle.workload.tokens_per_step == 1024 * 4096
    assert bundle.cluster.world == 8
    assert bundle.cluster.nodes == 1


def test_mamba_d_inner_defaults_to_expand_times_d():
    bundle = shipped("mamba1b")
    assert bundle.model.d_inner == 4096
    dims = derive_dims(bundle.model)
    assert dims.d_inproj == 2 * 4096 + 2 * 8 * 64 + 64


def test_derive_dims_rejects_transformer():
    with pytest.raises(UnsupportedBlockError):
        derive_dims(shipped("llama1b").model)


def test_unknown_key_names_the_field():
    doc = _doc(bogus=1)
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(doc))
    assert info.value.field == "model.bogus"


def test_missing_transformer_field():
    doc = _doc()
    del doc["model"]["d_h"]
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(doc))
    assert info.value.field == "model.d_h"


def test_head_dimension_must_match():
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(_doc(d_h=16)))
    assert info.value.field == "model.d"


def test_k_must_divide_a():
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(_doc(k=3)))
    assert info.value.field == "model.k"


def test_non_integer_layers_rejected():
    with pytest.raises(ConfigError):
        parse_config(json.dumps(_doc(layers=2.5)))


def test_invalid_json_reports_position():
    with pytest.raises(ConfigError) as info:
        parse_config("{\n  \"model\": ", source="broken.json")
    assert "broken.json" in str(info.value)
    assert info.value.rule == "parse"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_world_must_be_multiple_of_node_size():
    doc = _doc()
    doc["cluster"]["devices_per_node"] = 3
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(doc))
    assert info.value.field == "cluster.world"


def test_serialize_round_trips_shipped_config():
    bundle = shipped("llama7b")
    again = parse_config(serialize(bundle.model, bundle.workload, bundle.cluster, bundle.slo))
    assert again == bundle


def test_parse_parallel_tuple():
    cfg = parse_parallel_tuple("4, 2, 1, 1")
    assert cfg.degrees == (4, 2, 1, 1)
    assert cfg.tp_flavor == TP_PLAIN
    assert cfg.label() == "(4,2,1,1)"


@pytest.mark.parametrize("text", ["4,2,1", "4,2,x,1", "0,8,1,1"])
def test_parse_parallel_tuple_rejects(text):
    with pytest.raises(ConfigError):
        parse_parallel_tuple(text)


def test_unknown_flavor_rejected():
    with pytest.raises(UnsupportedFlavorError):
        parse_parallel_tuple("8,1,1,1", "megatron")


def test_bind_checks_world():
    cluster = shipped("llama1b").cluster
    assert bind(ParallelConfig(dp=8), cluster).unbind() == ParallelConfig(dp=8)
    with pytest.raises(BindingError) as info:
        bind(ParallelConfig(dp=2, tp=2), cluster)
    assert "4" in str(info.value) and "8" in str(info.value)


def test_default_flavor_by_block_kind():
    assert default_tp_flavor(shipped("llama1b").model) == TP_PLAIN
    assert default_tp_flavor(shipped("mamba1b").model) == TP_SP


def test_shipped_config_directory_matches_references():
    assert sorted(path.stem for path in CONFIG_DIR.glob("*.json")) == ["llama1b", "llama7b", "mamba1b", "mamba7b"]
