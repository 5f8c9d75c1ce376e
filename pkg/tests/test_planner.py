from __future__ import annotations

import dataclasses
from fractions import Fraction

import pytest

from conftest import shipped, with_training_state
from parashard.config import (
    TP_PLAIN,
    TP_SP,
    BindingError,
    ParallelConfig,
    ParashardError,
    SLOSpec,
    UnsupportedFlavorError,
    WorkloadSpec,
)
from parashard.planner import (
    CostReport,
    EnumerationConstraints,
    PlannerOptions,
    enumerate_configs,
    evaluate_all,
    model_cost,
    plan,
    rank,
    resolve_flavor,
)
from parashard.services.schedule import bubble_fraction


def test_enumeration_counts_and_order():
    configs = enumerate_configs(8)
    assert len(configs) == 20
    assert configs[0].degrees == (8, 1, 1, 1)
    assert configs[-1].degrees == (1, 1, 1, 8)
    assert len({cfg.degrees for cfg in configs}) == 20
    assert len(enumerate_configs(16)) == 35
    assert [cfg.degrees for cfg in enumerate_configs(1)] == [(1, 1, 1, 1)]


def test_enumeration_constraints():
    limited = enumerate_configs(8, EnumerationConstraints(max_pp=2))
    assert all(cfg.pp <= 2 for cfg in limited)
    strict = enumerate_configs(16, EnumerationConstraints(strict_tp_intra_node=True, devices_per_node=8))
    assert all(cfg.tp <= 8 for cfg in strict)
    assert len(strict) == 34
    flavored = enumerate_configs(8, EnumerationConstraints(tp_flavor=TP_SP))
    assert {cfg.tp_flavor for cfg in flavored} == {TP_SP}


def test_world_mismatch_is_an_error(small_transformer, small_workload, small_cluster):
    with pytest.raises(BindingError):
        model_cost(small_transformer, small_workload, small_cluster, ParallelConfig(dp=4))


def test_microbatch_divisibility(small_transformer, small_cluster):
    work = WorkloadSpec(b=3, global_batch=12, s=64)
    report = model_cost(small_transformer, work, small_cluster, ParallelConfig(dp=8))
    assert not report.feasible
    assert report.reason.startswith("microbatch:")


def test_memory_capacity(small_transformer, small_workload, small_cluster):
    tight = dataclasses.replace(small_cluster, mem_capacity=1000)
    report = model_cost(small_transformer, small_workload, tight, ParallelConfig(dp=8))
    assert not report.feasible
    assert report.reason.startswith("memory:")
    assert report.step_time > 0


def test_report_basics(small_transformer, small_workload, small_cluster):
    report = model_cost(small_transformer, small_workload, small_cluster, ParallelConfig(pp=2, tp=4))
    assert report.feasible
    assert report.num_microbatches == 8
    assert report.layers_per_stage == 2
    assert report.bubble_fraction == pytest.approx(1 / 9)
    assert report.throughput == pytest.approx(small_workload.tokens_per_step / report.step_time)
    assert report.memory_bytes == pytest.approx(report.weight_bytes + report.activation_bytes)
    assert set(report.time_breakdown) == {"cube", "vector", "comm", "overhead"}
    assert "p2p_send_recv" in report.comm_by_kind
    assert "all_reduce" in report.comm_by_kind
    assert [blk.name for blk in report.blocks] == ["attention", "mlp"]
    assert report.ttft > 0


def test_pure_dp_charges_only_gradient_sync(small_transformer, small_workload, small_cluster):
    report = model_cost(small_transformer, small_workload, small_cluster, ParallelConfig(dp=8))
    assert list(report.comm_by_kind) == ["all_reduce"]
    # dp spans both nodes of four
    assert report.comm_bytes_inter > 0
    assert report.comm_bytes_intra == 0


def test_model_flops_are_configuration_independent(small_transformer, small_workload, small_cluster):
    reports = evaluate_all(
        small_transformer,
        small_workload,
        small_cluster,
        [ParallelConfig(dp=8), ParallelConfig(dp=2, tp=4), ParallelConfig(pp=2, cp=4)],
    )
    work = [report.mfu * report.step_time for report in reports]
    assert work[1] == pytest.approx(work[0])
    assert work[2] == pytest.approx(work[0])


def test_prefill_is_cheaper_than_training(small_transformer, small_workload, small_cluster):
    cfg = ParallelConfig(dp=2, tp=4)
    training = model_cost(small_transformer, small_workload, small_cluster, cfg)
    prefill = model_cost(small_transformer, dataclasses.replace(small_workload, mode="prefill"), small_cluster, cfg)
    assert prefill.step_time < training.step_time
    assert prefill.training_state_bytes == 0


def test_training_state_counts_toward_memory(small_transformer, small_workload, small_cluster):
    cfg = ParallelConfig(dp=8)
    stateful = dataclasses.replace(small_cluster, training_state_bytes_per_param=16)
    report = model_cost(small_transformer, small_workload, stateful, cfg)
    assert report.training_state_bytes == pytest.approx(report.params_per_device * 16)


def test_full_overlap_hides_communication(small_transformer, small_workload, small_cluster):
    report = model_cost(
        small_transformer, small_workload, small_cluster, ParallelConfig(dp=2, tp=4), PlannerOptions(overlap_eff=1.0)
    )
    assert report.time_breakdown["comm"] == 0.0
    assert report.comm_bytes > 0


def test_embeddings_add_weights(small_transformer, small_workload, small_cluster):
    cfg = ParallelConfig(dp=2, tp=4)
    plain = model_cost(small_transformer, small_workload, small_cluster, cfg)
    with_tables = model_cost(small_transformer, small_workload, small_cluster, cfg, PlannerOptions(include_embeddings=True))
    assert with_tables.weight_bytes - plain.weight_bytes == pytest.approx(2 * 1000 * 64 * 2 / 4)


def test_uneven_stage_split_noted(small_transformer, small_workload, small_cluster):
    report = model_cost(small_transformer, small_workload, small_cluster, ParallelConfig(pp=8))
    assert report.layers_per_stage == 1
    assert any(note.startswith("uneven stage split") for note in report.notes)


def test_mamba_needs_sequence_parallel_tp(small_mamba):
    assert resolve_flavor(small_mamba, PlannerOptions()) == TP_SP
    with pytest.raises(UnsupportedFlavorError):
        resolve_flavor(small_mamba, PlannerOptions(tp_flavor=TP_PLAIN))


def test_mamba_scaling_estimate_noted(small_mamba, small_workload, small_cluster):
    cfg = ParallelConfig(dp=4, tp=2, tp_flavor=TP_SP)
    reported = model_cost(small_mamba, small_workload, small_cluster, cfg)
    assert any("reported only" in note for note in reported.notes)
    charged = model_cost(small_mamba, small_workload, small_cluster, cfg, PlannerOptions(mamba_comm="scaling"))
    assert any("(charged)" in note for note in charged.notes)


@pytest.mark.parametrize(
    "kwargs",
    [{"overlap_eff": 1.5}, {"scan_mode": "blocked"}, {"mamba_comm": "guess"}, {"workers": 0}, {"ttft_overhead": -1}],
)
def test_options_validated(kwargs):
    with pytest.raises(ParashardError):
        PlannerOptions(**kwargs)


def _fake(degrees, mfu, feasible=True, throughput=1.0, ttft=0.0):
    dp, pp, tp, cp = degrees
    return CostReport(
        cfg=ParallelConfig(dp=dp, pp=pp, tp=tp, cp=cp),
        mfu=mfu,
        step_time=1.0 / max(mfu, 1e-9),
        throughput=throughput,
        ttft=ttft,
        feasible=feasible,
        reason="" if feasible else "memory: needs 2.0 GB > capacity 1.0 GB",
    )


def test_rank_ties_break_dp_major():
    reports = [_fake((1, 1, 8, 1), 10.0), _fake((2, 1, 4, 1), 10.0), _fake((2, 4, 1, 1), 10.0), _fake((1, 8, 1, 1), 30.0)]
    ranked = rank(reports)
    assert [entry.cfg.degrees for entry in ranked.entries] == [(1, 8, 1, 1), (2, 4, 1, 1), (2, 1, 4, 1), (1, 1, 8, 1)]
    assert ranked.top(1)[0].score == 30.0


def test_rank_by_step_time_is_ascending():
    ranked = rank([_fake((8, 1, 1, 1), 10.0), _fake((4, 2, 1, 1), 20.0)], key="step_time")
    assert ranked.entries[0].cfg.degrees == (4, 2, 1, 1)


def test_rank_separates_infeasible_and_slo_violations():
    reports = [
        _fake((8, 1, 1, 1), 40.0, feasible=False),
        _fake((4, 2, 1, 1), 30.0, throughput=10.0),
        _fake((4, 1, 2, 1), 20.0, throughput=1000.0, ttft=5.0),
        _fake((2, 4, 1, 1), 10.0, throughput=1000.0, ttft=0.5),
    ]
    ranked = rank(reports, SLOSpec(min_throughput=100.0, max_ttft=1.0))
    assert [entry.cfg.degrees for entry in ranked.entries] == [(2, 4, 1, 1)]
    reasons = {rejection.cfg.degrees: rejection.reason for rejection in ranked.infeasible}
    assert reasons[(8, 1, 1, 1)].startswith("memory:")
    assert reasons[(4, 2, 1, 1)].startswith("slo: throughput")
    assert reasons[(4, 1, 2, 1)].startswith("slo: ttft")
    assert all(rejection.report is not None for rejection in ranked.infeasible)


def test_rank_rejects_bad_input():
    with pytest.raises(ParashardError):
        rank([])
    with pytest.raises(ParashardError):
        rank([_fake((8, 1, 1, 1), 1.0)], key="latency")


def test_parallel_workers_keep_order(small_transformer, small_workload, small_cluster):
    serial = plan(small_transformer, small_workload, small_cluster)
    threaded = plan(small_transformer, small_workload, small_cluster, options=PlannerOptions(workers=4))
    assert [entry.cfg for entry in serial.entries] == [entry.cfg for entry in threaded.entries]
    assert [entry.score for entry in serial.entries] == [entry.score for entry in threaded.entries]


def test_plan_limits_pipeline_depth_to_layers(small_transformer, small_workload, small_cluster):
    ranked = plan(small_transformer, small_workload, small_cluster)
    considered = [entry.cfg for entry in ranked.entries] + [rejection.cfg for rejection in ranked.infeasible]
    assert all(cfg.pp <= small_transformer.layers for cfg in considered)
    assert len(considered) == 19


def test_llama7b_step_time_calibration():
    bundle = shipped("llama7b")
    report = model_cost(bundle.model, bundle.workload, bundle.cluster, ParallelConfig(dp=4, pp=2))
    assert report.step_time == pytest.approx(101.8, rel=0.03)
    assert report.num_microbatches == 256


def test_pipeline_boundary_uses_full_sequence():
    bundle = shipped("llama7b")
    m, w = bundle.model, bundle.workload
    report = model_cost(m, w, bundle.cluster, ParallelConfig(pp=4, cp=2))
    boundary = Fraction(w.b * w.s * m.d * m.a_byte) * report.num_microbatches * 2 * 2
    assert report.comm_by_kind["p2p_send_recv"] >= float(boundary)


def test_mamba7b_pure_dp_does_not_fit(mamba7b):
    bundle = with_training_state(mamba7b, 16)
    ranked = plan(bundle.model, bundle.workload, bundle.cluster, key="mfu")
    reasons = {rejection.cfg.degrees: rejection.reason for rejection in ranked.infeasible}
    assert reasons[(8, 1, 1, 1)].startswith("memory:")
    report = model_cost(mamba7b.model, mamba7b.workload, mamba7b.cluster, ParallelConfig(dp=8, tp_flavor=TP_SP))
    assert not report.feasible
    assert report.memory_bytes > 60e9


def test_bubble_matches_schedule_closed_form(small_transformer, small_workload, small_cluster):
    report = model_cost(small_transformer, small_workload, small_cluster, ParallelConfig(pp=4, tp=2))
    assert report.bubble_fraction == float(bubble_fraction(4, report.num_microbatches))


@pytest.mark.parametrize("bw_scale, mem_scale", [(4, 1), (1, 2), (4, 2)])
def test_more_bandwidth_or_memory_never_hurts(small_transformer, small_workload, small_cluster, bw_scale, mem_scale):
    configs = enumerate_configs(small_cluster.world, EnumerationConstraints(max_pp=small_transformer.layers))
    memories = sorted(report.memory_bytes for report in evaluate_all(small_transformer, small_workload, small_cluster, configs))
    tight = dataclasses.replace(small_cluster, mem_capacity=int(memories[len(memories) // 2]))
    roomy = dataclasses.replace(
        tight,
        intra_bw=tight.intra_bw * bw_scale,
        inter_bw=tight.inter_bw * bw_scale,
        mem_capacity=tight.mem_capacity * mem_scale,
    )
    before = evaluate_all(small_transformer, small_workload, tight, configs)
    after = evaluate_all(small_transformer, small_workload, roomy, configs)
    assert any(not report.feasible for report in before)
    for old, new in zip(before, after):
        assert old.cfg == new.cfg
        if old.feasible:
            assert new.feasible
        assert new.step_time <= old.step_time * (1 + 1e-12)
        assert new.mfu >= old.mfu * (1 - 1e-12)

    kept = {entry.cfg for entry in plan(small_transformer, small_workload, tight).entries}
    widened = {entry.cfg for entry in plan(small_transformer, small_workload, roomy).entries}
    assert kept <= widened
