from __future__ import annotations

import shutil

import pytest

from conftest import shipped, with_training_state
from parashard.config import MetricError, ParashardError, UnknownReferenceError
from parashard.services.reference import (
    REFERENCE_DIR,
    available_references,
    compare_with_reference,
    load_best_worst,
    load_reference,
    spearman,
    verify_reference_checksums,
)


def test_available_references():
    assert available_references() == ["llama1b", "llama7b", "mamba1b", "mamba7b"]


@pytest.mark.parametrize("name, rows", [("llama1b", 18), ("llama7b", 18), ("mamba1b", 19), ("mamba7b", 13)])
def test_tables_load(name, rows):
    table = load_reference(name)
    assert len(table.rows) == rows
    assert all(row.dp * row.pp * row.tp * row.cp == 8 for row in table.rows)


def test_llama7b_rows():
    table = load_reference("llama7b")
    best = table.find((4, 2, 1, 1))
    assert best is not None
    assert (best.step_time_s, best.throughput_ktok_s, best.mem_gb, best.mfu_pct) == (101.8, 41.2, 45.9, 63.7)
    assert table.best.degrees == (4, 2, 1, 1)
    assert table.worst.degrees == (1, 1, 4, 2)
    assert table.find((8, 1, 1, 1)) is None


def test_summary_agrees_with_tables():
    summary = load_best_worst()
    assert sorted(summary) == ["llama1b", "llama7b", "mamba1b", "mamba7b"]
    for name, entry in summary.items():
        table = load_reference(name)
        assert table.best.degrees == entry.best
        assert table.best.mfu_pct == entry.best_mfu_pct
        assert table.worst.degrees == entry.worst
        assert table.worst.mfu_pct == entry.worst_mfu_pct


def test_unknown_reference():
    with pytest.raises(UnknownReferenceError) as info:
        load_reference("gpt3")
    assert "llama7b" in info.value.args[0]
    with pytest.raises(UnknownReferenceError):
        load_reference("best_worst")


def test_duplicate_rows_rejected(tmp_path):
    (tmp_path / "dup.csv").write_text(
        "dp,pp,tp,cp,step_time_s,throughput_ktok_s,mem_gb,mfu_pct\n8,1,1,1,1,1,1,1\n8,1,1,1,2,2,2,2\n",
        encoding="utf-8",
    )
    with pytest.raises(ParashardError):
        load_reference("dup", tmp_path)


def test_checksums_pass_for_shipped_assets():
    results = verify_reference_checksums()
    assert len(results) == 5
    assert all(ok for _, ok in results)


def test_checksums_catch_edits(tmp_path):
    for path in REFERENCE_DIR.iterdir():
        shutil.copy(path, tmp_path / path.name)
    with (tmp_path / "llama1b.csv").open("a", encoding="utf-8") as handle:
        handle.write("1,1,2,4,1.0,1.0,1.0,1.0\n")
    failed = [name for name, ok in verify_reference_checksums(tmp_path) if not ok]
    assert failed == ["llama1b.csv"]


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # ties take the mean rank
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.9486832980505138)


@pytest.mark.parametrize("xs, ys", [([1], [1]), ([1, 2], [1]), ([2, 2, 2], [1, 2, 3])])
def test_spearman_rejects(xs, ys):
    with pytest.raises(MetricError):
        spearman(xs, ys)


def test_llama7b_ordering_against_measurements(llama7b):
    bundle = with_training_state(llama7b, 16)
    result = compare_with_reference(bundle.model, bundle.workload, bundle.cluster, "llama7b")
    assert len(result.rows) == 18
    assert result.top1_matches
    assert result.best_in_top3
    assert result.worst_in_bottom4
    assert {(1, 1, 4, 2), (1, 1, 2, 4)} <= set(result.planner_bottom(4))
    assert result.spearman_mfu >= 0.6
    assert result.spearman_memory >= 0.5
    assert result.summary is not None and result.summary.best == (4, 2, 1, 1)


def test_llama1b_best_configuration():
    bundle = shipped("llama1b")
    result = compare_with_reference(bundle.model, bundle.workload, bundle.cluster, "llama1b")
    assert result.planner_top(1) == [(8, 1, 1, 1)]
    assert result.top1_matches


def test_mamba1b_extremes():
    bundle = shipped("mamba1b")
    result = compare_with_reference(bundle.model, bundle.workload, bundle.cluster, "mamba1b")
    assert result.top1_matches
    assert set(result.planner_bottom(4)) == {(1, 1, 8, 1), (1, 1, 4, 2), (1, 1, 2, 4), (1, 1, 1, 8)}
    assert result.worst_in_bottom4


def test_mamba7b_extremes():
    bundle = shipped("mamba7b")
    result = compare_with_reference(bundle.model, bundle.workload, bundle.cluster, "mamba7b")
    assert len(result.rows) == 13
    assert result.best_in_top3
    assert result.worst_in_bottom4


@pytest.mark.parametrize("name", ["llama1b", "llama7b"])
def test_pure_dp_needs_more_memory_than_pure_tp(name):
    bundle = shipped(name)
    result = compare_with_reference(bundle.model, bundle.workload, bundle.cluster, name)
    by_degrees = {row.measured.degrees: row for row in result.rows}
    pure_tp = by_degrees[(1, 1, 8, 1)]
    pure_dp = by_degrees.get((8, 1, 1, 1), by_degrees[(4, 2, 1, 1)])
    assert pure_dp.report.memory_bytes > pure_tp.report.memory_bytes
    assert pure_dp.measured.mem_gb > pure_tp.measured.mem_gb
