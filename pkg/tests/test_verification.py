from __future__ import annotations

import pytest

from parashard.services.verification import ORACLES, run_verification


@pytest.fixture(scope="module")
def clean_report():
    return run_verification(seed=0)


def test_all_oracles_pass(clean_report):
    assert clean_report.ok, [result.detail for result in clean_report.failures]
    assert [result.name for result in clean_report.results] == [name for name, _, _ in ORACLES]
    assert all(result.checks > 0 for result in clean_report.results)


def test_recurrence_error_within_tolerance(clean_report):
    recurrence = next(result for result in clean_report.results if result.name == "recurrence equivalence")
    assert recurrence.checks == 201
    assert recurrence.max_error <= 1e-9


@pytest.mark.parametrize(
    "term, oracle",
    [
        ("gqa.cube", "transformer MAC counter"),
        ("mlp.vector", "transformer MAC counter"),
        ("ssd.flops_4", "mamba MAC counter"),
        ("mamba.in_proj", "mamba MAC counter"),
        ("collective.all_reduce", "collective identities"),
        ("invariance.mamba", "FLOPs invariance"),
        ("ssd.scan_difference", "SSD scan difference"),
        ("enumeration.count", "enumeration counts"),
        ("bubble.fraction", "1F1B bubble fraction"),
    ],
)
def test_mutated_term_fails_under_its_name(term, oracle):
    report = run_verification(mutations={term: 1.01})
    failed = {result.name: result for result in report.failures}
    assert oracle in failed
    assert failed[oracle].detail.startswith(term)
