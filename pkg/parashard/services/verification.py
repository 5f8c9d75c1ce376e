"""Oracle suite behind ``parashard verify``.

Each oracle recomputes a closed-form quantity independently (by executing a
tiny forward pass, by brute force, or by simulation) and compares. The
``mutations`` map scales a named formula term before comparison so a broken
formula can be shown to fail under the right name.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..collectives import CollectiveKind, data_moved_per_device
from ..config import MAMBA2, TRANSFORMER, ModelSpec, ParallelConfig, WorkloadSpec
from ..mamba_costs import (
    NAIVE,
    PARALLEL_SCAN,
    chunk_carry,
    chunk_start_states,
    mamba_flops_per_device,
    mamba_flops_total,
    mamba_proj_flops,
    ssd_flops,
    trace_recurrence,
)
from ..planner import enumerate_configs
from ..transformer_costs import gqa_flops_per_device, gqa_flops_total, mlp_flops_per_device, mlp_flops_total
from .mac_counter import count_gqa, count_mamba, count_mlp
from .reference import REFERENCE_DIR, verify_reference_checksums
from .schedule import bubble_fraction, simulate_1f1b

LOGGER = logging.getLogger("parashard.verification")

RECURRENCE_TOLERANCE = 1e-9
TINY_CASES = 50
RECURRENCE_TRACES = 200


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    checks: int
    max_error: float = 0.0
    detail: str = ""
    seconds: float = 0.0


@dataclass(frozen=True)
class VerificationReport:
    results: Tuple[OracleResult, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> List[OracleResult]:
        return [result for result in self.results if not result.passed]


class _Tally:
    def __init__(self, mutations: Mapping[str, float]) -> None:
        self.mutations = mutations
        self.checks = 0
        self.max_error = 0.0
        self.failure = ""

    def term(self, name: str, value: int | Fraction) -> Fraction:
        return Fraction(value) * Fraction(self.mutations.get(name, 1))

    def expect(self, name: str, formula: int | Fraction, observed: int | Fraction, context: str = "") -> None:
        self.checks += 1
        error = abs(float(formula) - float(observed))
        self.max_error = max(self.max_error, error)
        if formula != observed and not self.failure:
            where = f" at {context}" if context else ""
            self.failure = f"{name}: formula {formula} != oracle {observed}{where}"


# ---------------------------------------------------------------------------
# random tiny shapes
# ---------------------------------------------------------------------------


def _tiny_transformers(rng: np.random.Generator, count: int) -> Iterator[Tuple[ModelSpec, WorkloadSpec]]:
    for _ in range(count):
        d_h = int(rng.integers(1, 3))
        a = int(rng.integers(1, 8 // d_h + 1))
        k = int(rng.choice([div for div in range(1, a + 1) if a % div == 0]))
        model = ModelSpec(
            name="tiny", block_kind=TRANSFORMER, layers=1, d=a * d_h, a=a, k=k, d_h=d_h, I=int(rng.integers(1, 9))
        )
        b, s = (int(v) for v in rng.integers(1, 5, size=2))
        yield model, WorkloadSpec(b=b, global_batch=b, s=s)


def _tiny_mambas(rng: np.random.Generator, count: int) -> Iterator[Tuple[ModelSpec, WorkloadSpec]]:
    for _ in range(count):
        d = int(rng.integers(1, 5))
        expand = int(rng.integers(1, 3))
        l = int(rng.choice([1, 2, 4]))
        model = ModelSpec(
            name="tiny",
            block_kind=MAMBA2,
            layers=1,
            d=d,
            n=int(rng.integers(1, 3)),
            expand_mamba=expand,
            d_inner=expand * d,
            ngroups_ssm=int(rng.integers(1, 3)),
            h=int(rng.integers(1, 3)),
            p=int(rng.integers(1, 3)),
            l=l,
        )
        b = int(rng.integers(1, 3))
        yield model, WorkloadSpec(b=b, global_batch=b, s=l * int(rng.integers(1, 4)))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def _collectives(tally: _Tally) -> None:
    for n, size in itertools.product(range(1, 65), (1, 7, 1024, 2**20)):
        rs = data_moved_per_device(CollectiveKind.RING_REDUCE_SCATTER, n, size)
        ag = data_moved_per_device(CollectiveKind.RING_ALL_GATHER, n, size)
        ar = tally.term("collective.all_reduce", data_moved_per_device(CollectiveKind.ALL_REDUCE, n, size))
        tally.expect("collective.all_reduce", ar, rs + ag, f"n={n}, size={size}")
        if n == 1:
            for kind in (CollectiveKind.REDUCE, CollectiveKind.GATHER, CollectiveKind.RING_ALL_GATHER):
                tally.expect(f"collective.{kind.value}", data_moved_per_device(kind, n, size), 0, f"size={size}")
    tally.expect("collective.ring_all_gather", data_moved_per_device(CollectiveKind.RING_ALL_GATHER, 4, 1024), 768)


def _transformer_macs(tally: _Tally, rng: np.random.Generator) -> None:
    for model, work in _tiny_transformers(rng, TINY_CASES):
        context = f"d={model.d}, a={model.a}, k={model.k}, d_h={model.d_h}, I={model.I}, b={work.b}, s={work.s}"
        gqa = count_gqa(model, work, rng)
        cube, vector = gqa_flops_total(model, work)
        tally.expect("gqa.cube", tally.term("gqa.cube", cube), gqa.cube, context)
        tally.expect("gqa.vector", tally.term("gqa.vector", vector), gqa.vector, context)
        mlp = count_mlp(model, work, rng)
        cube, vector = mlp_flops_total(model, work)
        tally.expect("mlp.cube", tally.term("mlp.cube", cube), mlp.cube, context)
        tally.expect("mlp.vector", tally.term("mlp.vector", vector), mlp.vector, context)


def _mamba_macs(tally: _Tally, rng: np.random.Generator) -> None:
    for model, work in _tiny_mambas(rng, TINY_CASES):
        context = f"d={model.d}, n={model.n}, h={model.h}, p={model.p}, l={model.l}, b={work.b}, s={work.s}"
        inproj, outproj = mamba_proj_flops(model, work)
        for scan_mode in (PARALLEL_SCAN, NAIVE):
            counter = count_mamba(model, work, scan_mode, rng)
            ssd = ssd_flops(model, work, scan_mode)
            labels = {
                "mamba.in_proj": ("in_proj", inproj),
                "mamba.out_proj": ("out_proj", outproj),
                "ssd.flops_1": ("ssd_1", ssd.flops_1),
                "ssd.flops_2": ("ssd_2", ssd.flops_2),
                "ssd.flops_3": ("ssd_3", ssd.flops_3),
                "ssd.flops_4": ("ssd_4", ssd.flops_4),
                "ssd.flops_5": ("ssd_5", ssd.flops_5),
                "ssd.decay": ("decay", ssd.decay_flops),
            }
            for name, (label, value) in labels.items():
                tally.expect(name, tally.term(name, value), counter.by_label.get(label, 0), f"{context}, {scan_mode}")


def _invariance(tally: _Tally) -> None:
    transformer = ModelSpec(name="llama-like", block_kind=TRANSFORMER, layers=1, d=64, a=8, k=2, d_h=8, I=160)
    mamba = ModelSpec(
        name="mamba-like", block_kind=MAMBA2, layers=1, d=64, n=16, expand_mamba=2, d_inner=128,
        ngroups_ssm=2, h=8, p=16, l=8,
    )
    work = WorkloadSpec(b=8, global_batch=8, s=64)
    totals: Dict[str, Tuple[Tuple[int, int], Callable[[ParallelConfig], Tuple[Fraction, Fraction]]]] = {
        "gqa": (gqa_flops_total(transformer, work), lambda cfg: gqa_flops_per_device(transformer, work, cfg)),
        "mlp": (mlp_flops_total(transformer, work), lambda cfg: mlp_flops_per_device(transformer, work, cfg)),
        "mamba": (mamba_flops_total(mamba, work), lambda cfg: mamba_flops_per_device(mamba, work, cfg)),
    }
    for dp, tp, cp in itertools.product((1, 2, 4, 8), repeat=3):
        cfg = ParallelConfig(dp=dp, tp=tp, cp=cp)
        degree = dp * tp * cp
        for block, (total, per_device) in totals.items():
            cube, vector = per_device(cfg)
            name = f"invariance.{block}"
            tally.expect(name, tally.term(name, cube * degree), total[0], cfg.label())
            tally.expect(name, vector * degree, total[1], cfg.label())


def _scan_difference(tally: _Tally, rng: np.random.Generator) -> None:
    for model, work in _tiny_mambas(rng, TINY_CASES):
        chunks = work.s // model.l
        diff = ssd_flops(model, work, NAIVE).total - ssd_flops(model, work, PARALLEL_SCAN).total
        expected = 2 * work.b * model.h * chunks * chunks * model.p * model.n
        tally.expect("ssd.scan_difference", tally.term("ssd.scan_difference", diff), expected)
    tiny = ModelSpec(name="tiny", block_kind=MAMBA2, layers=1, d=4, n=2, expand_mamba=2, d_inner=8, ngroups_ssm=1, h=1, p=2, l=2)
    work = WorkloadSpec(b=1, global_batch=1, s=4)
    tally.expect("ssd.total", ssd_flops(tiny, work, PARALLEL_SCAN).total, 144)
    tally.expect("ssd.total", ssd_flops(tiny, work, NAIVE).total, 176)


def _recurrence(tally: _Tally, rng: np.random.Generator) -> None:
    for index in range(RECURRENCE_TRACES):
        l = int(rng.choice([2, 4, 8]))
        s = l * int(rng.integers(1, 256 // l + 1))
        a = rng.uniform(-1.0, 1.0, s)
        if index % 4 == 0:
            a = np.abs(a) * np.where(np.arange(s) % 2, -1.0, 1.0)
        b = rng.standard_normal(s)
        x = rng.standard_normal(s)
        h0 = float(rng.standard_normal()) if index % 3 == 0 else 0.0
        scan_mode = NAIVE if index % 2 else PARALLEL_SCAN
        trace = trace_recurrence(a, b, x, l, h0, scan_mode)
        tally.checks += 1
        tally.max_error = max(tally.max_error, trace.max_error)
        if trace.max_error > RECURRENCE_TOLERANCE and not tally.failure:
            tally.failure = f"recurrence: error {trace.max_error:.3g} at s={s}, l={l}, {scan_mode}"

    # four chunks of four: H_1 = U_1, H_2 = A_1 U_1 + U_2, H_3 = A_2 H_2 + U_3, ...
    a, b, x = rng.uniform(-1.0, 1.0, 16), rng.standard_normal(16), rng.standard_normal(16)
    A, U = chunk_carry(a, b, x, 4)
    starts = chunk_start_states(A, U, 0.0, NAIVE)
    expected = [0.0, U[0], A[1] * U[0] + U[1], A[2] * (A[1] * U[0] + U[1]) + U[2]]
    error = float(np.max(np.abs(starts[:4] - np.asarray(expected))))
    tally.checks += 1
    tally.max_error = max(tally.max_error, error)
    if error > RECURRENCE_TOLERANCE and not tally.failure:
        tally.failure = f"recurrence: worked chunk structure off by {error:.3g}"


def _enumeration(tally: _Tally) -> None:
    for world, expected in ((8, 20), (16, 35)):
        brute = sum(
            1 for degrees in itertools.product(range(1, world + 1), repeat=4) if math.prod(degrees) == world
        )
        found = len(enumerate_configs(world))
        tally.expect("enumeration.count", tally.term("enumeration.count", found), brute, f"world={world}")
        tally.expect("enumeration.count", brute, expected, f"world={world}")


def _bubbles(tally: _Tally) -> None:
    for pp, micro in itertools.product((1, 2, 3), (1, 2, 3)):
        grid = simulate_1f1b(pp, micro)
        formula = tally.term("bubble.fraction", bubble_fraction(pp, micro))
        tally.expect("bubble.fraction", formula, grid.idle_fraction, f"pp={pp}, m={micro}")


def _checksums(tally: _Tally) -> None:
    for name, ok in verify_reference_checksums(REFERENCE_DIR):
        tally.checks += 1
        if not ok and not tally.failure:
            tally.failure = f"checksum: {name} does not match SHA256SUMS"


ORACLES: Tuple[Tuple[str, Callable[..., None], bool], ...] = (
    ("collective identities", _collectives, False),
    ("transformer MAC counter", _transformer_macs, True),
    ("mamba MAC counter", _mamba_macs, True),
    ("FLOPs invariance", _invariance, False),
    ("SSD scan difference", _scan_difference, True),
    ("recurrence equivalence", _recurrence, True),
    ("enumeration counts", _enumeration, False),
    ("1F1B bubble fraction", _bubbles, False),
    ("reference checksums", _checksums, False),
)


def run_verification(mutations: Optional[Mapping[str, float]] = None, seed: int = 0) -> VerificationReport:
    mutations = dict(mutations or {})
    rng = np.random.default_rng(seed)
    results: List[OracleResult] = []
    for name, oracle, needs_rng in ORACLES:
        tally = _Tally(mutations)
        started = time.perf_counter()
        try:
            if needs_rng:
                oracle(tally, rng)
            else:
                oracle(tally)
        except Exception as exc:  # an oracle that crashes is a failing oracle
            LOGGER.exception("oracle %s raised", name)
            tally.failure = tally.failure or f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        results.append(
            OracleResult(
                name=name,
                passed=not tally.failure,
                checks=tally.checks,
                max_error=tally.max_error,
                detail=tally.failure,
                seconds=elapsed,
            )
        )
    report = VerificationReport(results=tuple(results))
    LOGGER.info("verification: %d oracles, %d failed", len(results), len(report.failures))
    return report


__all__ = ["ORACLES", "OracleResult", "RECURRENCE_TOLERANCE", "VerificationReport", "run_verification"]
