from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import (
    ClusterSpec,
    MetricError,
    ModelSpec,
    ParallelConfig,
    ParashardError,
    UnknownReferenceError,
    WorkloadSpec,
)
from ..planner import CostReport, PlannerOptions, model_cost, resolve_flavor

LOGGER = logging.getLogger("parashard.reference")

PACKAGE_DIR = Path(__file__).resolve().parent.parent
ROOT_DIR = PACKAGE_DIR.parent
BASELINE_DIR = ROOT_DIR / "baseline"
CONFIG_DIR = BASELINE_DIR / "configs"
REFERENCE_DIR = BASELINE_DIR / "reference"
CHECKSUM_FILE = "SHA256SUMS"
SUMMARY_ID = "best_worst"

Degrees = Tuple[int, int, int, int]


@dataclass(frozen=True)
class ReferenceRow:
    dp: int
    pp: int
    tp: int
    cp: int
    step_time_s: float
    throughput_ktok_s: float
    mem_gb: float
    mfu_pct: float

    @property
    def degrees(self) -> Degrees:
        return (self.dp, self.pp, self.tp, self.cp)

    def parallel(self, tp_flavor: str) -> ParallelConfig:
        return ParallelConfig(dp=self.dp, pp=self.pp, tp=self.tp, cp=self.cp, tp_flavor=tp_flavor)


@dataclass(frozen=True)
class ReferenceTable:
    model_id: str
    rows: Tuple[ReferenceRow, ...]

    def find(self, degrees: Degrees) -> Optional[ReferenceRow]:
        for row in self.rows:
            if row.degrees == degrees:
                return row
        return None

    @property
    def best(self) -> ReferenceRow:
        return max(self.rows, key=lambda row: row.mfu_pct)

    @property
    def worst(self) -> ReferenceRow:
        return min(self.rows, key=lambda row: row.mfu_pct)


@dataclass(frozen=True)
class BestWorst:
    model_id: str
    best: Degrees
    best_mfu_pct: float
    worst: Degrees
    worst_mfu_pct: float


def available_references(directory: Path = REFERENCE_DIR) -> List[str]:
    return sorted(path.stem for path in directory.glob("*.csv") if path.stem != SUMMARY_ID)


def _degrees(record: Dict[str, str], prefix: str = "") -> Degrees:
    return tuple(int(record[f"{prefix}{axis}"]) for axis in ("dp", "pp", "tp", "cp"))  # type: ignore[return-value]


def load_reference(reference_id: str, directory: Path = REFERENCE_DIR) -> ReferenceTable:
    path = directory / f"{reference_id}.csv"
    if reference_id == SUMMARY_ID or not path.exists():
        known = ", ".join(available_references(directory)) or "none"
        raise UnknownReferenceError(f"unknown reference {reference_id!r} (available: {known})")
    rows: List[ReferenceRow] = []
    seen = set()
    with path.open(encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            row = ReferenceRow(
                *_degrees(record),
                step_time_s=float(record["step_time_s"]),
                throughput_ktok_s=float(record["throughput_ktok_s"]),
                mem_gb=float(record["mem_gb"]),
                mfu_pct=float(record["mfu_pct"]),
            )
            if row.degrees in seen:
                raise ParashardError(f"{path.name}: duplicate row for {row.degrees}")
            seen.add(row.degrees)
            rows.append(row)
    LOGGER.debug("loaded %d reference rows from %s", len(rows), path)
    return ReferenceTable(model_id=reference_id, rows=tuple(rows))


def load_best_worst(directory: Path = REFERENCE_DIR) -> Dict[str, BestWorst]:
    summary: Dict[str, BestWorst] = {}
    with (directory / f"{SUMMARY_ID}.csv").open(encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            summary[record["model"]] = BestWorst(
                model_id=record["model"],
                best=_degrees(record, "best_"),
                best_mfu_pct=float(record["best_mfu_pct"]),
                worst=_degrees(record, "worst_"),
                worst_mfu_pct=float(record["worst_mfu_pct"]),
            )
    return summary


def verify_reference_checksums(directory: Path = REFERENCE_DIR) -> List[Tuple[str, bool]]:
    """Compare every CSV asset against the recorded SHA-256 sums."""

    results: List[Tuple[str, bool]] = []
    sums_path = directory / CHECKSUM_FILE
    expected: Dict[str, str] = {}
    for raw_line in sums_path.read_text(encoding="utf-8").splitlines():
        line = raw_line.strip()
        if not line:
            continue
        digest, name = line.split(maxsplit=1)
        expected[name.lstrip("*")] = digest
    for path in sorted(directory.glob("*.csv")):
        actual = hashlib.sha256(path.read_bytes()).hexdigest()
        ok = expected.get(path.name) == actual
        if not ok:
            LOGGER.warning("checksum mismatch for %s", path.name)
        results.append((path.name, ok))
    for name in sorted(set(expected) - {name for name, _ in results}):
        LOGGER.warning("checksum listed for missing asset %s", name)
        results.append((name, False))
    return results


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    data = np.asarray(values, dtype=np.float64)
    sorter = np.argsort(data, kind="mergesort")
    ordered = data[sorter]
    starts = np.r_[True, ordered[1:] != ordered[:-1]]
    dense = np.cumsum(starts) - 1
    bounds = np.r_[np.nonzero(starts)[0], data.size]
    ranks = np.empty(data.size)
    # ties share the mean of the 1-based positions they occupy
    ranks[sorter] = 0.5 * (bounds[dense] + bounds[dense + 1] - 1) + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise MetricError(f"spearman needs equal-length inputs, got {len(xs)} and {len(ys)}")
    if len(xs) < 2:
        raise MetricError("spearman needs at least two observations")
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise MetricError("spearman undefined for a constant sequence")
    return float(np.corrcoef(rx, ry)[0, 1])


@dataclass(frozen=True)
class ComparisonRow:
    measured: ReferenceRow
    report: CostReport


@dataclass(frozen=True)
class ComparisonReport:
    reference_id: str
    rows: Tuple[ComparisonRow, ...]
    spearman_mfu: float
    spearman_memory: float
    summary: Optional[BestWorst] = None

    def planner_order(self) -> List[Degrees]:
        """Table configs by modelled mfu, best first, dp-major tie-break."""
        ordered = sorted(
            self.rows,
            key=lambda row: (-row.report.mfu, -row.measured.dp, -row.measured.pp, -row.measured.tp, -row.measured.cp),
        )
        return [row.measured.degrees for row in ordered]

    def planner_top(self, k: int) -> List[Degrees]:
        return self.planner_order()[:k]

    def planner_bottom(self, k: int) -> List[Degrees]:
        return self.planner_order()[-k:]

    @property
    def measured_best(self) -> Degrees:
        return max(self.rows, key=lambda row: row.measured.mfu_pct).measured.degrees

    @property
    def measured_worst(self) -> Degrees:
        return min(self.rows, key=lambda row: row.measured.mfu_pct).measured.degrees

    @property
    def top1_matches(self) -> bool:
        return self.planner_top(1) == [self.measured_best]

    @property
    def best_in_top3(self) -> bool:
        return self.measured_best in self.planner_top(3)

    @property
    def worst_in_bottom4(self) -> bool:
        return self.measured_worst in self.planner_bottom(4)


def compare_with_reference(
    m: ModelSpec,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    reference_id: str,
    options: Optional[PlannerOptions] = None,
    directory: Path = REFERENCE_DIR,
) -> ComparisonReport:
    options = options or PlannerOptions()
    table = load_reference(reference_id, directory)
    flavor = resolve_flavor(m, options)
    rows = tuple(
        ComparisonRow(measured=row, report=model_cost(m, w, cluster, row.parallel(flavor), options)) for row in table.rows
    )
    spearman_mfu = spearman([row.report.mfu for row in rows], [row.measured.mfu_pct for row in rows])
    spearman_memory = spearman([row.report.memory_bytes for row in rows], [row.measured.mem_gb for row in rows])
    summary = load_best_worst(directory).get(reference_id)
    LOGGER.info("%s: spearman mfu %.3f, memory %.3f over %d rows", reference_id, spearman_mfu, spearman_memory, len(rows))
    return ComparisonReport(
        reference_id=reference_id,
        rows=rows,
        spearman_mfu=spearman_mfu,
        spearman_memory=spearman_memory,
        summary=summary,
    )


__all__ = [
    "BASELINE_DIR",
    "BestWorst",
    "CONFIG_DIR",
    "ComparisonReport",
    "ComparisonRow",
    "REFERENCE_DIR",
    "ROOT_DIR",
    "ReferenceRow",
    "ReferenceTable",
    "available_references",
    "compare_with_reference",
    "load_best_worst",
    "load_reference",
    "spearman",
    "verify_reference_checksums",
]
