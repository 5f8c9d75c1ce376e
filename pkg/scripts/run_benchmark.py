#!/usr/bin/env python3
"""
Benchmark the cost model's configuration ordering against the measured reference tables.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from parashard.config import load_config
from parashard.planner import PlannerOptions
from parashard.services.reference import ComparisonReport, available_references, compare_with_reference


@dataclass
class Sample:
    name: str
    config_path: Path
    reference_dir: Path


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Compare modelled MFU ordering with every measured reference table.")
    parser.add_argument(
        "--baseline-dir",
        type=Path,
        default=ROOT / "baseline",
        help="Directory that contains configs/ and reference/ folders.",
    )
    parser.add_argument(
        "--training-state-bytes",
        type=int,
        default=None,
        help="Override cluster.training_state_bytes_per_param for every sample.",
    )
    parser.add_argument("--overlap-eff", type=float, default=0.0)
    parser.add_argument("--verbose", action="store_true")
    return parser.parse_args()


def discover_samples(base_dir: Path) -> List[Sample]:
    config_dir = base_dir / "configs"
    reference_dir = base_dir / "reference"
    if not config_dir.exists() or not reference_dir.exists():
        raise FileNotFoundError(f"{base_dir} must contain configs/ and reference/ directories.")

    samples: List[Sample] = []
    for name in available_references(reference_dir):
        config_path = config_dir / f"{name}.json"
        if not config_path.exists():
            logging.warning("no config for reference %s, skipping", name)
            continue
        samples.append(Sample(name=name, config_path=config_path, reference_dir=reference_dir))
    if not samples:
        raise RuntimeError(f"no config/reference pairs found under {base_dir}.")
    return samples


def evaluate_sample(sample: Sample, options: PlannerOptions, training_state_bytes: Optional[int] = None) -> ComparisonReport:
    bundle = load_config(sample.config_path)
    cluster = bundle.cluster
    if training_state_bytes is not None:
        cluster = dataclasses.replace(cluster, training_state_bytes_per_param=training_state_bytes)
    return compare_with_reference(bundle.model, bundle.workload, cluster, sample.name, options, sample.reference_dir)


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def summarize_scores(results: Dict[str, ComparisonReport]) -> None:
    header = "=" * 72
    print(header)
    print("Modelled vs measured configuration ordering")
    print(header)
    print(f"{'model':<10} {'rows':>5} {'rho(mfu)':>10} {'rho(mem)':>10} {'top-1':>7} {'top-3':>7} {'bottom-4':>9}")
    print("-" * 72)
    for name, result in results.items():
        print(
            f"{name:<10} {len(result.rows):>5} {result.spearman_mfu:>10.3f} {result.spearman_memory:>10.3f} "
            f"{_yes(result.top1_matches):>7} {_yes(result.best_in_top3):>7} {_yes(result.worst_in_bottom4):>9}"
        )
    print()

    scores = [result.spearman_mfu for result in results.values()]
    print(f"{'metric':<10} {'mean':>10} {'median':>10} {'max':>10} {'min':>10}")
    print("-" * 52)
    print(
        f"{'rho(mfu)':<10} {statistics.mean(scores):>10.3f} {statistics.median(scores):>10.3f} "
        f"{max(scores):>10.3f} {min(scores):>10.3f}"
    )
    print()


def main() -> None:
    args = parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    options = PlannerOptions(overlap_eff=args.overlap_eff)

    results: Dict[str, ComparisonReport] = {}
    for sample in discover_samples(args.baseline_dir):
        results[sample.name] = evaluate_sample(sample, options, args.training_state_bytes)

    summarize_scores(results)


if __name__ == "__main__":
    main()
