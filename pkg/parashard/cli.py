from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from typing import Dict, List, NoReturn, Optional, Sequence, Tuple

from .config import (
    MODES,
    TP_FLAVORS,
    ConfigBundle,
    ParashardError,
    SLOSpec,
    UnknownReferenceError,
    load_config,
    parse_parallel_tuple,
)
from .mamba_costs import MAMBA_COMM_MODES, PARALLEL_SCAN, SCAN_MODES, SP_EXCHANGE
from .metrics import classify
from .planner import RANK_KEYS, CostReport, PlannerOptions, RankedPlan, model_cost, plan, resolve_flavor
from .services.reference import ComparisonReport, compare_with_reference
from .services.verification import VerificationReport, run_verification

LOGGER = logging.getLogger("parashard")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_EMPTY = 3
EXIT_VERIFY_FAILED = 4

LOG_ENV = "PARASHARD_LOG"
CSV_COLUMNS = (
    "dp",
    "pp",
    "tp",
    "cp",
    "feasible",
    "reason",
    "step_time_s",
    "throughput_tok_s",
    "mfu_pct",
    "weight_bytes",
    "act_bytes",
    "comm_bytes",
)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 rather than argparse's 2, which means "infeasible" here."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    raw = os.environ.get(LOG_ENV, "WARNING").strip()
    level: object = int(raw) if raw.isdigit() else logging.getLevelName(raw.upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not isinstance(level, int):
        LOGGER.warning("unrecognised %s value %r, using WARNING", LOG_ENV, raw)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Model/workload/cluster JSON document.")
    parser.add_argument("--mode", choices=MODES, help="Override the workload mode.")
    parser.add_argument("--tp-flavor", choices=TP_FLAVORS, help="Tensor-parallel flavour (default per block kind).")
    parser.add_argument("--overlap-eff", type=float, default=0.0, help="Fraction of communication hidden behind compute.")
    parser.add_argument("--include-embeddings", action="store_true", help="Count the v*d embedding tables.")
    parser.add_argument("--strict-tp-intra-node", action="store_true", help="Keep tensor parallel groups inside a node.")
    parser.add_argument("--scan-mode", choices=SCAN_MODES, default=PARALLEL_SCAN)
    parser.add_argument("--mamba-comm", choices=MAMBA_COMM_MODES, default=SP_EXCHANGE)
    parser.add_argument("--workers", type=int, default=1, help="Threads used to cost candidates.")
    parser.add_argument("--format", choices=("table", "csv", "json"), default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="parashard", description="Analytical DP/PP/TP/CP planner for transformer and Mamba-2 models.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    analyze = commands.add_parser("analyze", help="Cost one parallel configuration.")
    _add_model_flags(analyze)
    analyze.add_argument("--parallel", required=True, help="Degrees as dp,pp,tp,cp.")

    sweep = commands.add_parser("plan", help="Sweep and rank every configuration.")
    _add_model_flags(sweep)
    sweep.add_argument("--rank-by", choices=RANK_KEYS, default="mfu")
    sweep.add_argument("--slo-throughput", type=float, help="Minimum tokens/s.")
    sweep.add_argument("--slo-ttft", type=float, help="Maximum time to first token in seconds.")
    sweep.add_argument("--top", type=int, help="Emit only the first k rows.")

    compare = commands.add_parser("compare", help="Compare the modelled ordering with a measured table.")
    _add_model_flags(compare)
    compare.add_argument("--reference", help="Reference table id (defaults to the model name).")
    compare.add_argument("--training-state-bytes", type=int, help="Override cluster.training_state_bytes_per_param.")

    verify = commands.add_parser("verify", help="Run the oracle suite.")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--format", choices=("table", "json"), default="table")
    return parser


def _options(args: argparse.Namespace) -> PlannerOptions:
    return PlannerOptions(
        overlap_eff=args.overlap_eff,
        include_embeddings=args.include_embeddings,
        strict_tp_intra_node=args.strict_tp_intra_node,
        scan_mode=args.scan_mode,
        mamba_comm=args.mamba_comm,
        workers=args.workers,
        tp_flavor=args.tp_flavor,
    )


def _load(args: argparse.Namespace) -> ConfigBundle:
    bundle = load_config(args.config)
    if args.mode:
        bundle = bundle._replace(workload=dataclasses.replace(bundle.workload, mode=args.mode))
    return bundle


def _dump_json(doc: object) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _gb(value: float) -> str:
    return f"{value / 1e9:.2f} GB"


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def render_report(report: CostReport, bundle: ConfigBundle) -> str:
    cfg = report.cfg
    lines = [f"{bundle.model.name}  {cfg.label()}  tp_flavor={cfg.tp_flavor}  mode={bundle.workload.mode}"]
    lines.append(f"feasible         {'yes' if report.feasible else 'no (' + report.reason + ')'}")
    if not report.blocks:
        return "\n".join(lines) + "\n"

    lines.append("")
    lines.append(f"{'block':<10} {'cube FLOPs':>14} {'vector FLOPs':>14} {'act bytes':>14} {'weight bytes':>14} {'comm elems':>14}  kind")
    for blk in report.blocks:
        kinds = ",".join(term.kind.value for term in blk.comm_terms) or "-"
        lines.append(
            f"{blk.name:<10} {float(blk.cube_flops):>14.4g} {float(blk.vector_flops):>14.4g} "
            f"{float(blk.act_bytes):>14.4g} {float(blk.weight_bytes):>14.4g} {float(blk.comm_elements):>14.4g}  {kinds}"
        )
    lines.append("(per layer, one micro-batch)")

    lines.append("")
    lines.append(f"weights          {_gb(report.weight_bytes)}")
    lines.append(f"activations      {_gb(report.activation_bytes)}")
    lines.append(f"training state   {_gb(report.training_state_bytes)}")
    lines.append(f"total memory     {_gb(report.memory_bytes)} of {_gb(bundle.cluster.mem_capacity)}")

    lines.append("")
    lines.append(f"comm intra-node  {_gb(report.comm_bytes_intra)}")
    lines.append(f"comm inter-node  {_gb(report.comm_bytes_inter)}")
    for kind, volume in report.comm_by_kind.items():
        lines.append(f"  {kind:<15}{_gb(volume)}")

    verdict = classify(report.layer_intensity, bundle.cluster)
    flag = " (boundary)" if verdict.boundary else ""
    lines.append("")
    lines.append(
        f"roofline         A.I. {verdict.arithmetic_intensity:.1f} FLOPs/B vs ridge {verdict.ridge_point:.1f}: {verdict.bound}{flag}"
    )

    lines.append("")
    lines.append(f"step time        {report.step_time:.2f} s")
    for part, seconds in report.time_breakdown.items():
        lines.append(f"  {part:<15}{seconds:.2f} s")
    lines.append(f"bubble fraction  {report.bubble_fraction:.4f} ({report.num_microbatches} micro-batches, {report.layers_per_stage} layers/stage)")
    lines.append(f"throughput       {report.throughput / 1e3:.1f} K tokens/s")
    lines.append(f"MFU              {report.mfu:.1f} %")
    lines.append(f"TTFT             {report.ttft:.3f} s")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args: argparse.Namespace) -> int:
    bundle = _load(args)
    options = _options(args)
    cfg = parse_parallel_tuple(args.parallel, resolve_flavor(bundle.model, options))
    report = model_cost(bundle.model, bundle.workload, bundle.cluster, cfg, options)
    if args.format == "json":
        sys.stdout.write(_dump_json(report.to_dict()))
    elif args.format == "csv":
        sys.stdout.write(_csv_text([report]))
    else:
        sys.stdout.write(render_report(report, bundle))
    if not report.feasible:
        print(f"infeasible: {report.reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def _csv_row(report: CostReport) -> List[object]:
    cfg = report.cfg
    return [
        cfg.dp,
        cfg.pp,
        cfg.tp,
        cfg.cp,
        str(report.feasible).lower(),
        report.reason,
        report.step_time,
        report.throughput,
        report.mfu,
        report.weight_bytes,
        report.activation_bytes,
        report.comm_bytes,
    ]


def _csv_text(reports: Sequence[CostReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        writer.writerow(_csv_row(report))
    return buffer.getvalue()


def _plan_rows(ranked: RankedPlan, top: Optional[int]) -> List[CostReport]:
    rows = [entry.report for entry in ranked.entries]
    rows.extend(rejection.report for rejection in ranked.infeasible if rejection.report is not None)
    return rows if top is None else rows[:top]


def render_plan(ranked: RankedPlan, top: Optional[int]) -> str:
    lines = [f"ranked by {ranked.ranking_key}"]
    lines.append(f"{'#':>3} {'(dp,pp,tp,cp)':<14} {'step (s)':>10} {'K tok/s':>10} {'mem (GB)':>10} {'MFU %':>7} {'TTFT (s)':>9}")
    for index, entry in enumerate(ranked.top(top), start=1):
        report = entry.report
        lines.append(
            f"{index:>3} {entry.cfg.label():<14} {report.step_time:>10.2f} {report.throughput / 1e3:>10.1f} "
            f"{report.memory_bytes / 1e9:>10.2f} {report.mfu:>7.1f} {report.ttft:>9.3f}"
        )
    if ranked.infeasible:
        lines.append("")
        lines.append("infeasible")
        for rejection in ranked.infeasible:
            lines.append(f"    {rejection.cfg.label():<14} {rejection.reason}")
    return "\n".join(lines) + "\n"


def _plan_json(ranked: RankedPlan, top: Optional[int]) -> Dict[str, object]:
    return {
        "ranking_key": ranked.ranking_key,
        "entries": [
            dict(entry.report.to_dict(), rank=index, score=entry.score)
            for index, entry in enumerate(ranked.top(top), start=1)
        ],
        "infeasible": [
            {"parallel": {"dp": r.cfg.dp, "pp": r.cfg.pp, "tp": r.cfg.tp, "cp": r.cfg.cp}, "reason": r.reason}
            for r in ranked.infeasible
        ],
    }


def cmd_plan(args: argparse.Namespace) -> int:
    bundle = _load(args)
    slo = bundle.slo
    if args.slo_throughput is not None or args.slo_ttft is not None:
        slo = SLOSpec(
            min_throughput=args.slo_throughput if args.slo_throughput is not None else slo.min_throughput,
            max_ttft=args.slo_ttft if args.slo_ttft is not None else slo.max_ttft,
            percentile_q=slo.percentile_q,
        )
    if args.top is not None and args.top < 1:
        raise ParashardError(f"--top must be >= 1, got {args.top}")
    ranked = plan(bundle.model, bundle.workload, bundle.cluster, slo, args.rank_by, _options(args))
    if args.format == "csv":
        sys.stdout.write(_csv_text(_plan_rows(ranked, args.top)))
    elif args.format == "json":
        sys.stdout.write(_dump_json(_plan_json(ranked, args.top)))
    else:
        sys.stdout.write(render_plan(ranked, args.top))
    if not ranked.entries:
        print("no feasible configuration", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _degrees_label(degrees: Tuple[int, ...]) -> str:
    return "(" + ",".join(str(value) for value in degrees) + ")"


def render_comparison(result: ComparisonReport) -> str:
    lines = [f"reference {result.reference_id}: {len(result.rows)} configurations"]
    lines.append(
        f"{'(dp,pp,tp,cp)':<14} {'meas. MFU':>10} {'model MFU':>10} {'meas. s':>9} {'model s':>9} {'meas. GB':>9} {'model GB':>9}"
    )
    for row in result.rows:
        measured, report = row.measured, row.report
        lines.append(
            f"{_degrees_label(measured.degrees):<14} {measured.mfu_pct:>10.1f} {report.mfu:>10.1f} "
            f"{measured.step_time_s:>9.1f} {report.step_time:>9.1f} {measured.mem_gb:>9.1f} {report.memory_bytes / 1e9:>9.1f}"
        )
    lines.append("")
    lines.append(f"spearman (mfu)       {result.spearman_mfu:.3f}")
    lines.append(f"spearman (memory)    {result.spearman_memory:.3f} (advisory)")
    lines.append(f"measured best        {_degrees_label(result.measured_best)}: top-1 {'yes' if result.top1_matches else 'no'}, top-3 {'yes' if result.best_in_top3 else 'no'}")
    lines.append(f"measured worst       {_degrees_label(result.measured_worst)}: bottom-4 {'yes' if result.worst_in_bottom4 else 'no'}")
    lines.append(f"model top-3          {' '.join(_degrees_label(d) for d in result.planner_top(3))}")
    lines.append(f"model bottom-4       {' '.join(_degrees_label(d) for d in result.planner_bottom(4))}")
    if result.summary is not None:
        summary = result.summary
        lines.append(
            f"summary table        best {_degrees_label(summary.best)} {summary.best_mfu_pct:.1f}%, "
            f"worst {_degrees_label(summary.worst)} {summary.worst_mfu_pct:.1f}%"
        )
    return "\n".join(lines) + "\n"


def _comparison_json(result: ComparisonReport) -> Dict[str, object]:
    return {
        "reference": result.reference_id,
        "spearman_mfu": result.spearman_mfu,
        "spearman_memory": result.spearman_memory,
        "top1_matches": result.top1_matches,
        "best_in_top3": result.best_in_top3,
        "worst_in_bottom4": result.worst_in_bottom4,
        "rows": [
            {"measured": dataclasses.asdict(row.measured), "model": row.report.to_dict()} for row in result.rows
        ],
    }


def cmd_compare(args: argparse.Namespace) -> int:
    bundle = _load(args)
    cluster = bundle.cluster
    if args.training_state_bytes is not None:
        if args.training_state_bytes < 0:
            raise ParashardError("--training-state-bytes must be >= 0")
        cluster = dataclasses.replace(cluster, training_state_bytes_per_param=args.training_state_bytes)
    reference = args.reference or bundle.model.name
    result = compare_with_reference(bundle.model, bundle.workload, cluster, reference, _options(args))
    if args.format == "json":
        sys.stdout.write(_dump_json(_comparison_json(result)))
    elif args.format == "csv":
        sys.stdout.write(_csv_text([row.report for row in result.rows]))
    else:
        sys.stdout.write(render_comparison(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def render_verification(report: VerificationReport) -> str:
    lines = []
    for result in report.results:
        status = "PASS" if result.passed else "FAIL"
        lines.append(
            f"{status}  {result.name:<26} checks={result.checks:<6} max_error={result.max_error:.3g}  {result.seconds:.2f}s"
        )
        if result.detail:
            lines.append(f"      {result.detail}")
    lines.append("all oracles passed" if report.ok else f"{len(report.failures)} oracle(s) failed")
    return "\n".join(lines) + "\n"


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_verification(seed=args.seed)
    if args.format == "json":
        sys.stdout.write(_dump_json([dataclasses.asdict(result) for result in report.results]))
    else:
        sys.stdout.write(render_verification(report))
    return EXIT_OK if report.ok else EXIT_VERIFY_FAILED


COMMANDS = {
    "analyze": cmd_analyze,
    "plan": cmd_plan,
    "compare": cmd_compare,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UnknownReferenceError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except ParashardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        LOGGER.exception("command %s failed", args.command)
        return EXIT_USAGE


__all__ = ["CSV_COLUMNS", "build_parser", "main"]
