"""Strategy sweep: enumerate (dp, pp, tp, cp), cost every candidate, rank under SLOs."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

from .collectives import CollectiveKind, CommTerm, collective_time, group_is_intra_node
from .config import (
    TP_PLAIN,
    TP_SP,
    ClusterSpec,
    ModelSpec,
    ParallelConfig,
    ParashardError,
    SLOSpec,
    UnsupportedFlavorError,
    WorkloadSpec,
    bind,
    default_tp_flavor,
)
from .mamba_costs import PARALLEL_SCAN, SCALING, SCAN_MODES, SP_EXCHANGE, MAMBA_COMM_MODES, mamba_block, mamba_params
from .metrics import mfu as mfu_percent
from .metrics import throughput as tokens_per_second
from .metrics import ttft_estimate
from .services.schedule import bubble_fraction
from .transformer_costs import (
    BlockCost,
    attention_params,
    dp_gradient_sync_bytes,
    gqa_block,
    mlp_block,
    mlp_params,
)

LOGGER = logging.getLogger("parashard.planner")

RANK_KEYS = ("mfu", "throughput", "step_time", "memory")
_DESCENDING = {"mfu", "throughput"}


@dataclass(frozen=True)
class PlannerOptions:
    overlap_eff: float = 0.0
    include_embeddings: bool = False
    strict_tp_intra_node: bool = False
    limit_pp_to_layers: bool = True
    scan_mode: str = PARALLEL_SCAN
    mamba_comm: str = SP_EXCHANGE
    ttft_overhead: float = 0.0
    workers: int = 1
    tp_flavor: Optional[str] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.overlap_eff <= 1.0:
            raise ParashardError(f"overlap_eff must be in [0, 1], got {self.overlap_eff}")
        if self.scan_mode not in SCAN_MODES:
            raise ParashardError(f"unknown scan mode {self.scan_mode!r}")
        if self.mamba_comm not in MAMBA_COMM_MODES:
            raise ParashardError(f"unknown mamba comm mode {self.mamba_comm!r}")
        if self.workers < 1:
            raise ParashardError(f"workers must be >= 1, got {self.workers}")
        if self.ttft_overhead < 0:
            raise ParashardError(f"ttft_overhead must be >= 0, got {self.ttft_overhead}")


@dataclass(frozen=True)
class EnumerationConstraints:
    strict_tp_intra_node: bool = False
    devices_per_node: Optional[int] = None
    max_pp: Optional[int] = None
    tp_flavor: str = TP_PLAIN


@dataclass(frozen=True)
class CostReport:
    cfg: ParallelConfig
    flops_cube_per_device: float = 0.0
    flops_vector_per_device: float = 0.0
    weight_bytes: float = 0.0
    activation_bytes: float = 0.0
    training_state_bytes: float = 0.0
    comm_bytes_intra: float = 0.0
    comm_bytes_inter: float = 0.0
    step_time: float = 0.0
    throughput: float = 0.0
    mfu: float = 0.0
    feasible: bool = False
    reason: str = ""
    ttft: float = 0.0
    bubble_fraction: float = 0.0
    layers_per_stage: int = 0
    num_microbatches: int = 0
    params_per_device: float = 0.0
    layer_intensity: float = 0.0
    comm_by_kind: Dict[str, float] = field(default_factory=dict)
    time_breakdown: Dict[str, float] = field(default_factory=dict)
    notes: Tuple[str, ...] = ()
    blocks: Tuple[BlockCost, ...] = ()

    @property
    def memory_bytes(self) -> float:
        return self.weight_bytes + self.activation_bytes + self.training_state_bytes

    @property
    def comm_bytes(self) -> float:
        return self.comm_bytes_intra + self.comm_bytes_inter

    def to_dict(self) -> Dict[str, object]:
        return {
            "parallel": {"dp": self.cfg.dp, "pp": self.cfg.pp, "tp": self.cfg.tp, "cp": self.cfg.cp, "tp_flavor": self.cfg.tp_flavor},
            "feasible": self.feasible,
            "reason": self.reason,
            "flops_cube_per_device": self.flops_cube_per_device,
            "flops_vector_per_device": self.flops_vector_per_device,
            "weight_bytes": self.weight_bytes,
            "activation_bytes": self.activation_bytes,
            "training_state_bytes": self.training_state_bytes,
            "memory_bytes": self.memory_bytes,
            "comm_bytes_intra": self.comm_bytes_intra,
            "comm_bytes_inter": self.comm_bytes_inter,
            "comm_by_kind": dict(self.comm_by_kind),
            "time_breakdown": dict(self.time_breakdown),
            "step_time_s": self.step_time,
            "throughput_tok_s": self.throughput,
            "mfu_pct": self.mfu,
            "ttft_s": self.ttft,
            "bubble_fraction": self.bubble_fraction,
            "layers_per_stage": self.layers_per_stage,
            "num_microbatches": self.num_microbatches,
            "params_per_device": self.params_per_device,
            "notes": list(self.notes),
        }


class PlanEntry(NamedTuple):
    cfg: ParallelConfig
    report: CostReport
    score: float


class Rejection(NamedTuple):
    cfg: ParallelConfig
    reason: str
    report: Optional[CostReport] = None


@dataclass(frozen=True)
class RankedPlan:
    entries: Tuple[PlanEntry, ...]
    ranking_key: str
    infeasible: Tuple[Rejection, ...]

    def top(self, k: Optional[int] = None) -> Tuple[PlanEntry, ...]:
        return self.entries if k is None else self.entries[:k]

    @property
    def reports(self) -> List[CostReport]:
        return [entry.report for entry in self.entries]


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


def _divisors(value: int) -> List[int]:
    return [d for d in range(value, 0, -1) if value % d == 0]


def enumerate_configs(world: int, constraints: Optional[EnumerationConstraints] = None) -> List[ParallelConfig]:
    """All (dp, pp, tp, cp) with dp * pp * tp * cp == world, dp-major descending."""
    if world < 1:
        raise ParashardError(f"world must be >= 1, got {world}")
    constraints = constraints or EnumerationConstraints()
    configs: List[ParallelConfig] = []
    for dp in _divisors(world):
        for pp in _divisors(world // dp):
            for tp in _divisors(world // (dp * pp)):
                cp = world // (dp * pp * tp)
                if constraints.max_pp is not None and pp > constraints.max_pp:
                    continue
                if constraints.strict_tp_intra_node and constraints.devices_per_node and tp > constraints.devices_per_node:
                    continue
                configs.append(ParallelConfig(dp=dp, pp=pp, tp=tp, cp=cp, tp_flavor=constraints.tp_flavor))
    return configs


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def _layer_blocks(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig, options: PlannerOptions) -> List[BlockCost]:
    if m.is_transformer:
        return [gqa_block(m, w, cfg), mlp_block(m, w, cfg)]
    blocks = [mamba_block(m, w, cfg, options.scan_mode, options.mamba_comm)]
    if m.I > 0:
        blocks.append(mlp_block(m, w, cfg))
    return blocks


def _layer_params(m: ModelSpec) -> Fraction:
    mixer = attention_params(m) if m.is_transformer else Fraction(mamba_params(m))
    return mixer + mlp_params(m)


def _bandwidth(cfg: ParallelConfig, axis: str, cluster: ClusterSpec) -> Tuple[float, bool]:
    intra = group_is_intra_node(cfg, axis, cluster.devices_per_node)
    LOGGER.debug("%s %s group routed %s-node", cfg.label(), axis, "intra" if intra else "inter")
    return (cluster.intra_bw if intra else cluster.inter_bw), intra


class _CommLedger:
    """Accumulates per-step traffic by fabric and collective kind."""

    def __init__(self, cfg: ParallelConfig, cluster: ClusterSpec, overlap_eff: float) -> None:
        self.cfg = cfg
        self.cluster = cluster
        self.overlap_eff = overlap_eff
        self.intra = Fraction(0)
        self.inter = Fraction(0)
        self.seconds = 0.0
        self.by_kind: Dict[str, Fraction] = {}

    def charge(self, axis: str, kind: CollectiveKind, volume: Fraction) -> None:
        if volume == 0:
            return
        bw, intra = _bandwidth(self.cfg, axis, self.cluster)
        if intra:
            self.intra += volume
        else:
            self.inter += volume
        self.by_kind[kind.value] = self.by_kind.get(kind.value, Fraction(0)) + volume
        self.seconds += collective_time(volume, bw, self.overlap_eff)


def _layer_comm_seconds(terms: Sequence[CommTerm], m: ModelSpec, cfg: ParallelConfig, cluster: ClusterSpec, overlap_eff: float) -> float:
    seconds = 0.0
    for term in terms:
        bw, _ = _bandwidth(cfg, term.axis, cluster)
        seconds += collective_time(term.elements * m.a_byte, bw, overlap_eff)
    return seconds


def _scaling_estimate(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Fraction:
    estimate = Fraction(0)
    if cfg.tp > 1:
        estimate += m.d * m.n * w.s
    if cfg.cp > 1:
        estimate += Fraction(m.d * m.n * cfg.cp, cfg.tp)
    return estimate


def _mamba_notes(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig, options: PlannerOptions) -> List[str]:
    notes = [
        "memory_1 carries a bare h term with no batch or sequence factor",
        "in-projection output activations are divided by tp (the projection is tp-sharded)",
    ]
    if cfg.tp > 1 or cfg.cp > 1:
        estimate = _scaling_estimate(m, w, cfg)
        charged = "charged" if options.mamba_comm == SCALING else "reported only"
        notes.append(f"scaling estimate: {float(estimate):.6g} elements per layer ({charged})")
    return notes


def _infeasible(cfg: ParallelConfig, reason: str, **extra: object) -> CostReport:
    return CostReport(cfg=cfg, feasible=False, reason=reason, **extra)  # type: ignore[arg-type]


def model_cost(
    m: ModelSpec,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    cfg: ParallelConfig,
    options: Optional[PlannerOptions] = None,
) -> CostReport:
    options = options or PlannerOptions()
    bind(cfg, cluster)

    per_replica = w.b * cfg.dp
    if w.global_batch % per_replica:
        return _infeasible(cfg, f"microbatch: global_batch {w.global_batch} not divisible by b*dp = {per_replica}")
    micro = w.global_batch // per_replica

    layers_per_stage = math.ceil(m.layers / cfg.pp)
    notes: List[str] = []
    if m.layers % cfg.pp:
        notes.append(f"uneven stage split: {m.layers} layers over {cfg.pp} stages, {layers_per_stage} on the busiest")
        LOGGER.warning("%s: %d layers do not split evenly over pp=%d", cfg.label(), m.layers, cfg.pp)

    # blocks see one micro-batch on one replica
    stage_cfg = ParallelConfig(dp=1, pp=cfg.pp, tp=cfg.tp, cp=cfg.cp, tp_flavor=cfg.tp_flavor)
    blocks = _layer_blocks(m, w, stage_cfg, options)
    if m.is_mamba:
        notes.extend(_mamba_notes(m, w, stage_cfg, options))

    layer_cube = sum((blk.cube_flops for blk in blocks), Fraction(0))
    layer_vector = sum((blk.vector_flops for blk in blocks), Fraction(0))
    layer_act = sum((blk.act_bytes for blk in blocks), Fraction(0))
    layer_weight = sum((blk.weight_bytes for blk in blocks), Fraction(0))

    params = _layer_params(m) * layers_per_stage / cfg.tp
    if options.include_embeddings:
        tables = 2 if cfg.pp == 1 else 1
        params += Fraction(tables * m.v * m.d, cfg.tp)
    weight_bytes = params * m.w_byte
    activation_bytes = layer_act * layers_per_stage * min(cfg.pp, micro)
    training_state = params * cluster.training_state_bytes_per_param if w.is_training else Fraction(0)

    passes = 3 if w.is_training else 1
    exchanges = 2 if w.is_training else 1
    work = layers_per_stage * micro
    cube = layer_cube * work * passes
    vector = layer_vector * work * passes

    ledger = _CommLedger(cfg, cluster, options.overlap_eff)
    for blk in blocks:
        for term in blk.comm_terms:
            ledger.charge(term.axis, term.kind, term.elements * m.a_byte * work * exchanges)
    if w.is_training:
        ledger.charge("dp", CollectiveKind.ALL_REDUCE, dp_gradient_sync_bytes(params, m, cfg))
    boundary = Fraction(w.b * w.s * m.d * m.a_byte)
    if cfg.pp > 1:
        cuts = min(2, cfg.pp - 1)
        ledger.charge("pp", CollectiveKind.P2P_SEND_RECV, boundary * micro * cuts * exchanges)

    cube_s = float(cube) / cluster.cube_peak
    vector_s = float(vector) / cluster.vector_peak
    overhead_s = cluster.layer_launch_overhead * work
    bubble = bubble_fraction(cfg.pp, micro)
    busy = cube_s + vector_s + ledger.seconds + overhead_s
    step_time = busy / (1.0 - float(bubble))

    reference_cfg = ParallelConfig(tp_flavor=default_tp_flavor(m))
    total_blocks = _layer_blocks(m, w, reference_cfg, options)
    per_micro = sum((blk.cube_flops + blk.vector_flops for blk in total_blocks), Fraction(0))
    model_flops = per_micro * m.layers * Fraction(w.global_batch, w.b) * passes
    utilisation = mfu_percent(float(model_flops) / step_time, cluster.world * cluster.cube_peak)

    layer_forward = (
        float(layer_cube) / cluster.cube_peak
        + float(layer_vector) / cluster.vector_peak
        + sum(_layer_comm_seconds(blk.comm_terms, m, cfg, cluster, options.overlap_eff) for blk in blocks)
        + cluster.layer_launch_overhead
    )
    p2p_s = collective_time(boundary, _bandwidth(cfg, "pp", cluster)[0], options.overlap_eff) if cfg.pp > 1 else 0.0
    ttft = ttft_estimate(layer_forward * layers_per_stage, cfg.pp, p2p_s, options.ttft_overhead)

    layer_bytes = layer_act + layer_weight
    intensity = float((layer_cube + layer_vector) / layer_bytes) if layer_bytes else 0.0

    memory = weight_bytes + activation_bytes + training_state
    feasible = memory <= cluster.mem_capacity
    reason = "" if feasible else f"memory: needs {float(memory) / 1e9:.1f} GB > capacity {cluster.mem_capacity / 1e9:.1f} GB"

    report = CostReport(
        cfg=cfg,
        flops_cube_per_device=float(cube),
        flops_vector_per_device=float(vector),
        weight_bytes=float(weight_bytes),
        activation_bytes=float(activation_bytes),
        training_state_bytes=float(training_state),
        comm_bytes_intra=float(ledger.intra),
        comm_bytes_inter=float(ledger.inter),
        step_time=step_time,
        throughput=tokens_per_second(w.tokens_per_step, step_time),
        mfu=utilisation,
        feasible=feasible,
        reason=reason,
        ttft=ttft,
        bubble_fraction=float(bubble),
        layers_per_stage=layers_per_stage,
        num_microbatches=micro,
        params_per_device=float(params),
        layer_intensity=intensity,
        comm_by_kind={kind: float(volume) for kind, volume in sorted(ledger.by_kind.items())},
        time_breakdown={"cube": cube_s, "vector": vector_s, "comm": ledger.seconds, "overhead": overhead_s},
        notes=tuple(notes),
        blocks=tuple(blocks),
    )
    LOGGER.debug("%s: step %.3f s, mfu %.2f%%, memory %.2f GB", cfg.label(), step_time, utilisation, float(memory) / 1e9)
    return report


def evaluate_all(
    m: ModelSpec,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    configs: Sequence[ParallelConfig],
    options: Optional[PlannerOptions] = None,
) -> List[CostReport]:
    options = options or PlannerOptions()

    def evaluate(cfg: ParallelConfig) -> CostReport:
        return model_cost(m, w, cluster, cfg, options)

    if options.workers == 1:
        return [evaluate(cfg) for cfg in configs]
    with ThreadPoolExecutor(max_workers=options.workers) as pool:
        # map keeps enumeration order
        return list(pool.map(evaluate, configs))


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

_SCORES: Dict[str, Callable[[CostReport], float]] = {
    "mfu": lambda report: report.mfu,
    "throughput": lambda report: report.throughput,
    "step_time": lambda report: report.step_time,
    "memory": lambda report: report.memory_bytes,
}


def _slo_violation(report: CostReport, slo: Optional[SLOSpec]) -> str:
    if slo is None:
        return ""
    if slo.min_throughput is not None and report.throughput < slo.min_throughput:
        return f"slo: throughput {report.throughput:.1f} tok/s < {slo.min_throughput:g}"
    if slo.max_ttft is not None and report.ttft > slo.max_ttft:
        return f"slo: ttft {report.ttft:.3f} s > {slo.max_ttft:g}"
    return ""


def rank(plans: Sequence[CostReport], slo: Optional[SLOSpec] = None, key: str = "mfu") -> RankedPlan:
    if not plans:
        raise ParashardError("rank needs at least one candidate")
    if key not in _SCORES:
        raise ParashardError(f"unknown ranking key {key!r}; expected one of {', '.join(RANK_KEYS)}")
    score = _SCORES[key]
    sign = -1.0 if key in _DESCENDING else 1.0

    kept: List[CostReport] = []
    rejected: List[Rejection] = []
    for report in plans:
        reason = report.reason if not report.feasible else _slo_violation(report, slo)
        if reason:
            rejected.append(Rejection(report.cfg, reason, report))
        else:
            kept.append(report)

    def sort_key(report: CostReport) -> Tuple[float, int, int, int, int]:
        cfg = report.cfg
        return (sign * score(report), -cfg.dp, -cfg.pp, -cfg.tp, -cfg.cp)

    ordered = sorted(kept, key=sort_key)
    entries = tuple(PlanEntry(report.cfg, report, score(report)) for report in ordered)
    return RankedPlan(entries=entries, ranking_key=key, infeasible=tuple(rejected))


def resolve_flavor(m: ModelSpec, options: PlannerOptions) -> str:
    flavor = options.tp_flavor or default_tp_flavor(m)
    if m.is_mamba and flavor != TP_SP:
        raise UnsupportedFlavorError(f"mamba2 blocks support tensor parallelism only as {TP_SP}, got {flavor}")
    return flavor


def plan(
    m: ModelSpec,
    w: WorkloadSpec,
    cluster: ClusterSpec,
    slo: Optional[SLOSpec] = None,
    key: str = "mfu",
    options: Optional[PlannerOptions] = None,
) -> RankedPlan:
    options = options or PlannerOptions()
    constraints = EnumerationConstraints(
        strict_tp_intra_node=options.strict_tp_intra_node,
        devices_per_node=cluster.devices_per_node,
        max_pp=m.layers if options.limit_pp_to_layers else None,
        tp_flavor=resolve_flavor(m, options),
    )
    configs = enumerate_configs(cluster.world, constraints)
    LOGGER.info("sweeping %d configs for %s on %d devices", len(configs), m.name, cluster.world)
    if m.is_mamba and options.mamba_comm == SCALING:
        LOGGER.warning("%s: charging the mamba scaling estimate as communication volume", m.name)
    return rank(evaluate_all(m, w, cluster, configs, options), slo, key)


__all__ = [
    "CostReport",
    "EnumerationConstraints",
    "PlanEntry",
    "PlannerOptions",
    "RANK_KEYS",
    "RankedPlan",
    "Rejection",
    "enumerate_configs",
    "evaluate_all",
    "model_cost",
    "plan",
    "rank",
    "resolve_flavor",
]
