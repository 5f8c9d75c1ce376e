"""Per-layer costs of a GQA attention block and a SwiGLU MLP block.

Totals are exact integers; per-device values are exact rationals so that
degree * per-device == total holds without rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Tuple

from .collectives import CollectiveKind, CommTerm, data_moved_per_device
from .config import (
    TP_FLAVORS,
    TP_PLAIN,
    TP_SP,
    TP_UP,
    ModelSpec,
    ParallelConfig,
    ParashardError,
    UnsupportedBlockError,
    UnsupportedFlavorError,
    WorkloadSpec,
)


@dataclass(frozen=True)
class BlockCost:
    name: str
    cube_flops: Fraction
    vector_flops: Fraction
    act_bytes: Fraction
    weight_bytes: Fraction
    comm_elements: Fraction
    comm_kind: CollectiveKind
    comm_terms: Tuple[CommTerm, ...] = field(default=())


def _require_transformer(m: ModelSpec) -> None:
    if not m.is_transformer:
        raise UnsupportedBlockError(f"{m.name}: expected a transformer block, got {m.block_kind}")


def _check_flavor(cfg: ParallelConfig) -> None:
    if cfg.tp_flavor not in TP_FLAVORS:
        raise UnsupportedFlavorError(f"unknown tp flavor {cfg.tp_flavor!r}")


def _split(cfg: ParallelConfig) -> int:
    return cfg.dp * cfg.tp * cfg.cp


# --- GQA -------------------------------------------------------------------


def gqa_flops_total(m: ModelSpec, w: WorkloadSpec) -> Tuple[int, int]:
    _require_transformer(m)
    b, s, d = w.b, w.s, m.d
    cube = 4 * b * s * d * d + 4 * b * s * m.k * m.d_h * d + 4 * b * s * s * d
    # softmax: max, subtraction, exponent, sum, division
    vector = 5 * b * s * s * m.a
    return cube, vector


def gqa_flops_per_device(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Tuple[Fraction, Fraction]:
    cube, vector = gqa_flops_total(m, w)
    split = _split(cfg)
    return Fraction(cube, split), Fraction(vector, split)


def gqa_activation_bytes(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Fraction:
    """Q/K/V inputs and outputs only; score and softmax tensors never materialise under FlashAttention."""
    _require_transformer(m)
    bsd = w.b * w.s * m.d
    sharded = 2 * bsd + Fraction(2 * bsd * m.k, m.a)
    elements = (bsd + sharded / cfg.tp) / (cfg.dp * cfg.cp)
    return elements * m.a_byte


def attention_params(m: ModelSpec) -> Fraction:
    _require_transformer(m)
    return 2 * m.d * m.d * (1 + Fraction(m.k, m.a))


def gqa_weight_bytes(m: ModelSpec, cfg: ParallelConfig) -> Fraction:
    return attention_params(m) * m.w_byte / cfg.tp


# --- MLP -------------------------------------------------------------------


def mlp_flops_total(m: ModelSpec, w: WorkloadSpec) -> Tuple[int, int]:
    """SwiGLU FLOPs; also costs the MLP that follows a Mamba mixer, so any block kind is accepted."""
    b, s = w.b, w.s
    return 6 * b * s * m.d * m.I, 5 * b * s * m.I


def mlp_flops_per_device(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Tuple[Fraction, Fraction]:
    cube, vector = mlp_flops_total(m, w)
    split = _split(cfg)
    return Fraction(cube, split), Fraction(vector, split)


def mlp_activation_bytes(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Fraction:
    """Accepts any block kind, like mlp_flops_total."""
    bs = w.b * w.s
    elements = (2 * bs * m.d + Fraction(4 * bs * m.I, cfg.tp)) / (cfg.dp * cfg.cp)
    return elements * m.a_byte


def mlp_params(m: ModelSpec) -> int:
    return 3 * m.d * m.I


def mlp_weight_bytes(m: ModelSpec, cfg: ParallelConfig) -> Fraction:
    return Fraction(mlp_params(m) * m.w_byte, cfg.tp)


# --- communication -----------------------------------------------------------


def _tp_exchange(m: ModelSpec, b: Fraction, s: Fraction, t: int, flavor: str) -> CommTerm:
    scale = 4 * Fraction(t - 1, t)
    if flavor == TP_PLAIN:
        return CommTerm("tp", scale * b * s * m.d, CollectiveKind.ALL_REDUCE)
    if flavor == TP_SP:
        return CommTerm("tp", scale * b * s * m.d, CollectiveKind.RING_ALL_GATHER)
    if flavor == TP_UP:
        return CommTerm("tp", 4 * Fraction(t - 1, t * t) * b * s * m.d_h * (m.a + m.k), CollectiveKind.ALL_TO_ALL)
    raise UnsupportedFlavorError(f"unknown tp flavor {flavor!r}")


def attn_comm_terms(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> List[CommTerm]:
    """TP exchanges run on the local sequence s/cp; the CP ring carries the local KV heads k/tp."""
    _require_transformer(m)
    _check_flavor(cfg)
    b = Fraction(w.b, cfg.dp)
    terms: List[CommTerm] = []
    if cfg.tp > 1:
        terms.append(_tp_exchange(m, b, Fraction(w.s, cfg.cp), cfg.tp, cfg.tp_flavor))
    if cfg.cp > 1:
        kv = Fraction(m.k, cfg.tp) * m.d_h
        terms.append(CommTerm("cp", 4 * Fraction(cfg.cp - 1, cfg.cp) * b * w.s * kv, CollectiveKind.P2P_SEND_RECV))
    return terms


def attn_comm_elements(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Tuple[Fraction, CollectiveKind]:
    """Single-strategy volume and collective. With no exchange the count is 0 and the kind
    is a placeholder ALL_REDUCE that carries no meaning."""
    if cfg.tp > 1 and cfg.cp > 1:
        raise ParashardError("attn_comm_elements takes one strategy per call; use attn_comm_terms for combined configs")
    terms = attn_comm_terms(m, w, cfg)
    if not terms:
        # DP: nothing in the forward pass
        return Fraction(0), CollectiveKind.ALL_REDUCE
    return terms[0].elements, terms[0].kind


def tpup_breakdown(m: ModelSpec, w: WorkloadSpec, tp: int) -> Tuple[Fraction, Fraction, Fraction, Fraction]:
    """Query, key, value and output all-to-all volumes; they sum to the TPUP layer total."""
    _require_transformer(m)
    scale = 2 * Fraction(tp - 1, tp * tp) * w.b * w.s * m.d_h
    query = scale * m.a
    key = scale * m.k
    return query, key, key, query


def mlp_comm_terms(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> List[CommTerm]:
    _check_flavor(cfg)
    if cfg.tp == 1:
        return []
    scale = 4 * Fraction(cfg.tp - 1, cfg.tp) * Fraction(w.b, cfg.dp) * Fraction(w.s, cfg.cp) * m.d
    kind = CollectiveKind.ALL_REDUCE if cfg.tp_flavor == TP_PLAIN else CollectiveKind.RING_ALL_GATHER
    return [CommTerm("tp", scale, kind)]


def mlp_comm_elements(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Tuple[Fraction, CollectiveKind]:
    """Same contract as attn_comm_elements: kind is a placeholder when the count is 0."""
    terms = mlp_comm_terms(m, w, cfg)
    if not terms:
        return Fraction(0), CollectiveKind.ALL_REDUCE
    return terms[0].elements, terms[0].kind


def dp_gradient_sync_bytes(params_per_device: int | Fraction, m: ModelSpec, cfg: ParallelConfig) -> Fraction:
    if cfg.dp == 1:
        return Fraction(0)
    return Fraction(data_moved_per_device(CollectiveKind.ALL_REDUCE, cfg.dp, Fraction(params_per_device) * m.w_byte))


# --- assembled blocks --------------------------------------------------------


def _block(name: str, flops: Tuple[Fraction, Fraction], act: Fraction, weight: Fraction, terms: List[CommTerm]) -> BlockCost:
    comm = sum((term.elements for term in terms), Fraction(0))
    kind = terms[0].kind if terms else CollectiveKind.ALL_REDUCE
    return BlockCost(name, flops[0], flops[1], act, weight, comm, kind, tuple(terms))


def gqa_block(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> BlockCost:
    return _block(
        "attention",
        gqa_flops_per_device(m, w, cfg),
        gqa_activation_bytes(m, w, cfg),
        gqa_weight_bytes(m, cfg),
        attn_comm_terms(m, w, cfg),
    )


def mlp_block(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> BlockCost:
    return _block(
        "mlp",
        mlp_flops_per_device(m, w, cfg),
        mlp_activation_bytes(m, w, cfg),
        mlp_weight_bytes(m, cfg),
        mlp_comm_terms(m, w, cfg),
    )


__all__ = [
    "BlockCost",
    "attention_params",
    "attn_comm_elements",
    "attn_comm_terms",
    "dp_gradient_sync_bytes",
    "gqa_activation_bytes",
    "gqa_block",
    "gqa_flops_per_device",
    "gqa_flops_total",
    "gqa_weight_bytes",
    "mlp_activation_bytes",
    "mlp_block",
    "mlp_comm_elements",
    "mlp_comm_terms",
    "mlp_flops_per_device",
    "mlp_flops_total",
    "mlp_params",
    "mlp_weight_bytes",
    "tpup_breakdown",
]
