"""Mamba-2 mixer costs and the chunked recurrence kernel.

Accounting covers the in/out projections, the five SSD contractions and the
per-GEMM activation footprint. The recurrence kernel is scalar per channel and
exists to check the chunk-carry decomposition against the plain recurrence.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .collectives import CollectiveKind, CommTerm
from .config import (
    TP_SP,
    ChunkingError,
    ModelSpec,
    ParallelConfig,
    ParashardError,
    UnsupportedBlockError,
    UnsupportedFlavorError,
    WorkloadSpec,
    derive_dims,
)
from .transformer_costs import BlockCost

NAIVE = "naive"
PARALLEL_SCAN = "parallel_scan"
SCAN_MODES = (NAIVE, PARALLEL_SCAN)

SP_EXCHANGE = "sp_exchange"
SCALING = "scaling"
MAMBA_COMM_MODES = (SP_EXCHANGE, SCALING)


def _require_mamba(m: ModelSpec) -> None:
    if not m.is_mamba:
        raise UnsupportedBlockError(f"{m.name}: expected a mamba2 block, got {m.block_kind}")


def _chunks(s: int, l: int) -> int:
    if l < 1 or s % l:
        raise ChunkingError(f"chunk size {l} must divide sequence length {s}")
    return s // l


def _check_scan_mode(scan_mode: str) -> None:
    if scan_mode not in SCAN_MODES:
        raise ChunkingError(f"unknown scan mode {scan_mode!r}")


# --- FLOPs -------------------------------------------------------------------


def mamba_proj_flops(m: ModelSpec, w: WorkloadSpec) -> Tuple[int, int]:
    dims = derive_dims(m)
    inproj = 2 * w.b * w.s * m.d * dims.d_inproj
    outproj = 2 * w.b * w.s * dims.d_inner * m.d
    return inproj, outproj


@dataclass(frozen=True)
class SsdBreakdown:
    flops_1: int
    flops_2: int
    flops_3: int
    flops_4: int
    flops_5: int
    scan_mode: str
    decay_flops: int = 0

    @property
    def total(self) -> int:
        return self.flops_1 + self.flops_2 + self.flops_3 + self.flops_4 + self.flops_5

    @property
    def cube_total(self) -> int:
        return self.flops_1 + self.flops_2 + self.flops_3 + self.flops_5

    @property
    def vector_total(self) -> int:
        # the inter-chunk carry and the elementwise decays have no contraction
        return self.flops_4 + self.decay_flops


def ssd_decay_flops(m: ModelSpec, w: WorkloadSpec) -> int:
    c = _chunks(w.s, m.l)
    return w.b * c * m.h * m.l * (m.l + m.n + m.p)


def ssd_flops(m: ModelSpec, w: WorkloadSpec, scan_mode: str = PARALLEL_SCAN) -> SsdBreakdown:
    _require_mamba(m)
    _check_scan_mode(scan_mode)
    b, h, l, n, p = w.b, m.h, m.l, m.n, m.p
    c = _chunks(w.s, l)
    if scan_mode == PARALLEL_SCAN:
        flops_4 = 2 * b * h * c * p * n
    else:
        flops_4 = 2 * b * h * c * (c + 1) * p * n
    return SsdBreakdown(
        flops_1=2 * b * c * h * l * l * n,
        flops_2=2 * b * c * h * l * l * p,
        flops_3=2 * b * c * h * l * p * n,
        flops_4=flops_4,
        flops_5=2 * b * c * h * p * n * l,
        scan_mode=scan_mode,
        decay_flops=ssd_decay_flops(m, w),
    )


def mamba_flops_total(m: ModelSpec, w: WorkloadSpec, scan_mode: str = PARALLEL_SCAN) -> Tuple[int, int]:
    inproj, outproj = mamba_proj_flops(m, w)
    ssd = ssd_flops(m, w, scan_mode)
    return inproj + outproj + ssd.cube_total, ssd.vector_total


def mamba_flops_per_device(
    m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig, scan_mode: str = PARALLEL_SCAN
) -> Tuple[Fraction, Fraction]:
    cube, vector = mamba_flops_total(m, w, scan_mode)
    split = cfg.dp * cfg.tp * cfg.cp
    return Fraction(cube, split), Fraction(vector, split)


# --- memory ------------------------------------------------------------------


@dataclass(frozen=True)
class SsdMemory:
    memory_1: Fraction
    memory_2: Fraction
    memory_3: Fraction
    memory_4: Fraction
    memory_5: Fraction
    in_proj_act: Fraction
    in_proj_weight: Fraction
    out_proj_act: Fraction
    out_proj_weight: Fraction

    @property
    def ssd_total(self) -> Fraction:
        return self.memory_1 + self.memory_2 + self.memory_3 + self.memory_4 + self.memory_5

    @property
    def in_proj(self) -> Fraction:
        return self.in_proj_act + self.in_proj_weight

    @property
    def out_proj(self) -> Fraction:
        return self.out_proj_act + self.out_proj_weight

    @property
    def activation_bytes(self) -> Fraction:
        return self.ssd_total + self.in_proj_act + self.out_proj_act

    @property
    def weight_bytes(self) -> Fraction:
        return self.in_proj_weight + self.out_proj_weight

    @property
    def total(self) -> Fraction:
        return self.activation_bytes + self.weight_bytes


def ssd_memory_bytes(m: ModelSpec, w: WorkloadSpec, cfg: Optional[ParallelConfig] = None) -> SsdMemory:
    """Operand and output footprint of every GEMM of the mixer.

    With ``cfg`` the terms are evaluated on the local shard: batch b/dp,
    sequence s/cp, heads h/tp, projection widths d_inproj/tp and d_inner/tp.
    memory_1 keeps its bare head term and memory_4 its (c + 1) factor, so those
    two only split approximately.
    """
    _require_mamba(m)
    _chunks(w.s, m.l)
    cfg = cfg or ParallelConfig()
    dims = derive_dims(m)
    b = Fraction(w.b, cfg.dp)
    s = Fraction(w.s, cfg.cp)
    h = Fraction(m.h, cfg.tp)
    d_inproj = Fraction(dims.d_inproj, cfg.tp)
    d_inner = Fraction(dims.d_inner, cfg.tp)
    d, l, n, p = m.d, m.l, m.n, m.p
    c = s / l
    act, wgt = m.a_byte, m.w_byte

    memory_1 = (b * l * c * n * h + b * h * c * n + h) * act + (b * c * h * l * l) * act
    memory_2 = (b * c * h * l * l + b * c * l * h * p) * act + (b * c * l * h * p) * act
    memory_3 = (b * c * h * p * l + b * c * l * h * n) * act + (b * c * h * p * n) * act
    memory_4 = (b * h * (c + 1) * c) * act + (b * c * h * p * n) * act + (b * (c + 1) * h * p * n) * act
    memory_5 = (b * c * h * p * n + b * c * l * h * n) * act + (b * c * h * p * l) * act
    return SsdMemory(
        memory_1=memory_1,
        memory_2=memory_2,
        memory_3=memory_3,
        memory_4=memory_4,
        memory_5=memory_5,
        in_proj_act=(b * s * d + b * s * d_inproj) * act,
        in_proj_weight=d * d_inproj * wgt,
        out_proj_act=(b * s * d_inner + b * s * d) * act,
        out_proj_weight=d * d_inner * wgt,
    )


def mamba_params(m: ModelSpec) -> int:
    dims = derive_dims(m)
    return m.d * dims.d_inproj + m.d * dims.d_inner


def mamba_weight_bytes(m: ModelSpec, cfg: ParallelConfig) -> Fraction:
    return Fraction(mamba_params(m) * m.w_byte, cfg.tp)


# --- communication -----------------------------------------------------------


def _check_mamba_flavor(cfg: ParallelConfig) -> None:
    if cfg.tp > 1 and cfg.tp_flavor != TP_SP:
        raise UnsupportedFlavorError(f"mamba2 blocks support tensor parallelism only as {TP_SP}, got {cfg.tp_flavor}")


def mamba_comm_elements(m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig) -> Tuple[Fraction, CollectiveKind]:
    """Scaling estimate of the mixer exchange, constant factor fixed at one.

    DP needs no exchange; the count is 0 and the returned kind is a placeholder.
    """
    _require_mamba(m)
    _check_mamba_flavor(cfg)
    if cfg.tp > 1 and cfg.cp > 1:
        raise ParashardError("mamba_comm_elements takes one strategy per call")
    if cfg.tp > 1:
        return Fraction(m.d * m.n * w.s), CollectiveKind.ALL_REDUCE
    if cfg.cp > 1:
        return Fraction(m.d * m.n * cfg.cp), CollectiveKind.RING_ALL_GATHER
    return Fraction(0), CollectiveKind.ALL_REDUCE


def mamba_boundary_comm(
    m: ModelSpec, w: WorkloadSpec, cfg: ParallelConfig, mode: str = SP_EXCHANGE
) -> List[CommTerm]:
    """Per-layer exchanges charged in step time for a combined config."""
    _require_mamba(m)
    _check_mamba_flavor(cfg)
    if mode not in MAMBA_COMM_MODES:
        raise ParashardError(f"unknown mamba comm mode {mode!r}")
    terms: List[CommTerm] = []
    if cfg.tp > 1:
        if mode == SP_EXCHANGE:
            t = cfg.tp
            elements = 4 * Fraction(t - 1, t) * Fraction(w.b, cfg.dp) * Fraction(w.s, cfg.cp) * m.d
            terms.append(CommTerm("tp", elements, CollectiveKind.RING_ALL_GATHER))
        else:
            terms.append(CommTerm("tp", Fraction(m.d * m.n * w.s), CollectiveKind.ALL_REDUCE))
    if cfg.cp > 1:
        terms.append(CommTerm("cp", Fraction(m.d * m.n * cfg.cp, cfg.tp), CollectiveKind.RING_ALL_GATHER))
    return terms


def mamba_block(
    m: ModelSpec,
    w: WorkloadSpec,
    cfg: ParallelConfig,
    scan_mode: str = PARALLEL_SCAN,
    comm_mode: str = SP_EXCHANGE,
) -> BlockCost:
    cube, vector = mamba_flops_per_device(m, w, cfg, scan_mode)
    terms = mamba_boundary_comm(m, w, cfg, comm_mode)
    return BlockCost(
        name="mamba",
        cube_flops=cube,
        vector_flops=vector,
        act_bytes=ssd_memory_bytes(m, w, cfg).activation_bytes,
        weight_bytes=mamba_weight_bytes(m, cfg),
        comm_elements=sum((term.elements for term in terms), Fraction(0)),
        comm_kind=terms[0].kind if terms else CollectiveKind.ALL_REDUCE,
        comm_terms=tuple(terms),
    )


# --- recurrence kernel -------------------------------------------------------


def _as_sequences(a: Sequence[float], b: Sequence[float], x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    arrays = tuple(np.asarray(seq, dtype=np.float64) for seq in (a, b, x))
    lengths = {arr.shape for arr in arrays}
    if len(lengths) != 1 or arrays[0].ndim != 1:
        raise ChunkingError(f"a, b and x must be 1-D sequences of equal length, got shapes {sorted(lengths)}")
    return arrays  # type: ignore[return-value]


def run_recurrence_direct(a: Sequence[float], b: Sequence[float], x: Sequence[float], h0: float = 0.0) -> np.ndarray:
    a_seq, b_seq, x_seq = _as_sequences(a, b, x)
    states = np.empty_like(a_seq)
    state = float(h0)
    for t in range(a_seq.shape[0]):
        state = a_seq[t] * state + b_seq[t] * x_seq[t]
        states[t] = state
    return states


def _segment_decay(a_chunks: np.ndarray) -> np.ndarray:
    """L[z, j, i] = a[z, i+1] * ... * a[z, j] for i <= j, zero above the diagonal."""
    z, l = a_chunks.shape
    seg = np.zeros((z, l, l))
    for j in range(l):
        seg[:, j, j] = 1.0
        if j:
            seg[:, j, :j] = seg[:, j - 1, :j] * a_chunks[:, j : j + 1]
    return seg


def _intra_chunk(a: np.ndarray, u: np.ndarray, l: int) -> Tuple[np.ndarray, np.ndarray]:
    a_chunks = a.reshape(-1, l)
    u_chunks = u.reshape(-1, l)
    local = np.einsum("zji,zi->zj", _segment_decay(a_chunks), u_chunks)
    from_start = np.cumprod(a_chunks, axis=1)
    return local, from_start


def chunk_carry(a: Sequence[float], b: Sequence[float], x: Sequence[float], l: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-chunk cumulative decay A_c and zero-start contribution U_c."""
    a_seq, b_seq, x_seq = _as_sequences(a, b, x)
    _chunks(a_seq.shape[0], l)
    local, from_start = _intra_chunk(a_seq, b_seq * x_seq, l)
    return from_start[:, -1], local[:, -1]


def chunk_start_states(A: np.ndarray, U: np.ndarray, h0: float = 0.0, scan_mode: str = PARALLEL_SCAN) -> np.ndarray:
    """State entering each chunk plus the final state, length Z + 1.

    ``parallel_scan`` carries the chunk states as a linear prefix, O(Z) steps of
    start[c + 1] = A[c] * start[c] + U[c]. ``naive`` materialises the Z x Z
    chunk decay matrix and applies it in one product.
    """
    _check_scan_mode(scan_mode)
    A = np.asarray(A, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    z = A.shape[0]
    starts = np.empty(z + 1)
    if scan_mode == PARALLEL_SCAN:
        starts[0] = h0
        for c in range(z):
            starts[c + 1] = A[c] * starts[c] + U[c]
        return starts

    # decay[c, i]: product of A over chunks i+1 .. c-1, the weight of U_i in start c
    decay = np.zeros((z + 1, z))
    prefix = np.ones(z + 1)
    for c in range(1, z + 1):
        decay[c, :c - 1] = decay[c - 1, :c - 1] * A[c - 1]
        decay[c, c - 1] = 1.0
        prefix[c] = prefix[c - 1] * A[c - 1]
    return prefix * h0 + decay @ U


def run_recurrence_chunked(
    a: Sequence[float],
    b: Sequence[float],
    x: Sequence[float],
    l: int,
    h0: float = 0.0,
    scan_mode: str = PARALLEL_SCAN,
) -> np.ndarray:
    a_seq, b_seq, x_seq = _as_sequences(a, b, x)
    _chunks(a_seq.shape[0], l)
    if a_seq.shape[0] == 0:
        return a_seq.copy()
    local, from_start = _intra_chunk(a_seq, b_seq * x_seq, l)
    starts = chunk_start_states(from_start[:, -1], local[:, -1], h0, scan_mode)
    states = from_start * starts[:-1, None] + local
    return states.reshape(-1)


@dataclass(frozen=True)
class RecurrenceTrace:
    a_seq: np.ndarray
    b_seq: np.ndarray
    x_seq: np.ndarray
    l: int
    h_direct: np.ndarray
    h_chunked: np.ndarray

    @property
    def max_error(self) -> float:
        if self.h_direct.size == 0:
            return 0.0
        scale = max(1.0, float(np.max(np.abs(self.h_direct))))
        return float(np.max(np.abs(self.h_direct - self.h_chunked))) / scale


def trace_recurrence(
    a: Sequence[float],
    b: Sequence[float],
    x: Sequence[float],
    l: int,
    h0: float = 0.0,
    scan_mode: str = PARALLEL_SCAN,
) -> RecurrenceTrace:
    a_seq, b_seq, x_seq = _as_sequences(a, b, x)
    return RecurrenceTrace(
        a_seq=a_seq,
        b_seq=b_seq,
        x_seq=x_seq,
        l=l,
        h_direct=run_recurrence_direct(a_seq, b_seq, x_seq, h0),
        h_chunked=run_recurrence_chunked(a_seq, b_seq, x_seq, l, h0, scan_mode),
    )


__all__ = [
    "MAMBA_COMM_MODES",
    "NAIVE",
    "PARALLEL_SCAN",
    "SCALING",
    "SCAN_MODES",
    "SP_EXCHANGE",
    "RecurrenceTrace",
    "SsdBreakdown",
    "SsdMemory",
    "chunk_carry",
    "chunk_start_states",
    "mamba_block",
    "mamba_boundary_comm",
    "mamba_comm_elements",
    "mamba_flops_per_device",
    "mamba_flops_total",
    "mamba_params",
    "mamba_proj_flops",
    "mamba_weight_bytes",
    "run_recurrence_chunked",
    "run_recurrence_direct",
    "ssd_decay_flops",
    "ssd_flops",
    "ssd_memory_bytes",
    "trace_recurrence",
]
