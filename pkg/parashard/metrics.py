"""Roofline and serving/training metrics."""
from __future__ import annotations

from dataclasses import dataclass

from .config import ClusterSpec, MetricError

COMPUTE_BOUND = "compute_bound"
MEMORY_BOUND = "memory_bound"


@dataclass(frozen=True)
class RooflineVerdict:
    arithmetic_intensity: float
    ridge_point: float
    bound: str
    boundary: bool = False


def arithmetic_intensity(flops: float, bytes_moved: float) -> float:
    if bytes_moved <= 0:
        raise MetricError(f"arithmetic intensity undefined for {bytes_moved} bytes moved")
    return float(flops) / float(bytes_moved)


def ridge_point(cluster: ClusterSpec) -> float:
    if cluster.cube_peak <= 0 or cluster.mem_bandwidth <= 0:
        raise MetricError("ridge point needs positive peak FLOPs and memory bandwidth")
    return cluster.cube_peak / cluster.mem_bandwidth


def classify(ai: float, cluster: ClusterSpec) -> RooflineVerdict:
    ridge = ridge_point(cluster)
    if ai > ridge:
        return RooflineVerdict(ai, ridge, COMPUTE_BOUND)
    return RooflineVerdict(ai, ridge, MEMORY_BOUND, boundary=ai == ridge)


def mfu(achieved_flops_rate: float, peak_flops_rate: float) -> float:
    if peak_flops_rate <= 0:
        raise MetricError(f"peak FLOPs rate must be positive, got {peak_flops_rate}")
    if achieved_flops_rate < 0:
        raise MetricError(f"achieved FLOPs rate must be >= 0, got {achieved_flops_rate}")
    return 100.0 * achieved_flops_rate / peak_flops_rate


def latency_metrics(ttft: float, tpot: float, out_tokens: int) -> float:
    """End-to-end latency: first token, then one TPOT per remaining token."""
    if out_tokens < 1:
        raise MetricError(f"out_tokens must be >= 1, got {out_tokens}")
    return ttft + tpot * (out_tokens - 1)


def tpot_from_e2e(e2e: float, ttft: float, tokens: int) -> float:
    if tokens < 2:
        raise MetricError(f"TPOT needs at least two output tokens, got {tokens}")
    return (e2e - ttft) / (tokens - 1)


def throughput(tokens: float, seconds: float) -> float:
    if seconds <= 0:
        raise MetricError(f"throughput undefined for {seconds} s")
    return tokens / seconds


def ttft_estimate(stage_forward: float, pp: int, boundary_p2p: float = 0.0, system_overhead: float = 0.0) -> float:
    """Prefill of one micro-batch through every stage, plus the stage hand-offs."""
    return pp * stage_forward + (pp - 1) * boundary_p2p + system_overhead


__all__ = [
    "COMPUTE_BOUND",
    "MEMORY_BOUND",
    "RooflineVerdict",
    "arithmetic_intensity",
    "classify",
    "latency_metrics",
    "mfu",
    "ridge_point",
    "throughput",
    "tpot_from_e2e",
    "ttft_estimate",
]
