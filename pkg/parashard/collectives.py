"""Data moved per device for the common collectives, and the fabric each group rides on."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Tuple, Union

from .config import InvalidBandwidthError, InvalidGroupError, ParallelConfig

LOGGER = logging.getLogger("parashard.collectives")

Number = Union[int, Fraction, float]

# canonical rank layout, innermost first
AXES = ("tp", "cp", "pp", "dp")


class CollectiveKind(str, Enum):
    REDUCE = "reduce"
    GATHER = "gather"
    RING_ALL_GATHER = "ring_all_gather"
    RING_REDUCE_SCATTER = "ring_reduce_scatter"
    ALL_TO_ALL = "all_to_all"
    ALL_REDUCE = "all_reduce"
    P2P_SEND_RECV = "p2p_send_recv"


@dataclass(frozen=True)
class CommTerm:
    """One exchange of a layer: which group carries it, how many elements, which collective."""

    axis: str
    elements: Fraction
    kind: CollectiveKind


def data_moved_per_device(kind: CollectiveKind, n: int, tensor_bytes: Number) -> Number:
    if n < 1:
        raise InvalidGroupError(f"collective group size must be >= 1, got {n}")
    if tensor_bytes < 0:
        raise InvalidGroupError(f"tensor size must be >= 0, got {tensor_bytes}")
    kind = CollectiveKind(kind)
    if kind in (CollectiveKind.REDUCE, CollectiveKind.GATHER):
        return (n - 1) * tensor_bytes
    if kind in (CollectiveKind.RING_ALL_GATHER, CollectiveKind.RING_REDUCE_SCATTER, CollectiveKind.ALL_TO_ALL):
        return Fraction(n - 1, n) * tensor_bytes
    if kind is CollectiveKind.ALL_REDUCE:
        rs, ag = reduce_scatter_then_all_gather(n, tensor_bytes)
        return rs + ag
    return tensor_bytes


def reduce_scatter_then_all_gather(n: int, tensor_bytes: Number) -> Tuple[Number, Number]:
    rs = data_moved_per_device(CollectiveKind.RING_REDUCE_SCATTER, n, tensor_bytes)
    ag = data_moved_per_device(CollectiveKind.RING_ALL_GATHER, n, tensor_bytes)
    return rs, ag


def collective_time(
    volume: Number,
    bw: float,
    overlap_eff: float = 0.0,
    fixed_cost_per_step: float = 0.0,
) -> float:
    if not bw > 0:
        raise InvalidBandwidthError(f"bandwidth must be positive, got {bw}")
    if not 0.0 <= overlap_eff <= 1.0:
        raise InvalidBandwidthError(f"overlap efficiency must be in [0, 1], got {overlap_eff}")
    if overlap_eff == 1.0:
        return 0.0
    return float(volume) * (1.0 - overlap_eff) / bw + fixed_cost_per_step


def _axis_degrees(cfg: ParallelConfig) -> Dict[str, int]:
    return {"tp": cfg.tp, "cp": cfg.cp, "pp": cfg.pp, "dp": cfg.dp}


def rank_of(cfg: ParallelConfig, coords: Dict[str, int]) -> int:
    degrees = _axis_degrees(cfg)
    rank, stride = 0, 1
    for axis in AXES:
        rank += coords[axis] * stride
        stride *= degrees[axis]
    return rank


def group_ranks(cfg: ParallelConfig, axis: str) -> List[List[int]]:
    if axis not in AXES:
        raise ValueError(f"unknown parallel axis {axis!r}")
    degrees = _axis_degrees(cfg)
    others = [other for other in AXES if other != axis]
    groups: List[List[int]] = []
    for fixed in itertools.product(*(range(degrees[other]) for other in others)):
        coords = dict(zip(others, fixed))
        group = []
        for index in range(degrees[axis]):
            coords[axis] = index
            group.append(rank_of(cfg, coords))
        groups.append(group)
    return groups


def group_is_intra_node(cfg: ParallelConfig, axis: str, devices_per_node: int) -> bool:
    degree = _axis_degrees(cfg)[axis]
    if degree == 1:
        return True
    if degree > devices_per_node:
        return False
    return all(len({rank // devices_per_node for rank in group}) == 1 for group in group_ranks(cfg, axis))


__all__ = [
    "AXES",
    "CollectiveKind",
    "CommTerm",
    "collective_time",
    "data_moved_per_device",
    "group_is_intra_node",
    "group_ranks",
    "rank_of",
    "reduce_scatter_then_all_gather",
]
