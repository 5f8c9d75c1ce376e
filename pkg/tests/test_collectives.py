from __future__ import annotations

from fractions import Fraction

import pytest

from parashard.collectives import (
    CollectiveKind,
    collective_time,
    data_moved_per_device,
    group_is_intra_node,
    group_ranks,
    reduce_scatter_then_all_gather,
)
from parashard.config import InvalidBandwidthError, InvalidGroupError, ParallelConfig


def test_ring_volumes():
    assert data_moved_per_device(CollectiveKind.RING_ALL_GATHER, 4, 1024) == 768
    assert data_moved_per_device(CollectiveKind.RING_REDUCE_SCATTER, 4, 1024) == 768
    assert data_moved_per_device(CollectiveKind.ALL_TO_ALL, 8, 8) == 7


def test_all_reduce_is_reduce_scatter_plus_all_gather():
    for n in (1, 2, 3, 8, 64):
        rs, ag = reduce_scatter_then_all_gather(n, 1000)
        assert data_moved_per_device(CollectiveKind.ALL_REDUCE, n, 1000) == rs + ag
    assert data_moved_per_device(CollectiveKind.ALL_REDUCE, 2, 1000) == 1000


def test_single_member_group_moves_nothing():
    for kind in (CollectiveKind.REDUCE, CollectiveKind.GATHER, CollectiveKind.RING_ALL_GATHER, CollectiveKind.ALL_REDUCE):
        assert data_moved_per_device(kind, 1, 4096) == 0


def test_rooted_and_p2p_volumes():
    assert data_moved_per_device(CollectiveKind.REDUCE, 4, 10) == 30
    assert data_moved_per_device(CollectiveKind.P2P_SEND_RECV, 4, 10) == 10


def test_exact_rationals_preserved():
    assert data_moved_per_device(CollectiveKind.RING_ALL_GATHER, 3, 1) == Fraction(2, 3)


def test_kind_accepts_plain_string():
    assert data_moved_per_device("all_to_all", 2, 10) == 5


@pytest.mark.parametrize("n, size", [(0, 10), (2, -1)])
def test_invalid_group(n, size):
    with pytest.raises(InvalidGroupError):
        data_moved_per_device(CollectiveKind.REDUCE, n, size)


def test_collective_time():
    assert collective_time(1e9, 1e9) == pytest.approx(1.0)
    assert collective_time(1e9, 1e9, overlap_eff=0.75) == pytest.approx(0.25)
    assert collective_time(1e9, 1e9, overlap_eff=1.0) == 0.0
    assert collective_time(0, 1e9, fixed_cost_per_step=0.5) == pytest.approx(0.5)


@pytest.mark.parametrize("bw, eff", [(0, 0.0), (-1, 0.0), (1e9, 1.5), (1e9, -0.1)])
def test_collective_time_rejects(bw, eff):
    with pytest.raises(InvalidBandwidthError):
        collective_time(1, bw, eff)


def test_tp_groups_are_innermost():
    cfg = ParallelConfig(dp=2, tp=4)
    assert group_ranks(cfg, "tp") == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert group_ranks(cfg, "dp") == [[0, 4], [1, 5], [2, 6], [3, 7]]


def test_intra_node_routing():
    cfg = ParallelConfig(dp=2, tp=4)
    assert group_is_intra_node(cfg, "tp", 4)
    assert not group_is_intra_node(cfg, "dp", 4)
    assert group_is_intra_node(cfg, "pp", 4)
    assert not group_is_intra_node(ParallelConfig(tp=8), "tp", 4)


def test_unknown_axis():
    with pytest.raises(ValueError):
        group_ranks(ParallelConfig(), "ep")


@pytest.mark.parametrize("kind", list(CollectiveKind))
def test_volume_non_decreasing_in_group_size(kind):
    volumes = [data_moved_per_device(kind, n, 1024) for n in range(1, 10)]
    assert all(larger >= smaller for smaller, larger in zip(volumes, volumes[1:]))


def test_rooted_reduce_moves_at_least_ring_volume():
    for n in range(2, 10):
        rooted = data_moved_per_device(CollectiveKind.REDUCE, n, 1024)
        assert rooted >= data_moved_per_device(CollectiveKind.RING_ALL_GATHER, n, 1024)
        assert rooted >= data_moved_per_device(CollectiveKind.RING_REDUCE_SCATTER, n, 1024)
