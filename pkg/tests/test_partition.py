import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from letfmm.partition import (
    PartitionScheme,
    SchemeKind,
    balance,
    connectivity_components,
    default_linking_length,
    find_splitter,
    hot_level,
    partition,
    partition_grid,
)
from letfmm.space import Box3, Distribution, DistKind, Particles, generate


def test_splitter_exact_on_1_to_100():
    res = find_splitter(np.arange(1, 101), 50, tol=0)
    assert res.converged
    assert np.count_nonzero(np.arange(1, 101) < res.value) == 50


def test_splitter_duplicates_report_imbalance():
    res = find_splitter(np.full(100, 3.0), 50, tol=0)
    assert not res.converged
    assert res.imbalance == 50


def test_splitter_rank_split_matches_single_list():
    v = np.random.default_rng(2).normal(size=2000)
    single = find_splitter(v, 777, tol=0)
    split = find_splitter(np.array_split(v, 4), 777, tol=0)
    assert split.value == single.value
    assert np.count_nonzero(v < single.value) == 777


def test_splitter_histogram_state_invariants():
    v = np.random.default_rng(3).integers(0, 10**9, 5000).astype(np.uint64)
    res = find_splitter(np.array_split(v, 3), 1234, tol=0)
    assert np.count_nonzero(v < res.value) == 1234
    for h in res.history:
        assert np.all(np.diff(h.edges.astype(float)) > 0)
        assert np.all(np.diff(h.counts) >= 0) and h.counts[-1] <= len(v)


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=300), st.data())
@settings(max_examples=100, deadline=None)
def test_splitter_property(values, data):
    v = np.array(values)
    target = data.draw(st.integers(0, len(v)))
    res = find_splitter(v, target, tol=0)
    below = np.count_nonzero(v < res.value)
    assert below == res.below
    assert abs(below - target) == res.imbalance
    # best achievable with duplicates: nearest count of the form #{v < x}
    achievable = np.searchsorted(np.sort(v), np.unique(np.concatenate([v, [v.max() + 1]])), side="left")
    assert res.imbalance == np.min(np.abs(achievable - target))


def test_splitter_errors():
    with pytest.raises(ValueError):
        find_splitter(np.arange(5), 6)
    with pytest.raises(ValueError):
        find_splitter(np.arange(5), 2, tol=-1)


def test_hot_level():
    assert hot_level(100_000, 64) == 6
    assert hot_level(10, 64) == 2
    assert hot_level(10**30, 1) == 21


def _cover(parts, n):
    ids = np.concatenate([p.particles.ids for p in parts])
    return len(ids) == n and np.array_equal(np.sort(ids), np.arange(n))


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_partition_cover_and_tight_bounds(kind):
    p = generate(Distribution(DistKind.SPHERE_SURFACE, 5000, 3))
    parts = partition(p, PartitionScheme(kind, 6))
    assert _cover(parts, 5000)
    for part in parts:
        pos = part.particles.pos
        assert np.array_equal(part.bounds.lo, pos.min(axis=0)) and np.array_equal(part.bounds.hi, pos.max(axis=0))
        assert np.all(part.tree_bounds.contains(pos))
        if kind is SchemeKind.HYBRID_ORB:
            assert part.tree_bounds == part.bounds


def test_orb_seven_over_two():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 7, 0))
    parts = partition(p, PartitionScheme(SchemeKind.ORB_GLOBAL, 2))
    assert sorted(x.count for x in parts) == [3, 4]


@pytest.mark.parametrize("k", [1, 5, 100])
def test_hybrid_three_ranks(k):
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 3 * k, 4))
    parts = partition(p, PartitionScheme(SchemeKind.HYBRID_ORB, 3))
    assert [x.count for x in parts] == [k, k, k]


@given(st.integers(1, 400), st.integers(1, 17))
@settings(max_examples=40, deadline=None)
def test_orb_balance_property(n, P):
    if n < P:
        return
    p = generate(Distribution(DistKind.UNIFORM_CUBE, n, n))
    lo, hi = balance(partition(p, PartitionScheme(SchemeKind.ORB_GLOBAL, P)))
    assert hi - lo <= 1


def test_orb_splits_longest_axis():
    rng = np.random.default_rng(1)
    pos = rng.random((3000, 3)) * np.array([4.0, 1.0, 2.0])
    trace = []
    partition(Particles(pos, np.ones(3000)), PartitionScheme(SchemeKind.ORB_GLOBAL, 11), trace=trace)
    assert len(trace) == 10
    for t in trace:
        assert t["extent"][t["axis"]] == t["extent"].max()
    assert trace[0]["axis"] == 0


def test_orb_domains_tile():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 2000, 5))
    parts = partition(p, PartitionScheme(SchemeKind.ORB_GLOBAL, 8))
    vol = sum(np.prod(x.domain.extent) for x in parts)
    assert vol == pytest.approx(np.prod(Box3.around(p.pos).extent))
    for x in parts:
        assert np.all(x.domain.contains(x.particles.pos))


def test_partition_needs_enough_particles():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 3, 0))
    with pytest.raises(ValueError):
        partition(p, PartitionScheme(SchemeKind.HOT_MORTON, 4))
    with pytest.raises(ValueError):
        PartitionScheme(SchemeKind.ORB_GLOBAL, 0)


def test_hot_ranges_are_contiguous_and_balanced():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 20_000, 8))
    parts = partition(p, PartitionScheme(SchemeKind.HOT_MORTON, 8))
    lo, hi = balance(parts)
    assert hi - lo <= 2 * max(1, 20_000 // 8000) + 50


def test_connectivity_trivial_cases():
    one = Particles(np.random.default_rng(0).random((50, 3)) * 0.1, np.ones(50))
    assert connectivity_components(one.pos, 1.0) == 1
    two = np.vstack([one.pos, one.pos + 10])
    assert connectivity_components(two, 1.0) == 2
    with pytest.raises(ValueError):
        connectivity_components(np.zeros((0, 3)), 1.0)
    with pytest.raises(ValueError):
        connectivity_components(one.pos, 0.0)


def test_partition_grid_domains():
    p = generate(Distribution(DistKind.UNIFORM_CUBE, 4000, 1))
    parts = partition_grid(p, (2, 2, 2), Box3([0, 0, 0], [1, 1, 1]))
    assert _cover(parts, 4000)
    assert parts[7].domain == Box3([0.5, 0.5, 0.5], [1, 1, 1])


def test_hilbert_partitions_fragment_on_sphere():
    p = generate(Distribution(DistKind.SPHERE_SURFACE, 100_000, 7))
    link = default_linking_length(p.pos)
    hot = partition(p, PartitionScheme(SchemeKind.HOT_HILBERT, 64))
    comps = [connectivity_components(x, link) for x in hot]
    assert max(comps) >= 2
    # large fragments, not sampling specks: some rank splits into pieces of 100+ particles
    assert sum(c > 1 for c in comps) > 16
