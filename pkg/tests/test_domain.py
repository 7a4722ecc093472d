"""Tests for sites, partitions, adjacency, merging and Rand indices."""

import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from extremal_partition.domain import (
    KMEANS_MAX_ITER,
    _kmeans_converged,
    build_grid_partition,
    build_kmeans_partition,
    compute_adjacency,
    local_rand_index,
    local_rand_indices,
    merge,
    rand_index,
    regular_grid_sites,
)
from extremal_partition.errors import InvalidArgumentError
from extremal_partition.models import Partition, SiteSet


def brute_rand(a, b):
    pairs = list(itertools.combinations(range(len(a)), 2))
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in pairs)
    return agree / len(pairs)


def test_regular_grid_sites():
    sites = regular_grid_sites(3)
    assert sites.D == 9
    assert sites.ids[0] == "s1"
    assert sites.coords[0] == pytest.approx([1 / 6, 1 / 6])
    assert sites.coords[1] == pytest.approx([0.5, 1 / 6])


def test_grid_partition_quadrants(quadrants):
    assert quadrants.R == 4
    assert quadrants.sizes().tolist() == [9, 9, 9, 9]
    # first site sits in the lower-left cell
    assert quadrants.labels[0] == 1
    assert {(1, 2), (1, 3), (2, 4), (3, 4)} <= quadrants.adjacency


def test_grid_partition_single_cell(grid_sites):
    partition = build_grid_partition(grid_sites, 1, 1)
    assert partition.R == 1
    assert partition.adjacency == frozenset()


def test_kmeans_partition(grid_sites):
    partition = build_kmeans_partition(grid_sites, 4, seed=0)
    assert partition.R == 4
    assert partition.converged
    assert partition.labels[0] == 1
    assert len(partition.adjacency) >= 3
    again = build_kmeans_partition(grid_sites, 4, seed=0)
    assert np.array_equal(partition.labels, again.labels)


def test_kmeans_partition_edge_cases(grid_sites):
    assert build_kmeans_partition(grid_sites, 1, seed=0).R == 1
    assert build_kmeans_partition(grid_sites, grid_sites.D, seed=0).R == grid_sites.D
    with pytest.raises(InvalidArgumentError):
        build_kmeans_partition(grid_sites, grid_sites.D + 1, seed=0)


def test_collinear_sites_use_nearest_neighbours():
    sites = SiteSet([[float(k), 0.0] for k in range(6)], [str(k) for k in range(6)])
    partition = compute_adjacency(sites, Partition([1, 1, 2, 2, 3, 3]))
    assert (1, 2) in partition.adjacency
    assert (2, 3) in partition.adjacency


def test_merge_contracts_adjacency():
    partition = Partition([1, 1, 2, 2, 3, 3], adjacency={(1, 2), (2, 3)})
    merged = merge(partition, {(2, 3)})
    assert merged.labels.tolist() == [1, 1, 2, 2, 2, 2]
    assert merged.adjacency == frozenset({(1, 2)})


def test_merge_transitive_and_ordered():
    partition = Partition([1, 2, 3, 4], adjacency={(1, 2), (2, 3), (3, 4)})
    merged = merge(partition, {(3, 4), (2, 3)})
    assert merged.labels.tolist() == [1, 2, 2, 2]
    assert merge(partition, set()).R == 4


def test_merge_rejects_non_neighbours():
    partition = Partition([1, 2, 3], adjacency={(1, 2), (2, 3)})
    with pytest.raises(InvalidArgumentError, match="not adjacent"):
        merge(partition, {(1, 3)})


def test_rand_index_example():
    a = Partition([1, 1, 2])
    b = Partition([1, 2, 2])
    assert rand_index(a, b) == pytest.approx(1 / 3)
    assert rand_index(a, a) == 1.0
    assert local_rand_index(a, b, 0) == pytest.approx(0.5)


def test_rand_indices_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        D = int(rng.integers(2, 30))
        a = rng.integers(1, 4, size=D)
        b = rng.integers(1, 5, size=D)
        _, a = np.unique(a, return_inverse=True)
        _, b = np.unique(b, return_inverse=True)
        ref, cand = Partition(a + 1), Partition(b + 1)
        assert rand_index(ref, cand) == pytest.approx(brute_rand(a, b))
        lri = local_rand_indices(ref, cand)
        assert lri[0] == pytest.approx(local_rand_index(ref, cand, 0))
        # RI is the mean of the local indices
        assert lri.mean() == pytest.approx(rand_index(ref, cand))


def test_rand_index_size_mismatch():
    with pytest.raises(InvalidArgumentError):
        rand_index(Partition([1, 2]), Partition([1, 2, 2]))


def test_adjacency_ignores_site_order(grid_sites, quadrants):
    rng = np.random.default_rng(8)
    for _ in range(30):
        perm = rng.permutation(grid_sites.D)
        shuffled = SiteSet(grid_sites.coords[perm], tuple(grid_sites.ids[k] for k in perm))
        partition = compute_adjacency(shuffled, Partition(quadrants.labels[perm]))
        assert partition.adjacency == quadrants.adjacency


def test_collinear_adjacency_ignores_site_order():
    coords = np.array([[float(k), 0.0] for k in range(8)])
    labels = np.array([1, 1, 2, 2, 3, 3, 4, 4])
    expected = compute_adjacency(SiteSet(coords, [str(k) for k in range(8)]), Partition(labels))
    perm = np.random.default_rng(2).permutation(8)
    shuffled = SiteSet(coords[perm], [str(k) for k in perm])
    assert compute_adjacency(shuffled, Partition(labels[perm])).adjacency == expected.adjacency


def test_kmeans_run_stopping_at_the_cap():
    scaled = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]])
    raw = np.array([0, 0, 1, 1])
    settled = SimpleNamespace(n_iter_=KMEANS_MAX_ITER, cluster_centers_=[[0.0, 0.5], [5.0, 0.5]])
    assert _kmeans_converged(settled, scaled, raw)
    moving = SimpleNamespace(n_iter_=KMEANS_MAX_ITER, cluster_centers_=[[0.0, 0.4], [5.0, 0.5]])
    assert not _kmeans_converged(moving, scaled, raw)
    early = SimpleNamespace(n_iter_=3, cluster_centers_=[[9.0, 9.0], [9.0, 9.0]])
    assert _kmeans_converged(early, scaled, raw)


def test_rand_index_symmetric_and_label_free():
    rng = np.random.default_rng(12)
    a = rng.integers(1, 4, size=25)
    b = rng.integers(1, 6, size=25)
    _, a = np.unique(a, return_inverse=True)
    _, b = np.unique(b, return_inverse=True)
    ref, cand = Partition(a + 1), Partition(b + 1)
    assert rand_index(ref, cand) == pytest.approx(rand_index(cand, ref))
    # relabel the candidate with a permutation of its ids
    ids = rng.permutation(cand.R) + 1
    relabelled = Partition(ids[b])
    assert rand_index(ref, relabelled) == pytest.approx(rand_index(ref, cand))
    assert np.allclose(local_rand_indices(ref, relabelled), local_rand_indices(ref, cand))
