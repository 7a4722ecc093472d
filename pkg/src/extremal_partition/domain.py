"""Sites, base partitions, subregion adjacency, merging, and partition agreement scores."""

from __future__ import annotations

import click
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree
from sklearn.cluster import KMeans
from sklearn.metrics import rand_score

from extremal_partition.errors import InvalidArgumentError
from extremal_partition.models import Partition, SiteSet

KMEANS_MAX_ITER = 200
KMEANS_TOL = 1e-8
FALLBACK_NEIGHBORS = 4


def regular_grid_sites(n: int, prefix: str = "s") -> SiteSet:
    """n x n lattice of cell centres on the unit square, row by row from the origin."""
    if n < 2:
        raise InvalidArgumentError("grid needs n >= 2, got {}".format(n))
    ticks = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(ticks, ticks)
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    width = len(str(n * n))
    ids = ["{}{}".format(prefix, str(k + 1).zfill(width)) for k in range(n * n)]
    return SiteSet(coords, tuple(ids))


def single_region(sites: SiteSet) -> Partition:
    return Partition(np.ones(sites.D, dtype=int))


def build_kmeans_partition(sites: SiteSet, R: int, seed: int) -> Partition:
    """k-means++ clustering of standardized coordinates into R subregions."""
    if R < 1 or R > sites.D:
        raise InvalidArgumentError("need 1 <= R <= D, got R={} for D={}".format(R, sites.D))
    if R == 1:
        return single_region(sites)
    if R == sites.D:
        return compute_adjacency(sites, Partition(np.arange(1, sites.D + 1)))

    std = sites.coords.std(axis=0)
    std[std == 0] = 1.0
    scaled = (sites.coords - sites.coords.mean(axis=0)) / std

    # sklearn relocates empty clusters to the points farthest from their centres
    km = KMeans(
        n_clusters=R,
        init="k-means++",
        n_init=1,
        max_iter=KMEANS_MAX_ITER,
        tol=KMEANS_TOL,
        random_state=seed,
    )
    raw = km.fit_predict(scaled)
    converged = _kmeans_converged(km, scaled, raw)
    if not converged:
        click.echo(
            "Warning: k-means did not converge in {} iterations; using the last assignment".format(
                KMEANS_MAX_ITER),
            err=True,
        )

    partition = Partition(_compact_by_first_seen(raw), converged=converged)
    return compute_adjacency(sites, partition)


def build_grid_partition(sites: SiteSet, nx: int, ny: int) -> Partition:
    """Bin sites into an nx x ny lattice of equal rectangles over their bounding box."""
    if nx < 1 or ny < 1:
        raise InvalidArgumentError("grid partition needs nx, ny >= 1")
    lo = sites.coords.min(axis=0)
    hi = sites.coords.max(axis=0)
    if np.any(hi <= lo):
        raise InvalidArgumentError("sites have a degenerate bounding box")
    if nx * ny == 1:
        return single_region(sites)

    rel = (sites.coords - lo) / (hi - lo)
    ix = np.minimum((rel[:, 0] * nx).astype(int), nx - 1)
    iy = np.minimum((rel[:, 1] * ny).astype(int), ny - 1)
    cell = iy * nx + ix
    # empty cells vanish; remaining ids keep row-major order
    _, labels = np.unique(cell, return_inverse=True)
    return compute_adjacency(sites, Partition(labels + 1))


def compute_adjacency(sites: SiteSet, partition: Partition) -> Partition:
    """Subregions are adjacent when a Delaunay edge joins sites of the two subregions."""
    if partition.D != sites.D:
        raise InvalidArgumentError("partition labels {} sites, site set has {}".format(
            partition.D, sites.D))
    edges = _site_edges(sites.coords)
    region = partition.index
    a, b = region[edges[:, 0]], region[edges[:, 1]]
    cross = a != b
    lo = np.minimum(a[cross], b[cross]) + 1
    hi = np.maximum(a[cross], b[cross]) + 1
    adjacency = frozenset(zip(lo.tolist(), hi.tolist()))
    return Partition(partition.labels, adjacency, partition.converged)


def merge(partition: Partition, merge_pairs) -> Partition:
    """Fuse every group of subregions connected through merge_pairs."""
    R = partition.R
    rows, cols = [], []
    for r1, r2 in merge_pairs:
        pair = (min(r1, r2), max(r1, r2))
        if pair not in partition.adjacency:
            raise InvalidArgumentError("subregions {} and {} are not adjacent".format(*pair))
        rows.append(pair[0] - 1)
        cols.append(pair[1] - 1)
    if not rows:
        return Partition(partition.labels.copy(), partition.adjacency, partition.converged)

    graph = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(R, R))
    _, component = connected_components(graph, directed=False)

    # new ids follow the smallest old id of each group
    first_old = np.full(component.max() + 1, R, dtype=int)
    np.minimum.at(first_old, component, np.arange(R))
    rank = np.empty_like(first_old)
    rank[np.argsort(first_old, kind="stable")] = np.arange(first_old.size)
    new_id = rank[component] + 1

    labels = new_id[partition.index]
    adjacency = set()
    for r1, r2 in partition.adjacency:
        n1, n2 = int(new_id[r1 - 1]), int(new_id[r2 - 1])
        if n1 != n2:
            adjacency.add((min(n1, n2), max(n1, n2)))
    return Partition(labels, frozenset(adjacency), partition.converged)


def rand_index(reference: Partition, candidate: Partition) -> float:
    """Fraction of site pairs grouped consistently by the two partitions."""
    _check_comparable(reference, candidate)
    return float(rand_score(reference.labels, candidate.labels))


def local_rand_index(reference: Partition, candidate: Partition, site_index: int) -> float:
    """Co-membership agreement between site_index and every other site."""
    _check_comparable(reference, candidate)
    if not 0 <= site_index < reference.D:
        raise InvalidArgumentError("site index {} out of range".format(site_index))
    same_ref = reference.labels == reference.labels[site_index]
    same_cand = candidate.labels == candidate.labels[site_index]
    agree = same_ref == same_cand
    agree[site_index] = False
    return float(agree.sum() / (reference.D - 1))


def local_rand_indices(reference: Partition, candidate: Partition) -> np.ndarray:
    """local_rand_index at every site."""
    _check_comparable(reference, candidate)
    same_ref = reference.labels[:, None] == reference.labels[None, :]
    same_cand = candidate.labels[:, None] == candidate.labels[None, :]
    agree = (same_ref == same_cand).sum(axis=1) - 1
    return agree / (reference.D - 1)


def _check_comparable(reference: Partition, candidate: Partition) -> None:
    if reference.D != candidate.D:
        raise InvalidArgumentError("partitions label {} and {} sites".format(
            reference.D, candidate.D))
    if reference.D < 2:
        raise InvalidArgumentError("Rand index needs at least 2 sites")


def _kmeans_converged(km, scaled: np.ndarray, raw: np.ndarray) -> bool:
    """Stopping before the cap, or a final centre update within sklearn's own tolerance."""
    if km.n_iter_ < KMEANS_MAX_ITER:
        return True
    centres = np.array(km.cluster_centers_, dtype=float)
    updated = centres.copy()
    for k in np.unique(raw):
        updated[k] = scaled[raw == k].mean(axis=0)
    shift = float(((updated - centres) ** 2).sum())
    return shift <= KMEANS_TOL * float(scaled.var(axis=0).mean())


def _compact_by_first_seen(raw: np.ndarray) -> np.ndarray:
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    new_id = np.empty(order.size, dtype=int)
    new_id[order] = np.arange(1, order.size + 1)
    _, inverse = np.unique(raw, return_inverse=True)
    return new_id[inverse]


def _site_edges(coords: np.ndarray) -> np.ndarray:
    """Undirected site graph: Delaunay edges, or k-nearest neighbours for degenerate layouts.

    Sites are triangulated in lexicographic coordinate order so that the edges of a lattice
    do not depend on the row order of the site table.
    """
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    edges = order[_canonical_edges(coords[order])]
    return np.unique(np.sort(edges, axis=1), axis=0)


def _canonical_edges(coords: np.ndarray) -> np.ndarray:
    centred = coords - coords.mean(axis=0)
    if coords.shape[0] < 3 or np.linalg.matrix_rank(centred) < 2:
        return _knn_edges(coords)
    try:
        tri = Delaunay(coords)
    except QhullError:
        diag = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
        rng = np.random.default_rng(0)
        jittered = coords + rng.uniform(-1, 1, size=coords.shape) * 1e-9 * diag
        try:
            tri = Delaunay(jittered)
        except QhullError:
            return _knn_edges(coords)
    simplices = tri.simplices
    edges = simplices[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    return np.unique(np.sort(edges, axis=1), axis=0)


def _knn_edges(coords: np.ndarray) -> np.ndarray:
    k = min(FALLBACK_NEIGHBORS, coords.shape[0] - 1)
    _, nbrs = cKDTree(coords).query(coords, k=k + 1)
    src = np.repeat(np.arange(coords.shape[0]), k)
    edges = np.column_stack([src, nbrs[:, 1:].ravel()])
    return np.unique(np.sort(edges, axis=1), axis=0)
