"""Pair selection, pairwise log-likelihood, fused penalty, sandwich matrices, CLIC/CBIC."""

from __future__ import annotations

import math

import click
import numpy as np
from scipy import sparse
from scipy.spatial.distance import pdist

from extremal_partition.dependence import log_density, variogram
from extremal_partition.errors import ContractViolationError, DataError, InvalidArgumentError
from extremal_partition.models import (
    DependenceField,
    MaximaPanel,
    PairGeometry,
    PairSet,
    Partition,
    PenaltySpec,
    SandwichInfo,
    SiteSet,
)

L1_SMOOTHING = 1e-8
GAMMA_STEP = 1e-5  # relative step of the central difference in gamma
HESSIAN_STEP = 1e-4
ILL_CONDITIONED = 1e12


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def all_pairs(D: int) -> PairSet:
    i, j = np.triu_indices(D, 1)
    return PairSet(np.column_stack([i, j]), scheme="all", fraction=1.0)


def sample_pairs_simple(D: int, fraction: float, seed: int) -> PairSet:
    """Uniform sample without replacement of round(fraction * C(D, 2)) pairs."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("pair fraction must lie in (0, 1], got {}".format(fraction))
    total = D * (D - 1) // 2
    n = _round_half_up(fraction * total)
    if n < 1:
        raise InvalidArgumentError(
            "fraction {} of {} pairs selects no pair".format(fraction, total))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=n, replace=False))
    i, j = np.triu_indices(D, 1)
    return PairSet(np.column_stack([i[chosen], j[chosen]]), "simple", fraction, 1, seed)


def sample_pairs_stratified(sites: SiteSet, fraction: float, n_classes: int, seed: int) -> PairSet:
    """Same percentage of pairs from each equal-length distance class over [min, max]."""
    if n_classes < 1:
        raise InvalidArgumentError("need at least one distance class")
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("pair fraction must lie in (0, 1], got {}".format(fraction))
    dist = pdist(sites.coords)
    i, j = np.triu_indices(sites.D, 1)
    edges = np.linspace(dist.min(), dist.max(), n_classes + 1)
    klass = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, n_classes - 1)

    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(n_classes):
        members = np.flatnonzero(klass == c)
        if members.size == 0:
            click.echo("Warning: distance class {} is empty; skipped".format(c + 1), err=True)
            continue
        n = min(members.size, max(1, _round_half_up(fraction * members.size)))
        chosen.append(rng.choice(members, size=n, replace=False))
    chosen = np.sort(np.concatenate(chosen))
    return PairSet(np.column_stack([i[chosen], j[chosen]]), "stratified", fraction, n_classes, seed)


class FieldLayout:
    """Maps a free parameter vector theta onto per-subregion (psi1, psi2).

    A coordinate whose penalty weight is infinite is carried by one shared entry of theta.
    """

    def __init__(self, partition: Partition, shared: tuple = (False, False)):
        self.partition = partition
        self.shared = tuple(bool(s) for s in shared)
        R = partition.R
        blocks = []
        for is_shared in self.shared:
            blocks.append(np.ones((R, 1)) if is_shared else np.eye(R))
        # psi_full = M @ theta, psi_full = [psi1 (R), psi2 (R)]
        self.M = np.block([
            [blocks[0], np.zeros((R, blocks[1].shape[1]))],
            [np.zeros((R, blocks[0].shape[1])), blocks[1]],
        ])

    @property
    def p(self) -> int:
        return self.M.shape[1]

    def to_theta(self, field: DependenceField) -> np.ndarray:
        psi = np.concatenate([field.psi1, field.psi2])
        return np.linalg.lstsq(self.M, psi, rcond=None)[0]

    def to_field(self, theta) -> DependenceField:
        psi = self.M @ np.asarray(theta, float)
        R = self.partition.R
        return DependenceField(psi[:R], psi[R:], self.partition)

    def reduce(self, grad_full: np.ndarray) -> np.ndarray:
        return grad_full @ self.M


class PairwiseData:
    """Unit Frechet observations and geometry of a pair set, prepared once per fit."""

    def __init__(self, panel: MaximaPanel, pairs: PairSet, sites: SiteSet, partition: Partition):
        if panel.scale != "unit_frechet":
            raise DataError("the pairwise likelihood needs a unit Frechet panel")
        if partition.D != sites.D or panel.D != sites.D:
            raise InvalidArgumentError("panel, sites and partition disagree on the number of sites")
        if pairs.pairs.max() >= sites.D:
            raise InvalidArgumentError("pair index out of range for {} sites".format(sites.D))
        used = np.unique(pairs.pairs)
        bad = panel.values[:, used] <= 0
        if np.any(bad):
            t, c = np.argwhere(bad)[0]
            raise DataError("nonpositive maximum at time {}, site {}".format(t, sites.ids[used[c]]))

        self.sites = sites
        self.partition = partition
        self.pairs = pairs
        self.T = panel.T
        self.z_i = panel.values[:, pairs.i]
        self.z_j = panel.values[:, pairs.j]
        self.region_i = partition.index[pairs.i]
        self.region_j = partition.index[pairs.j]
        self.h = np.linalg.norm(sites.coords[pairs.i] - sites.coords[pairs.j], axis=1)

    def gamma(self, field: DependenceField) -> np.ndarray:
        return np.asarray(variogram(PairGeometry.for_pairs(
            self.sites, field, self.pairs.i, self.pairs.j)))

    def log_densities(self, gamma: np.ndarray) -> np.ndarray:
        return log_density(self.z_i, self.z_j, gamma[None, :])

    def loglik(self, field: DependenceField) -> float:
        """Column sums per pair, then a correctly rounded sum over pairs."""
        per_pair = self.log_densities(self.gamma(field)).sum(axis=0)
        return math.fsum(per_pair.tolist())

    def loglik_per_time(self, field: DependenceField) -> np.ndarray:
        return self.log_densities(self.gamma(field)).sum(axis=1)

    def gradient(self, field: DependenceField) -> np.ndarray:
        """d loglik / d (psi1, psi2), length 2R."""
        dgamma = self._dlog_dgamma(field).sum(axis=0)
        return np.asarray(self._gamma_jacobian(field).T @ dgamma).ravel()

    def time_scores(self, field: DependenceField) -> np.ndarray:
        """Per-replicate scores u_t, shape (T, 2R)."""
        return np.asarray((self._gamma_jacobian(field).T @ self._dlog_dgamma(field).T).T)

    def _dlog_dgamma(self, field: DependenceField) -> np.ndarray:
        gamma = np.maximum(self.gamma(field), 1e-10)
        up = gamma * math.exp(GAMMA_STEP)
        down = gamma * math.exp(-GAMMA_STEP)
        return (self.log_densities(up) - self.log_densities(down)) / (up - down)[None, :]

    def _gamma_jacobian(self, field: DependenceField) -> sparse.csr_matrix:
        """Sparse (P, 2R) matrix of d gamma_p / d psi."""
        R = self.partition.R
        s2 = field.sigma2
        phi = field.phi
        a, b = self.region_i, self.region_j
        s2_i, s2_j = s2[a], s2[b]
        phi_i, phi_j = phi[a], phi[b]
        m = (phi_i + phi_j) / 2.0
        rho = 2.0 * np.sqrt(phi_i * phi_j) / (phi_i + phi_j) * np.exp(-self.h / np.sqrt(m))
        cross = np.sqrt(s2_i * s2_j) * rho

        d_psi1_i = (s2_i - cross) / 2.0
        d_psi1_j = (s2_j - cross) / 2.0
        d_psi2_i = -cross * (0.5 - phi_i / (phi_i + phi_j) + self.h * phi_i / (4.0 * m**1.5))
        d_psi2_j = -cross * (0.5 - phi_j / (phi_i + phi_j) + self.h * phi_j / (4.0 * m**1.5))

        P = a.size
        rows = np.tile(np.arange(P), 4)
        cols = np.concatenate([a, b, R + a, R + b])
        vals = np.concatenate([d_psi1_i, d_psi1_j, d_psi2_i, d_psi2_j])
        return sparse.coo_matrix((vals, (rows, cols)), shape=(P, 2 * R)).tocsr()


def pairwise_loglik(
    panel: MaximaPanel,
    pairs: PairSet,
    sites: SiteSet,
    partition: Partition,
    field: DependenceField,
) -> float:
    return PairwiseData(panel, pairs, sites, partition).loglik(field)


def fused_penalty(field: DependenceField, adjacency, spec: PenaltySpec) -> float:
    """sum_k lambda_k sum_{r1 ~ r2} |psi_k,r1 - psi_k,r2|^q."""
    if any(math.isinf(lam) for lam in spec.lambdas):
        raise ContractViolationError(
            "an infinite penalty weight must be handled as a shared parameter, not evaluated")
    edges = _edge_index(adjacency)
    if edges.shape[0] == 0:
        return 0.0
    total = 0.0
    for lam, psi in zip(spec.lambdas, (field.psi1, field.psi2)):
        if lam == 0:
            continue
        diff = np.abs(psi[edges[:, 0]] - psi[edges[:, 1]])
        total += lam * math.fsum((diff**spec.q).tolist())
    return total


def resolve_penalty(field: DependenceField, spec: PenaltySpec) -> PenaltySpec:
    """Replace infinite weights by 0 once the field honours the equality constraint."""
    lambdas = []
    for lam, psi in zip(spec.lambdas, (field.psi1, field.psi2)):
        if math.isinf(lam):
            if np.ptp(psi) != 0:
                raise ContractViolationError(
                    "infinite penalty weight on a field that varies across subregions")
            lam = 0.0
        lambdas.append(lam)
    return PenaltySpec(lambdas[0], lambdas[1], spec.q)


def penalized_loglik(
    panel: MaximaPanel,
    pairs: PairSet,
    sites: SiteSet,
    partition: Partition,
    field: DependenceField,
    spec: PenaltySpec,
) -> float:
    pl = pairwise_loglik(panel, pairs, sites, partition, field)
    return pl - fused_penalty(field, partition.adjacency, resolve_penalty(field, spec))


def smoothed_penalty(field: DependenceField, adjacency, spec: PenaltySpec) -> tuple[float, np.ndarray]:
    """Fused penalty with |x| ~ sqrt(x^2 + eps) for q = 1, and its gradient in (psi1, psi2).

    Infinite weights contribute nothing: their coordinate is constant by construction.
    """
    R = field.partition.R
    grad = np.zeros(2 * R)
    edges = _edge_index(adjacency)
    if edges.shape[0] == 0:
        return 0.0, grad
    value = 0.0
    for k, (lam, psi) in enumerate(zip(spec.lambdas, (field.psi1, field.psi2))):
        if lam == 0 or math.isinf(lam):
            continue
        diff = psi[edges[:, 0]] - psi[edges[:, 1]]
        if spec.q == 1:
            root = np.sqrt(diff**2 + L1_SMOOTHING)
            value += lam * root.sum()
            slope = lam * diff / root
        else:
            value += lam * np.sum(diff**2)
            slope = 2.0 * lam * diff
        np.add.at(grad, k * R + edges[:, 0], slope)
        np.add.at(grad, k * R + edges[:, 1], -slope)
    return float(value), grad


def sandwich(
    panel: MaximaPanel,
    pairs: PairSet,
    sites: SiteSet,
    partition: Partition,
    field_hat: DependenceField,
    spec: PenaltySpec | None = None,
) -> SandwichInfo:
    """J from the numerical Hessian of the PL, K from the spread of per-replicate scores.

    Parameters shared through an infinite penalty weight count once.
    """
    data = PairwiseData(panel, pairs, sites, partition)
    layout = FieldLayout(partition, spec.shared() if spec is not None else (False, False))
    theta = layout.to_theta(field_hat)
    p = layout.p

    H = np.empty((p, p))
    for k in range(p):
        step = np.zeros(p)
        step[k] = HESSIAN_STEP
        g_up = layout.reduce(data.gradient(layout.to_field(theta + step)))
        g_down = layout.reduce(data.gradient(layout.to_field(theta - step)))
        H[:, k] = (g_up - g_down) / (2.0 * HESSIAN_STEP)
    J = -(H + H.T) / 2.0

    U = data.time_scores(layout.to_field(theta)) @ layout.M
    K = data.T * np.atleast_2d(np.cov(U, rowvar=False))
    K = (K + K.T) / 2.0

    flag = None
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > ILL_CONDITIONED:
        flag = "J ill-conditioned (condition number {:.3g}); pseudo-inverse used".format(cond)
        J_inv = np.linalg.pinv(J)
    else:
        J_inv = np.linalg.inv(J)
    trace = float(np.trace(J_inv @ K))
    covariance = J_inv @ K @ J_inv
    std_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    return SandwichInfo(J, K, trace, std_errors, flag)


def clic_cbic(pl_at_opt: float, info: SandwichInfo, T: int) -> tuple[float, float]:
    clic = -2.0 * pl_at_opt + 2.0 * info.trace_JinvK
    cbic = -2.0 * pl_at_opt + math.log(T) * info.trace_JinvK
    return clic, cbic


def _edge_index(adjacency) -> np.ndarray:
    edges = sorted((min(a, b), max(a, b)) for a, b in adjacency)
    return np.asarray(edges, dtype=int).reshape(-1, 2) - 1
