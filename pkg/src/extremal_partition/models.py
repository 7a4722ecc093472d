from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from extremal_partition.errors import DataError, InvalidArgumentError

Scale = Literal["raw", "unit_frechet"]
PairScheme = Literal["all", "simple", "stratified"]


@dataclass(eq=False)
class SiteSet:
    """Planar coordinates and identifiers of the observation locations."""

    coords: np.ndarray  # shape (D, 2)
    ids: tuple

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.ids = tuple(str(i) for i in self.ids)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DataError("site coordinates must be a D x 2 matrix")
        if len(self.ids) != self.coords.shape[0]:
            raise DataError("got {} site ids for {} coordinates".format(
                len(self.ids), self.coords.shape[0]))
        if self.coords.shape[0] < 2:
            raise DataError("at least 2 sites are required")
        if not np.all(np.isfinite(self.coords)):
            raise DataError("site coordinates must be finite")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("site ids must be unique")
        if np.unique(self.coords, axis=0).shape[0] != self.coords.shape[0]:
            raise DataError("two or more sites share identical coordinates")

    @property
    def D(self) -> int:
        return self.coords.shape[0]

    def subset(self, index) -> SiteSet:
        index = np.asarray(index)
        return SiteSet(self.coords[index], tuple(self.ids[k] for k in index))


@dataclass(eq=False)
class Partition:
    """Site -> subregion labeling (ids 1..R) with the subregion adjacency graph."""

    labels: np.ndarray
    adjacency: frozenset = frozenset()  # {(r1, r2)} with r1 < r2
    converged: bool = True  # False when the clustering hit its iteration cap

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise InvalidArgumentError("partition labels must be a non-empty vector")
        R = int(self.labels.max())
        present = np.unique(self.labels)
        if present[0] < 1 or present.size != R:
            raise InvalidArgumentError(
                "partition labels must cover 1..R without gaps, got {}".format(present.tolist())
            )
        pairs = set()
        for r1, r2 in self.adjacency:
            r1, r2 = int(r1), int(r2)
            if r1 == r2 or not (1 <= r1 <= R and 1 <= r2 <= R):
                raise InvalidArgumentError("invalid adjacency pair ({}, {})".format(r1, r2))
            pairs.add((min(r1, r2), max(r1, r2)))
        self.adjacency = frozenset(pairs)

    @property
    def R(self) -> int:
        return int(self.labels.max())

    @property
    def D(self) -> int:
        return self.labels.size

    @property
    def index(self) -> np.ndarray:
        """Zero-based region index of every site."""
        return self.labels - 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.index, minlength=self.R)

    def sorted_adjacency(self) -> list[tuple[int, int]]:
        return sorted(self.adjacency)


@dataclass(eq=False)
class DependenceField:
    """Per-subregion log-sill (psi1) and log-range (psi2) parameters."""

    psi1: np.ndarray
    psi2: np.ndarray
    partition: Partition

    def __post_init__(self):
        self.psi1 = np.asarray(self.psi1, dtype=float).reshape(-1)
        self.psi2 = np.asarray(self.psi2, dtype=float).reshape(-1)
        R = self.partition.R
        if self.psi1.size != R or self.psi2.size != R:
            raise InvalidArgumentError(
                "field has {}/{} entries for a partition with {} subregions".format(
                    self.psi1.size, self.psi2.size, R)
            )
        if not (np.all(np.isfinite(self.psi1)) and np.all(np.isfinite(self.psi2))):
            raise InvalidArgumentError("field parameters must be finite")

    @classmethod
    def from_values(cls, partition: Partition, sigma2, phi) -> DependenceField:
        R = partition.R
        sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (R,))
        phi = np.broadcast_to(np.asarray(phi, dtype=float), (R,))
        if np.any(sigma2 <= 0) or np.any(phi <= 0):
            raise InvalidArgumentError("sill and range must be positive")
        return cls(np.log(sigma2), np.log(phi), partition)

    @property
    def sigma2(self) -> np.ndarray:
        return np.exp(self.psi1)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.psi2)

    def site_values(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-site (sigma2, phi) surface."""
        idx = self.partition.index
        return self.sigma2[idx], self.phi[idx]

    def is_constant(self) -> bool:
        return bool(np.ptp(self.psi1) == 0 and np.ptp(self.psi2) == 0)


@dataclass(eq=False)
class PairGeometry:
    """Coordinates and per-site parameters of one pair, or of many pairs stacked.

    Every field may carry a leading batch dimension; coordinates then have shape (P, 2).
    """

    site_i: np.ndarray
    site_j: np.ndarray
    sigma2_i: np.ndarray
    sigma2_j: np.ndarray
    phi_i: np.ndarray
    phi_j: np.ndarray

    @classmethod
    def for_pairs(cls, sites: SiteSet, field: DependenceField, i, j) -> PairGeometry:
        sigma2, phi = field.site_values()
        return cls(sites.coords[i], sites.coords[j], sigma2[i], sigma2[j], phi[i], phi[j])


@dataclass
class SimConfig:
    """Truncated spectral simulation settings."""

    m_star: int = 10_000
    n_replicates: int = 100
    seed: int = 0
    jitter: float = 0.0  # added to the correlation diagonal before factorization

    def __post_init__(self):
        if int(self.m_star) < 1:
            raise InvalidArgumentError("m_star must be >= 1")
        if int(self.n_replicates) < 1:
            raise InvalidArgumentError("n_replicates must be >= 1")
        if not (0.0 <= self.jitter <= 1e-4):
            raise InvalidArgumentError("jitter must lie in [0, 1e-4]")


@dataclass(eq=False)
class MaximaPanel:
    """T x D block maxima on a declared marginal scale."""

    values: np.ndarray
    scale: Scale
    sites: SiteSet

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.sites.D:
            raise DataError("panel must be T x {} for this site set, got shape {}".format(
                self.sites.D, self.values.shape))
        if self.scale not in ("raw", "unit_frechet"):
            raise DataError("unknown panel scale {!r}".format(self.scale))
        if not np.all(np.isfinite(self.values)):
            raise DataError("panel contains missing or non-finite values")
        if self.scale == "unit_frechet" and np.any(self.values <= 0):
            t, i = np.argwhere(self.values <= 0)[0]
            raise DataError("unit Frechet panel has a nonpositive value at time {}, site {}".format(
                t, self.sites.ids[i]))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class PairSet:
    """Observation pairs (i < j) used by the pairwise likelihood."""

    pairs: np.ndarray  # shape (P, 2)
    scheme: PairScheme = "all"
    fraction: float = 1.0
    n_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.pairs.shape[0] < 1:
            raise InvalidArgumentError("a pair set needs at least one pair")
        if np.any(self.pairs[:, 0] >= self.pairs[:, 1]) or np.any(self.pairs < 0):
            raise InvalidArgumentError("pairs must satisfy 0 <= i < j")
        if np.unique(self.pairs, axis=0).shape[0] != self.pairs.shape[0]:
            raise InvalidArgumentError("pair set contains duplicates")

    @property
    def i(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def j(self) -> np.ndarray:
        return self.pairs[:, 1]

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def select(self, mask) -> PairSet:
        return PairSet(self.pairs[np.asarray(mask)], self.scheme, self.fraction,
                       self.n_classes, self.seed)


@dataclass(frozen=True)
class PenaltySpec:
    """Fused penalty weights; ``math.inf`` forces equal parameters across subregions."""

    lambda1: float = math.inf
    lambda2: float = math.inf
    q: int = 2

    def __post_init__(self):
        if self.q not in (1, 2):
            raise InvalidArgumentError("penalty exponent q must be 1 or 2")
        for lam in (self.lambda1, self.lambda2):
            if math.isnan(lam) or lam < 0:
                raise InvalidArgumentError("penalty weights must be >= 0 or inf")

    @property
    def lambdas(self) -> tuple[float, float]:
        return (self.lambda1, self.lambda2)

    def shared(self) -> tuple[bool, bool]:
        """Which parameter coordinates are constrained equal across subregions."""
        return (math.isinf(self.lambda1), math.isinf(self.lambda2))


@dataclass(eq=False)
class SandwichInfo:
    J: np.ndarray
    K: np.ndarray
    trace_JinvK: float
    std_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    condition_flag: Optional[str] = None


@dataclass(eq=False)
class FitResult:
    """Outcome of maximizing the (penalized) pairwise log-likelihood."""

    field_hat: DependenceField
    pl_value: float
    ppl_value: float
    converged: bool
    n_evals: int
    penalty: PenaltySpec = PenaltySpec()
    condition_flag: Optional[str] = None


@dataclass(frozen=True)
class GridSpec:
    """Descending penalty grids, each starting at inf and ending at 0."""

    grid1: tuple
    grid2: tuple

    def __post_init__(self):
        for grid in (self.grid1, self.grid2):
            if len(grid) < 2 or not math.isinf(grid[0]) or grid[-1] != 0:
                raise InvalidArgumentError("grids must start with inf and end with 0: {}".format(grid))
            finite = grid[1:]
            if any(a <= b for a, b in zip(finite, finite[1:])) or math.isinf(finite[0]):
                raise InvalidArgumentError("grid must be strictly descending: {}".format(grid))

    def grid(self, k: int) -> tuple:
        return self.grid1 if k == 0 else self.grid2


@dataclass(eq=False)
class MergeStep:
    """One accepted partition of the merging loop (step 0 is the base partition)."""

    partition: Partition
    penalty: PenaltySpec
    holdout_ppl: float
    field_hat: DependenceField
    thresholds_tried: tuple = ()
    accepted_threshold: Optional[float] = None


@dataclass(eq=False)
class MergeTrace:
    steps: list = field(default_factory=list)

    @property
    def final_partition(self) -> Partition:
        return self.steps[-1].partition

    @property
    def final_step(self) -> MergeStep:
        return self.steps[-1]


@dataclass(eq=False)
class HoldoutSplit:
    """Validation sites, holdout folds, and the pair sets restricted to each fold."""

    validation_sites: np.ndarray
    folds: list
    train_pairs: list
    holdout_pairs: list
    validation_pairs: Optional[PairSet] = None
    fit_pairs: Optional[PairSet] = None  # every pair free of validation sites


@dataclass
class GEVParams:
    mu: float
    varsigma: float
    xi: float
    fallback: bool = False  # PWM estimates returned because the MLE failed

    def __post_init__(self):
        if not self.varsigma > 0:
            raise InvalidArgumentError("GEV scale must be positive")


@dataclass
class ExtremalCoefficientEstimate:
    pair: tuple
    theta_hat: float
    nu_hat: float
    truncated: bool = False
