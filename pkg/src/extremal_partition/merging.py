"""Penalty tuning on descending grids and holdout-driven merging of neighbouring subregions."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import click
import numpy as np

from extremal_partition.domain import merge
from extremal_partition.errors import DataError, InvalidArgumentError, NumericFailureError
from extremal_partition.estimator import fit
from extremal_partition.likelihood import (
    PairwiseData,
    all_pairs,
    fused_penalty,
    resolve_penalty,
    sample_pairs_simple,
    sample_pairs_stratified,
)
from extremal_partition.models import (
    DependenceField,
    FitResult,
    GridSpec,
    HoldoutSplit,
    MaximaPanel,
    MergeStep,
    MergeTrace,
    PairSet,
    Partition,
    PenaltySpec,
    SiteSet,
)

INF = math.inf
DEFAULT_GRID = (INF, 32.0, 16.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.0)
DEFAULT_THRESHOLDS = 5


@dataclass
class DataContext:
    """Everything a fit needs besides the partition and the penalty."""

    panel: MaximaPanel
    sites: SiteSet
    split: HoldoutSplit
    q: int = 2
    starts: int = 1
    seed: int = 0
    threads: int = 1


@dataclass
class TuningResult:
    penalty: PenaltySpec
    fit: FitResult  # fit on the first fold's training pairs
    holdout_ppl: float  # averaged over folds
    holdout_pl: float
    field: DependenceField  # fold-averaged estimate
    fold_fits: list = field(default_factory=list)
    n_fits: int = 0


def sample_pairs(sites: SiteSet, scheme: str, fraction: float, n_classes: int, seed: int) -> PairSet:
    if scheme == "all":
        return all_pairs(sites.D)
    if scheme == "simple":
        return sample_pairs_simple(sites.D, fraction, seed)
    if scheme == "stratified":
        return sample_pairs_stratified(sites, fraction, n_classes, seed)
    raise InvalidArgumentError("unknown pair scheme {!r}".format(scheme))


def build_holdout_split(
    sites: SiteSet,
    partition: Partition,
    pairs: PairSet,
    n_folds: int = 5,
    seed: int = 0,
    validation_fraction: float = 0.15,
    holdout_fraction: float = 0.15,
    single_holdout: bool = False,
) -> HoldoutSplit:
    """Validation sites, then holdout folds with at least one site per base subregion.

    With K folds the non-validation sites of every subregion are dealt round-robin; in
    single-holdout mode one set of holdout_fraction * D sites is drawn instead.
    """
    if n_folds < 1:
        raise InvalidArgumentError("need at least one holdout fold")
    K = 1 if single_holdout else n_folds
    rng = np.random.default_rng(seed)
    D = sites.D
    region = partition.index
    remaining = partition.sizes().copy()

    validation = []
    n_valid = int(math.floor(validation_fraction * D + 0.5))
    for s in rng.permutation(D):
        if len(validation) == n_valid:
            break
        if remaining[region[s]] > K:
            validation.append(s)
            remaining[region[s]] -= 1
    validation = np.sort(np.asarray(validation, dtype=int))

    pool = np.setdiff1d(np.arange(D), validation)
    if single_holdout:
        folds = [_single_holdout(pool, region, partition.R, holdout_fraction, D, rng)]
    else:
        folds = _round_robin_folds(pool, region, partition.R, n_folds, rng)

    in_valid = np.isin(pairs.i, validation) | np.isin(pairs.j, validation)
    train, hold = [], []
    for fold in folds:
        touches = np.isin(pairs.i, fold) | np.isin(pairs.j, fold)
        train.append(_select(pairs, ~in_valid & ~touches, "training"))
        hold.append(_select(pairs, ~in_valid & touches, "holdout"))
    return HoldoutSplit(
        validation_sites=validation,
        folds=folds,
        train_pairs=train,
        holdout_pairs=hold,
        validation_pairs=pairs.select(in_valid) if np.any(in_valid) else None,
        fit_pairs=_select(pairs, ~in_valid, "fitting"),
    )


def holdout_scores(ctx: DataContext, fold: int, partition: Partition, result: FitResult) -> tuple[float, float]:
    """(PL, PPL) of a fold's fitted field on that fold's holdout pairs."""
    data = PairwiseData(ctx.panel, ctx.split.holdout_pairs[fold], ctx.sites, partition)
    pl = data.loglik(result.field_hat)
    penalty = resolve_penalty(result.field_hat, result.penalty)
    return pl, pl - fused_penalty(result.field_hat, partition.adjacency, penalty)


def fold_scores(
    ctx: DataContext,
    partition: Partition,
    specs: list,
    warm: list | None = None,
    init: DependenceField | None = None,
) -> list[list]:
    """Fit each penalty on every fold's training pairs and score it on that fold's holdout pairs.

    Returns, per penalty, one (FitResult or None, (holdout PL, holdout PPL)) per fold; a
    failed fit scores -inf. ``warm`` holds a per-fold starting field.
    """
    K = len(ctx.split.folds)
    tasks = [(s, f) for s in range(len(specs)) for f in range(K)]

    def run(task):
        s, f = task
        start = warm[f] if warm is not None else init
        try:
            result = fit(ctx.panel, ctx.split.train_pairs[f], ctx.sites, partition,
                         specs[s], init=start, starts=ctx.starts, seed=ctx.seed)
            return result, holdout_scores(ctx, f, partition, result)
        except NumericFailureError as exc:
            click.echo("Warning: fit at lambda={} failed: {}".format(
                _fmt_lambdas(specs[s]), exc.message), err=True)
            return None, (-INF, -INF)

    with ThreadPoolExecutor(max_workers=max(1, ctx.threads)) as pool:
        outcomes = list(pool.map(run, tasks))
    return [outcomes[s * K:(s + 1) * K] for s in range(len(specs))]


def average_scores(outcomes: list) -> tuple[float, float]:
    """Fold-averaged (holdout PL, holdout PPL)."""
    pl = float(np.mean([s[0] for _, s in outcomes]))
    ppl = float(np.mean([s[1] for _, s in outcomes]))
    return pl, ppl


def tune_lambda(
    partition: Partition,
    grids: GridSpec,
    start: PenaltySpec,
    ctx: DataContext,
    init: DependenceField | None = None,
) -> TuningResult:
    """Greedy walk down the two grids, one coordinate at a time, while holdout PL improves."""
    pos = (_grid_position(grids.grid1, start.lambda1), _grid_position(grids.grid2, start.lambda2))
    cache: dict = {}

    def penalty_at(p):
        return PenaltySpec(grids.grid1[p[0]], grids.grid2[p[1]], ctx.q)

    def evaluate(positions, warm):
        todo = [p for p in positions if p not in cache]
        results = fold_scores(ctx, partition, [penalty_at(p) for p in todo], warm=warm, init=init)
        cache.update(zip(todo, results))

    def scores(p):
        return average_scores(cache[p])

    evaluate([pos], None)
    n_fits = len(ctx.split.folds)
    while True:
        candidates = []
        if pos[0] + 1 < len(grids.grid1):
            candidates.append((pos[0] + 1, pos[1]))
        if pos[1] + 1 < len(grids.grid2):
            candidates.append((pos[0], pos[1] + 1))
        if not candidates:
            break
        warm = [r.field_hat if r is not None else init for r, _ in cache[pos]]
        new = [c for c in candidates if c not in cache]
        evaluate(candidates, warm)
        n_fits += len(new) * len(ctx.split.folds)

        incumbent_pl = scores(pos)[0]
        gains = [(_gain(scores(c)[0], incumbent_pl), c) for c in candidates]
        gain, best = max(gains, key=lambda g: g[0])
        if not gain > 0:
            break
        pos = best

    chunk = cache[pos]
    fits = [r for r, _ in chunk]
    if any(r is None for r in fits):
        raise NumericFailureError("no fold could be fitted at the selected penalty",
                                  penalty_at(pos).lambdas)
    pl, ppl = scores(pos)
    return TuningResult(
        penalty=penalty_at(pos),
        fit=fits[0],
        holdout_ppl=ppl,
        holdout_pl=pl,
        field=_average_fields(fits, partition),
        fold_fits=fits,
        n_fits=n_fits,
    )


def update_grid(lambda_hat: PenaltySpec, previous_start: PenaltySpec, previous_grids: GridSpec) -> GridSpec:
    """Refine each grid geometrically around the selected weight."""
    grids = []
    for lam, previous in zip(lambda_hat.lambdas, (previous_grids.grid1, previous_grids.grid2)):
        if math.isinf(lam):
            grids.append(tuple(previous))
            continue
        if lam == 0:
            positive = [g for g in previous if 0 < g < INF]
            if positive:
                g_min = min(positive)
                grids.append((INF, g_min, g_min / 2.0, 0.0))
            else:
                grids.append((INF, 0.0))
            continue
        values = {4 * lam, 2 * lam, lam, lam / 2.0, lam / 4.0}
        grids.append((INF,) + tuple(sorted(values, reverse=True)) + (0.0,))
    return GridSpec(grids[0], grids[1])


def parameter_distance(field: DependenceField, r1: int, r2: int) -> float:
    """Euclidean distance between two subregions in (log sill, log range)."""
    R = field.partition.R
    if r1 == r2 or not (1 <= r1 <= R and 1 <= r2 <= R):
        raise InvalidArgumentError("need two distinct subregion ids in 1..{}".format(R))
    d1 = field.psi1[r1 - 1] - field.psi1[r2 - 1]
    d2 = field.psi2[r1 - 1] - field.psi2[r2 - 1]
    return float(math.hypot(d1, d2))


def neighbour_distances(field: DependenceField, adjacency) -> dict:
    return {pair: parameter_distance(field, *pair) for pair in sorted(adjacency)}


def propose_thresholds(field: DependenceField, adjacency, H: int = DEFAULT_THRESHOLDS) -> tuple:
    """eta_h = (1 - h/(H+1))-quantile of the neighbour distances, strictly descending."""
    if not adjacency:
        raise InvalidArgumentError("thresholds need at least one pair of neighbouring subregions")
    if H < 1:
        raise InvalidArgumentError("need at least one threshold")
    distances = np.asarray(list(neighbour_distances(field, adjacency).values()))
    levels = [1.0 - h / (H + 1.0) for h in range(1, H + 1)]
    thresholds = []
    for eta in np.quantile(distances, levels):
        if not thresholds or eta < thresholds[-1]:
            thresholds.append(float(eta))
    return tuple(thresholds)


def close_pairs(distances: dict, eta: float) -> set:
    """Neighbour pairs closer than eta.

    A threshold equal to the smallest distance also takes the pairs at that distance, so
    neighbours with identical estimates (all distances zero under a shared field) still merge.
    """
    if not distances:
        return set()
    smallest = min(distances.values())
    return {pair for pair, d in distances.items() if d < eta or d == eta == smallest}


def transfer_field(field: DependenceField, partition: Partition) -> DependenceField:
    """Average the per-site parameters of a field over the subregions of another partition."""
    idx = field.partition.index
    sizes = partition.sizes()
    psi1 = np.bincount(partition.index, weights=field.psi1[idx], minlength=partition.R) / sizes
    psi2 = np.bincount(partition.index, weights=field.psi2[idx], minlength=partition.R) / sizes
    return DependenceField(psi1, psi2, partition)


def select_partition(
    base_partition: Partition,
    initial_grids: GridSpec,
    ctx: DataContext,
    H: int = DEFAULT_THRESHOLDS,
) -> MergeTrace:
    """Tune lambda on the base partition, then merge close neighbours while holdout PPL rises."""
    start = PenaltySpec(INF, INF, ctx.q)
    click.echo("Tuning lambda on the base partition ({} subregions)...".format(base_partition.R))
    tuned = tune_lambda(base_partition, initial_grids, start, ctx)
    trace = MergeTrace([MergeStep(base_partition, tuned.penalty, tuned.holdout_ppl, tuned.field)])
    click.echo("Step 0: R={}, lambda={}, holdout PPL={:.4f}".format(
        base_partition.R, _fmt_lambdas(tuned.penalty), tuned.holdout_ppl))

    grids = initial_grids
    previous_start = start
    partition, incumbent = base_partition, tuned
    while partition.adjacency:
        grids = update_grid(incumbent.penalty, previous_start, grids)
        previous_start = incumbent.penalty
        distances = neighbour_distances(incumbent.field, partition.adjacency)
        thresholds = propose_thresholds(incumbent.field, partition.adjacency, H)

        tried = []
        accepted = None
        for eta in thresholds:
            tried.append(eta)
            pairs = close_pairs(distances, eta)
            if not pairs:
                continue
            candidate = merge(partition, pairs)
            result = tune_lambda(candidate, grids, incumbent.penalty, ctx,
                                 init=transfer_field(incumbent.field, candidate))
            if result.holdout_ppl > incumbent.holdout_ppl:
                accepted = (eta, candidate, result)
                break

        if accepted is None:
            break
        eta, partition, incumbent = accepted
        trace.steps.append(MergeStep(partition, incumbent.penalty, incumbent.holdout_ppl,
                                     incumbent.field, tuple(tried), eta))
        click.echo("Step {}: accepted eta={:.4g}, R={}, lambda={}, holdout PPL={:.4f}".format(
            len(trace.steps) - 1, eta, partition.R, _fmt_lambdas(incumbent.penalty),
            incumbent.holdout_ppl))
    return trace


def _grid_position(grid: tuple, value: float) -> int:
    for k, g in enumerate(grid):
        if g == value:
            return k
    raise InvalidArgumentError("penalty weight {} is not on the grid {}".format(value, grid))


def _average_fields(fits: list, partition: Partition) -> DependenceField:
    psi1 = np.mean([f.field_hat.psi1 for f in fits], axis=0)
    psi2 = np.mean([f.field_hat.psi2 for f in fits], axis=0)
    return DependenceField(psi1, psi2, partition)


def _round_robin_folds(pool, region, R, K, rng) -> list:
    folds = [[] for _ in range(K)]
    offset = 0
    for r in range(R):
        members = rng.permutation(pool[region[pool] == r])
        if members.size < K:
            raise DataError(
                "subregion {} has {} non-validation sites, fewer than {} holdout folds".format(
                    r + 1, members.size, K))
        for k, s in enumerate(members):
            folds[(offset + k) % K].append(s)
        offset = (offset + members.size) % K
    return [np.sort(np.asarray(f, dtype=int)) for f in folds]


def _single_holdout(pool, region, R, fraction, D, rng) -> np.ndarray:
    chosen = []
    for r in range(R):
        members = pool[region[pool] == r]
        if members.size < 2:
            raise DataError("subregion {} cannot give up a holdout site".format(r + 1))
        chosen.append(rng.choice(members))
    target = int(math.floor(fraction * D + 0.5))
    rest = rng.permutation(np.setdiff1d(pool, chosen))
    extra = max(0, target - len(chosen))
    return np.sort(np.concatenate([np.asarray(chosen, dtype=int), rest[:extra]]))


def _select(pairs: PairSet, mask, what: str) -> PairSet:
    if not np.any(mask):
        raise DataError("no {} pairs left; raise the pair fraction".format(what))
    return pairs.select(mask)


def _fmt_lambdas(spec: PenaltySpec) -> str:
    return "({}, {})".format(*("inf" if math.isinf(x) else "{:g}".format(x) for x in spec.lambdas))


def _gain(candidate: float, incumbent: float) -> float:
    if math.isinf(candidate) and candidate < 0:
        return -INF
    if math.isinf(incumbent) and incumbent < 0:
        return INF
    return candidate - incumbent
