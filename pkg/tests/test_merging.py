"""Tests for penalty tuning, grid refinement, holdout splits and the merging loop."""

import math

import numpy as np
import pytest

from extremal_partition import merging
from extremal_partition.domain import build_grid_partition, single_region
from extremal_partition.errors import DataError, InvalidArgumentError
from extremal_partition.likelihood import all_pairs, sample_pairs_simple
from extremal_partition.merging import (
    INF,
    DataContext,
    TuningResult,
    build_holdout_split,
    close_pairs,
    parameter_distance,
    propose_thresholds,
    select_partition,
    transfer_field,
    tune_lambda,
    update_grid,
)
from extremal_partition.models import (
    DependenceField,
    FitResult,
    GridSpec,
    HoldoutSplit,
    Partition,
    PenaltySpec,
)

BINARY = GridSpec((INF, 0.0), (INF, 0.0))


@pytest.fixture
def chain():
    """Six subregions in a row whose log sills are 1, 2, 3, 4, 5 apart."""
    partition = Partition([1, 2, 3, 4, 5, 6], adjacency={(1, 2), (2, 3), (3, 4), (4, 5), (5, 6)})
    psi1 = np.array([0.0, 1.0, 3.0, 6.0, 10.0, 15.0])
    return DependenceField(psi1, np.zeros(6), partition)


@pytest.fixture
def fake_context(random_panel, grid_sites):
    split = HoldoutSplit(
        validation_sites=np.array([], dtype=int),
        folds=[np.array([0]), np.array([1])],
        train_pairs=[None, None],
        holdout_pairs=[None, None],
    )
    return DataContext(random_panel, grid_sites, split)


def test_update_grid_examples():
    grids = update_grid(PenaltySpec(4.0, INF), PenaltySpec(), GridSpec(merging.DEFAULT_GRID, merging.DEFAULT_GRID))
    assert grids.grid1 == (INF, 16.0, 8.0, 4.0, 2.0, 1.0, 0.0)
    assert grids.grid2 == merging.DEFAULT_GRID

    previous = GridSpec((INF, 1.0, 0.5, 0.25, 0.0), (INF, 0.0))
    grids = update_grid(PenaltySpec(0.0, 0.0), PenaltySpec(), previous)
    assert grids.grid1 == (INF, 0.25, 0.125, 0.0)
    assert grids.grid2 == (INF, 0.0)


def test_parameter_distance():
    partition = Partition([1, 2], adjacency={(1, 2)})
    field = DependenceField(np.array([0.0, 3.0]), np.array([0.0, 4.0]), partition)
    assert parameter_distance(field, 1, 2) == pytest.approx(5.0)
    with pytest.raises(InvalidArgumentError):
        parameter_distance(field, 1, 1)
    with pytest.raises(InvalidArgumentError):
        parameter_distance(field, 1, 3)


def test_propose_thresholds_quantiles(chain):
    thresholds = propose_thresholds(chain, chain.partition.adjacency, H=5)
    assert thresholds == pytest.approx((13 / 3, 11 / 3, 3.0, 7 / 3, 5 / 3))
    assert propose_thresholds(chain, chain.partition.adjacency, H=1) == pytest.approx((3.0,))


def test_propose_thresholds_drops_ties():
    partition = Partition([1, 2, 3], adjacency={(1, 2), (2, 3)})
    field = DependenceField(np.array([0.0, 1.0, 2.0]), np.zeros(3), partition)
    assert propose_thresholds(field, partition.adjacency, H=4) == pytest.approx((1.0,))
    with pytest.raises(InvalidArgumentError):
        propose_thresholds(field, frozenset(), H=4)


def test_transfer_field(quadrants, grid_sites):
    field = DependenceField.from_values(quadrants, [0.5, 2, 2, 5], 0.2)
    same = transfer_field(field, quadrants)
    assert np.allclose(same.psi1, field.psi1)
    whole = transfer_field(field, single_region(grid_sites))
    assert whole.psi1[0] == pytest.approx(np.mean(np.log([0.5, 2, 2, 5])))
    assert whole.phi[0] == pytest.approx(0.2)


def test_holdout_split_invariants(grid_sites, quadrants):
    pairs = all_pairs(grid_sites.D)
    split = build_holdout_split(grid_sites, quadrants, pairs, n_folds=5, seed=3)
    assert split.validation_sites.size == 5
    assert len(split.folds) == 5
    seen = np.concatenate(split.folds)
    assert np.unique(seen).size == seen.size
    assert not np.intersect1d(seen, split.validation_sites).size
    assert np.unique(np.concatenate([seen, split.validation_sites])).size == grid_sites.D
    for k, fold in enumerate(split.folds):
        # every base subregion keeps a holdout site
        assert set(quadrants.labels[fold]) == {1, 2, 3, 4}
        train, hold = split.train_pairs[k], split.holdout_pairs[k]
        banned = np.concatenate([fold, split.validation_sites])
        assert not np.any(np.isin(train.pairs, banned))
        assert np.all(np.isin(hold.i, fold) | np.isin(hold.j, fold))
        assert not np.any(np.isin(hold.pairs, split.validation_sites))
        assert len(train) + len(hold) == len(split.fit_pairs)
    assert len(split.fit_pairs) + len(split.validation_pairs) == len(pairs)


def test_holdout_split_is_seeded(grid_sites, quadrants):
    pairs = all_pairs(grid_sites.D)
    a = build_holdout_split(grid_sites, quadrants, pairs, seed=1)
    b = build_holdout_split(grid_sites, quadrants, pairs, seed=1)
    assert np.array_equal(a.validation_sites, b.validation_sites)
    assert all(np.array_equal(x, y) for x, y in zip(a.folds, b.folds))


def test_single_holdout_split(grid_sites, quadrants):
    split = build_holdout_split(grid_sites, quadrants, all_pairs(grid_sites.D), single_holdout=True, seed=2)
    assert len(split.folds) == 1
    assert split.folds[0].size == 5
    assert set(quadrants.labels[split.folds[0]]) == {1, 2, 3, 4}


def test_holdout_split_rejects_small_subregions(grid_sites):
    cells = build_grid_partition(grid_sites, 6, 6)
    with pytest.raises(DataError, match="fewer than 5 holdout folds"):
        build_holdout_split(grid_sites, cells, all_pairs(grid_sites.D), n_folds=5)


def test_tune_lambda_walks_to_best_neighbour(monkeypatch, fake_context, quadrants):
    scores = {(INF, INF): 0.0, (0.0, INF): 5.0, (INF, 0.0): 3.0, (0.0, 0.0): 4.0}

    def fake_fit(panel, pairs, sites, partition, spec, init=None, starts=1, seed=0):
        field = DependenceField.from_values(partition, 1.0, 0.2)
        return FitResult(field, 0.0, 0.0, True, 1, penalty=spec)

    def fake_scores(ctx, fold, partition, result):
        value = scores[result.penalty.lambdas]
        return value, value

    monkeypatch.setattr(merging, "fit", fake_fit)
    monkeypatch.setattr(merging, "holdout_scores", fake_scores)
    result = tune_lambda(quadrants, BINARY, PenaltySpec(INF, INF), fake_context)
    assert result.penalty.lambdas == (0.0, INF)
    assert result.holdout_ppl == 5.0
    assert len(result.fold_fits) == 2
    assert result.n_fits == 8


def fake_tuner(truth: DependenceField, score):
    def _tune(partition, grids, start, ctx, init=None):
        field = transfer_field(truth, partition)
        fitted = FitResult(field, 0.0, 0.0, True, 1, penalty=PenaltySpec(1.0, 1.0))
        return TuningResult(PenaltySpec(1.0, 1.0), fitted, score(partition), score(partition), field)

    return _tune


def test_merging_improves_holdout_at_every_step(monkeypatch, quadrants):
    truth = DependenceField.from_values(quadrants, [0.5, 2, 2, 5], [0.1, 0.2, 0.2, 0.3])
    monkeypatch.setattr(merging, "tune_lambda", fake_tuner(truth, lambda p: -float(p.R)))
    ctx = DataContext(None, None, None)
    trace = select_partition(quadrants, BINARY, ctx)
    assert len(trace.steps) > 1
    assert trace.steps[0].partition is quadrants
    ppls = [step.holdout_ppl for step in trace.steps]
    assert all(b > a for a, b in zip(ppls, ppls[1:]))
    for coarse, fine in zip(trace.steps[1:], trace.steps):
        # each merged partition is a union of the previous subregions
        for r in range(1, fine.partition.R + 1):
            assert np.unique(coarse.partition.labels[fine.partition.labels == r]).size == 1
        assert coarse.accepted_threshold in coarse.thresholds_tried


def test_merging_stops_without_improvement(monkeypatch, quadrants):
    truth = DependenceField.from_values(quadrants, [0.5, 2, 2, 5], 0.2)
    monkeypatch.setattr(merging, "tune_lambda", fake_tuner(truth, lambda p: float(p.R)))
    trace = select_partition(quadrants, BINARY, DataContext(None, None, None))
    assert len(trace.steps) == 1
    assert trace.final_partition is quadrants


def test_merging_single_region(monkeypatch, grid_sites):
    base = single_region(grid_sites)
    truth = DependenceField.from_values(base, 1.0, 0.2)
    monkeypatch.setattr(merging, "tune_lambda", fake_tuner(truth, lambda p: 0.0))
    trace = select_partition(base, BINARY, DataContext(None, None, None))
    assert len(trace.steps) == 1
    assert math.isfinite(trace.final_step.holdout_ppl)


def test_close_pairs():
    distances = {(1, 2): 0.5, (2, 3): 1.0, (3, 4): 2.0}
    assert close_pairs(distances, 1.0) == {(1, 2)}
    assert close_pairs(distances, 0.5) == {(1, 2)}
    assert close_pairs(distances, 0.4) == set()
    assert close_pairs({(1, 2): 0.0, (2, 3): 0.0}, 0.0) == {(1, 2), (2, 3)}


def test_identical_neighbours_are_merged(monkeypatch, quadrants):
    truth = DependenceField.from_values(quadrants, 2.0, 0.2)
    monkeypatch.setattr(merging, "tune_lambda", fake_tuner(truth, lambda p: -float(p.R)))
    trace = select_partition(quadrants, BINARY, DataContext(None, None, None))
    assert trace.steps[1].thresholds_tried == (0.0,)
    assert trace.final_partition.R == 1


@pytest.mark.slow
def test_tuning_keeps_large_weights_on_stationary_data(grid_sites, quadrants, make_panel):
    grid = (INF, 4.0, 1.0, 0.0)
    kept = 0
    for seed in range(10):
        panel = make_panel(grid_sites, T=60, m_star=1000, seed=300 + seed)
        pairs = sample_pairs_simple(grid_sites.D, 0.5, seed=seed)
        split = build_holdout_split(grid_sites, quadrants, pairs, n_folds=3, seed=seed)
        ctx = DataContext(panel, grid_sites, split, seed=seed)
        result = tune_lambda(quadrants, GridSpec(grid, grid), PenaltySpec(INF, INF), ctx)
        if result.penalty.lambda1 in grid[:2]:
            kept += 1
    assert kept >= 7
