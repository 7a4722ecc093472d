"""Tests for marginal standardization, madogram estimates and fit summaries."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from extremal_partition.diagnostics import (
    TOTAL,
    bin_by_distance,
    f_madogram,
    fit_gev_site,
    gev_pwm,
    gev_to_frechet,
    int_rmse,
    ks_distance,
    mad_extremal,
    madogram_table,
    madogram_theta,
    rank_to_frechet,
    rmse_subregion,
    strata_from_values,
)
from extremal_partition.dependence import extremal_coefficient, pair_gamma
from extremal_partition.domain import regular_grid_sites, single_region
from extremal_partition.errors import DataError, InvalidArgumentError
from extremal_partition.models import DependenceField, GEVParams, MaximaPanel, SimConfig, SiteSet
from extremal_partition.simulate import sample_br


@pytest.fixture
def gev_sample():
    # scipy's shape c is minus the GEV shape
    return stats.genextreme.rvs(-0.1, loc=10.0, scale=2.0, size=500, random_state=4)


def test_rank_to_frechet(grid_sites):
    rng = np.random.default_rng(0)
    raw = MaximaPanel(rng.normal(size=(30, grid_sites.D)), "raw", grid_sites)
    z = rank_to_frechet(raw)
    assert z.scale == "unit_frechet"
    assert z.values.max(axis=0) == pytest.approx(np.full(grid_sites.D, -1 / math.log(30 / 31)))
    # any increasing transform of a series gives the same ranks
    transformed = MaximaPanel(np.exp(raw.values), "raw", grid_sites)
    assert np.array_equal(rank_to_frechet(transformed).values, z.values)


def test_rank_to_frechet_errors(grid_sites):
    with pytest.raises(DataError, match="at least 10"):
        rank_to_frechet(MaximaPanel(np.arange(9 * grid_sites.D).reshape(9, -1), "raw", grid_sites))
    values = np.random.default_rng(1).normal(size=(12, grid_sites.D))
    values[:, 2] = 3.0
    with pytest.raises(DataError, match="s03"):
        rank_to_frechet(MaximaPanel(values, "raw", grid_sites))


def test_gev_fit_recovers_parameters(gev_sample):
    params = fit_gev_site(gev_sample)
    assert not params.fallback
    assert params.mu == pytest.approx(10.0, abs=0.4)
    assert params.varsigma == pytest.approx(2.0, abs=0.3)
    assert params.xi == pytest.approx(0.1, abs=0.1)
    pwm = gev_pwm(gev_sample)
    assert pwm.mu == pytest.approx(10.0, abs=0.5)


def test_gev_fit_is_shift_and_scale_equivariant(gev_sample):
    base = fit_gev_site(gev_sample)
    moved = fit_gev_site(3.0 * gev_sample + 100.0)
    assert moved.mu == pytest.approx(3.0 * base.mu + 100.0, rel=1e-6)
    assert moved.varsigma == pytest.approx(3.0 * base.varsigma, rel=1e-6)
    assert moved.xi == pytest.approx(base.xi, abs=1e-6)


def test_gev_fit_errors():
    with pytest.raises(DataError, match="at least 20"):
        fit_gev_site(np.arange(19.0))
    with pytest.raises(DataError, match="constant"):
        fit_gev_site(np.ones(30))
    with pytest.raises(DataError, match="non-finite"):
        fit_gev_site(np.append(np.arange(25.0), np.nan))


def test_gev_to_frechet():
    sites = SiteSet([[0.0, 0.0], [1.0, 0.0]], ("a", "b"))
    x = np.tile(np.linspace(-2, 3, 12).reshape(-1, 1), (1, 2))
    panel = MaximaPanel(x, "raw", sites)
    gumbel = gev_to_frechet(panel, [GEVParams(0.0, 1.0, 0.0)] * 2)
    assert np.allclose(gumbel.values, np.exp(x))
    frechet = gev_to_frechet(panel, [GEVParams(0.0, 1.0, 0.2)] * 2)
    assert np.allclose(frechet.values, (1 + 0.2 * x) ** 5)
    with pytest.raises(DataError, match="outside the fitted GEV support"):
        gev_to_frechet(panel, [GEVParams(0.0, 1.0, -0.5)] * 2)
    with pytest.raises(InvalidArgumentError):
        gev_to_frechet(panel, [])


def test_ks_distance(grid_sites, random_panel):
    d = ks_distance(random_panel)
    assert d.shape == (grid_sites.D,)
    assert np.all((d > 0) & (d < 0.35))
    with pytest.raises(DataError):
        ks_distance(MaximaPanel(random_panel.values, "raw", grid_sites))


def test_madogram_theta_truncates():
    theta, truncated = madogram_theta(np.array([0.0, 0.1, 0.25]))
    assert theta == pytest.approx([1.0, 1.5, 2.0])
    assert truncated.tolist() == [False, False, True]


def test_madogram_extremes():
    sites = regular_grid_sites(2)
    rng = np.random.default_rng(2)
    column = rng.normal(size=2000)
    values = np.column_stack([column, column, rng.normal(size=2000), rng.normal(size=2000)])
    panel = MaximaPanel(values, "raw", sites)
    assert f_madogram(panel, (0, 1)).theta_hat == pytest.approx(1.0)
    assert f_madogram(panel, (2, 3)).theta_hat == pytest.approx(2.0, abs=0.1)


def test_madogram_table_columns(grid_sites, random_panel):
    field = DependenceField.from_values(single_region(grid_sites), 1.0, 0.2)
    table = madogram_table(random_panel, grid_sites, field)
    assert len(table) == grid_sites.D * (grid_sites.D - 1) // 2
    assert list(table.columns) == [
        "i", "j", "site_i", "site_j", "distance", "nu", "theta_empirical", "truncated", "theta_model"]
    assert table["theta_model"].between(1.0, 2.0).all()
    single = f_madogram(random_panel, (0, 5))
    row = table[(table["i"] == 0) & (table["j"] == 5)].iloc[0]
    assert row["nu"] == pytest.approx(single.nu_hat)


def test_mad_extremal_strata(grid_sites, random_panel):
    field = DependenceField.from_values(single_region(grid_sites), 1.0, 0.2)
    strata = ["low"] * 20 + ["high"] * 15 + ["alone"]
    summary, pairs = mad_extremal(random_panel, grid_sites, field, strata)
    assert summary["stratum"].tolist() == ["high", "low", TOTAL]
    total = summary[summary["stratum"] == TOTAL].iloc[0]
    assert total["mad"] == pytest.approx(pairs["abs_diff"].mean())
    assert total["n_pairs"] == len(pairs)
    low = summary[summary["stratum"] == "low"].iloc[0]
    assert low["n_pairs"] == 190
    with pytest.raises(InvalidArgumentError):
        mad_extremal(random_panel, grid_sites, field, ["a"])


def test_strata_from_values():
    labels = strata_from_values([50, 100, 250, 900], [100, 500])
    assert labels == ["<100", "100-500", "100-500", ">=500"]
    with pytest.raises(InvalidArgumentError):
        strata_from_values([1.0], [5, 2])


def test_bin_by_distance_counts():
    table = pd.DataFrame({"distance": [0.0, 0.1, 0.5, 0.9, 1.0],
                          "theta_empirical": [1.0, 1.2, 1.5, 1.8, 2.0]})
    bins = bin_by_distance(table, 2)
    assert bins["n_pairs"].sum() == 5
    assert bins["n_pairs"].tolist() == [2, 3]
    assert bins["bin_lo"].tolist() == [0.0, 0.5]
    assert bins["theta_empirical"].iloc[0] == pytest.approx(1.1)


def test_int_rmse():
    assert int_rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert int_rmse([[1.0, 1.0], [3.0, 3.0]], [2.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        int_rmse([1.0, 2.0], [1.0, 2.0, 3.0])


def test_rmse_subregion():
    errors = rmse_subregion([1, 2, 2, 4], [0.5, 2, 2, 5])
    assert errors == pytest.approx([0.559017], abs=1e-6)
    with pytest.raises(InvalidArgumentError):
        rmse_subregion([1, 2], [1, 2, 3])


def test_f_madogram_on_simulated_pair():
    # sill 1 and exp(-h / sqrt(phi)) = 1/2 give gamma = 0.5
    phi = 0.04
    h = math.sqrt(phi) * math.log(2.0)
    sites = SiteSet([[0.0, 0.0], [h, 0.0]], ("a", "b"))
    field = DependenceField.from_values(single_region(sites), 1.0, phi)
    assert pair_gamma(sites, field, np.array([0]), np.array([1]))[0] == pytest.approx(0.5)
    panel = sample_br(sites, field, SimConfig(m_star=2000, n_replicates=2000, seed=31))
    estimate = f_madogram(panel, (0, 1))
    assert estimate.theta_hat == pytest.approx(extremal_coefficient(0.5), abs=0.07)
    assert estimate.theta_hat == pytest.approx(1.38292, abs=0.07)


@pytest.mark.slow
def test_binned_madogram_tracks_model():
    sites = regular_grid_sites(8)
    field = DependenceField.from_values(single_region(sites), 1.0, 0.2)
    panel = sample_br(sites, field, SimConfig(m_star=10_000, n_replicates=2000, seed=32), threads=4)
    bins = bin_by_distance(madogram_table(panel, sites, field), 10)
    populated = bins[bins["n_pairs"] >= 30]
    assert len(populated) >= 5
    gap = (populated["theta_empirical"] - populated["theta_model"]).abs()
    assert gap.max() <= 0.05
