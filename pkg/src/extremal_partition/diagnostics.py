"""Marginal standardization, F-madogram extremal coefficients and fit-assessment summaries."""

from __future__ import annotations

import math

import click
import numpy as np
import pandas as pd
from natsort import natsorted
from scipy import stats
from scipy.optimize import minimize
from scipy.special import gamma as gamma_fn

from extremal_partition.dependence import extremal_coefficient, pair_gamma
from extremal_partition.errors import DataError, InvalidArgumentError
from extremal_partition.models import (
    DependenceField,
    ExtremalCoefficientEstimate,
    GEVParams,
    MaximaPanel,
    SiteSet,
)

MIN_RANK_T = 10
MIN_GEV_T = 20
XI_BOUND = 0.5
GUMBEL_XI = 1e-6
EULER_GAMMA = 0.5772156649015329
MADOGRAM_CHUNK = 4096  # pairs per vectorized block
TOTAL = "Total"


def empirical_cdf(values: np.ndarray) -> np.ndarray:
    """Column-wise rank/(T+1) with average ranks for ties."""
    T = values.shape[0]
    return stats.rankdata(values, method="average", axis=0) / (T + 1.0)


def rank_to_frechet(panel: MaximaPanel) -> MaximaPanel:
    """Unit Frechet margins from per-site ranks: z = -1/log(rank/(T+1))."""
    if panel.T < MIN_RANK_T:
        raise DataError("rank standardization needs at least {} time points, got {}".format(
            MIN_RANK_T, panel.T))
    constant = np.flatnonzero(np.ptp(panel.values, axis=0) == 0)
    if constant.size:
        raise DataError("site {} has a constant series".format(panel.sites.ids[constant[0]]))
    u = empirical_cdf(panel.values)
    return MaximaPanel(-1.0 / np.log(u), "unit_frechet", panel.sites)


def gev_pwm(series) -> GEVParams:
    """GEV estimates from probability-weighted moments (Hosking's approximation)."""
    x = np.sort(np.asarray(series, dtype=float))
    n = x.size
    j = np.arange(n, dtype=float)
    b0 = x.mean()
    b1 = np.sum(j / (n - 1) * x) / n
    b2 = np.sum(j * (j - 1) / ((n - 1) * (n - 2)) * x) / n
    l1, l2, l3 = b0, 2 * b1 - b0, 6 * b2 - 6 * b1 + b0
    if not l2 > 0:
        raise DataError("series has no spread")
    c = 2.0 / (3.0 + l3 / l2) - math.log(2) / math.log(3)
    k = 7.8590 * c + 2.9554 * c ** 2
    if abs(k) < GUMBEL_XI:
        scale = l2 / math.log(2)
        return GEVParams(l1 - EULER_GAMMA * scale, scale, 0.0)
    scale = l2 * k / ((1 - 2 ** (-k)) * gamma_fn(1 + k))
    mu = l1 - scale * (1 - gamma_fn(1 + k)) / k
    return GEVParams(float(mu), float(scale), float(np.clip(-k, -XI_BOUND, XI_BOUND)))


def gev_negloglik(theta, x) -> float:
    mu, log_scale, xi = theta
    scale = math.exp(log_scale)
    t = (x - mu) / scale
    if abs(xi) < GUMBEL_XI:
        return float(x.size * log_scale + np.sum(t) + np.sum(np.exp(-t)))
    y = 1 + xi * t
    if np.any(y <= 0):
        return math.inf
    log_y = np.log(y)
    return float(x.size * log_scale + (1 + 1 / xi) * np.sum(log_y) + np.sum(np.exp(-log_y / xi)))


def fit_gev_site(series) -> GEVParams:
    """Maximum likelihood GEV fit with the shape kept in [-0.5, 0.5].

    The series is standardized before optimizing so estimates are location and scale
    equivariant. Falls back to the PWM estimates, flagged, when the optimizer fails.
    """
    x = np.asarray(series, dtype=float)
    if x.size < MIN_GEV_T:
        raise DataError("GEV fit needs at least {} maxima, got {}".format(MIN_GEV_T, x.size))
    if not np.all(np.isfinite(x)):
        raise DataError("GEV fit got non-finite maxima")
    centre, spread = float(np.mean(x)), float(np.std(x))
    if spread == 0:
        raise DataError("GEV fit got a constant series")
    y = (x - centre) / spread

    pwm = gev_pwm(y)
    start = np.array([pwm.mu, math.log(pwm.varsigma), pwm.xi])
    if not math.isfinite(gev_negloglik(start, y)):
        start = np.array([pwm.mu, math.log(pwm.varsigma), 0.0])
    res = minimize(
        gev_negloglik, start, args=(y,), method="Nelder-Mead",
        bounds=[(None, None), (None, None), (-XI_BOUND, XI_BOUND)],
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000},
    )
    if res.success and math.isfinite(res.fun):
        mu, log_scale, xi = res.x
        return GEVParams(centre + spread * float(mu), spread * math.exp(log_scale), float(xi))
    click.echo("Warning: GEV likelihood did not converge, using PWM estimates", err=True)
    return GEVParams(centre + spread * pwm.mu, spread * pwm.varsigma, pwm.xi, fallback=True)


def gev_to_frechet(panel: MaximaPanel, params: list) -> MaximaPanel:
    """z = -1/log F(x) = (1 + xi (x - mu)/varsigma)^(1/xi) per site."""
    if len(params) != panel.D:
        raise InvalidArgumentError("got GEV parameters for {} sites, panel has {}".format(
            len(params), panel.D))
    mu = np.array([p.mu for p in params])
    scale = np.array([p.varsigma for p in params])
    xi = np.array([p.xi for p in params])
    t = (panel.values - mu) / scale
    gumbel = np.abs(xi) < GUMBEL_XI
    y = 1 + np.where(gumbel, 0.0, xi) * t
    if np.any(~gumbel & (y <= 0)):
        time, site = np.argwhere(~gumbel & (y <= 0))[0]
        raise DataError("maximum at time {}, site {} lies outside the fitted GEV support".format(
            time, panel.sites.ids[site]))
    safe_y = np.where(gumbel, 1.0, y)
    safe_xi = np.where(gumbel, 1.0, xi)
    z = np.where(gumbel, np.exp(t), safe_y ** (1.0 / safe_xi))
    return MaximaPanel(z, "unit_frechet", panel.sites)


def ks_distance(panel: MaximaPanel) -> np.ndarray:
    """Per-site Kolmogorov-Smirnov distance of exp(-1/z) to Uniform(0, 1)."""
    _require_frechet(panel)
    u = np.exp(-1.0 / panel.values)
    return np.array([stats.kstest(u[:, k], "uniform").statistic for k in range(panel.D)])


def madogram_theta(nu):
    """theta = (1 + 2 nu)/(1 - 2 nu), truncated to [1, 2]; returns (theta, truncated)."""
    nu = np.asarray(nu, dtype=float)
    raw = (1 + 2 * nu) / (1 - 2 * nu)
    return np.clip(raw, 1.0, 2.0), (raw < 1.0) | (raw > 2.0)


def f_madogram(panel: MaximaPanel, pair: tuple) -> ExtremalCoefficientEstimate:
    _check_madogram(panel)
    i, j = pair
    u = empirical_cdf(panel.values[:, [i, j]])
    nu = 0.5 * float(np.mean(np.abs(u[:, 0] - u[:, 1])))
    theta, truncated = madogram_theta(nu)
    return ExtremalCoefficientEstimate((i, j), float(theta), nu, bool(truncated))


def madogram_table(panel: MaximaPanel, sites: SiteSet, field: DependenceField | None = None,
                   pairs: np.ndarray | None = None) -> pd.DataFrame:
    """Empirical (and, given a field, model) extremal coefficient of every pair.

    Columns: i, j, site_i, site_j, distance, nu, theta_empirical, truncated[, theta_model].
    """
    _check_madogram(panel)
    if pairs is None:
        pairs = np.column_stack(np.triu_indices(panel.D, k=1))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u = empirical_cdf(panel.values)
    nu = np.empty(pairs.shape[0])
    for start in range(0, pairs.shape[0], MADOGRAM_CHUNK):
        block = pairs[start:start + MADOGRAM_CHUNK]
        nu[start:start + block.shape[0]] = 0.5 * np.mean(np.abs(u[:, block[:, 0]] - u[:, block[:, 1]]), axis=0)
    theta, truncated = madogram_theta(nu)
    i, j = pairs[:, 0], pairs[:, 1]
    ids = np.asarray(sites.ids)
    table = pd.DataFrame({
        "i": i,
        "j": j,
        "site_i": ids[i],
        "site_j": ids[j],
        "distance": np.linalg.norm(sites.coords[i] - sites.coords[j], axis=1),
        "nu": nu,
        "theta_empirical": theta,
        "truncated": truncated,
    })
    if field is not None:
        table["theta_model"] = extremal_coefficient(pair_gamma(sites, field, i, j))
    return table


def mad_extremal(panel: MaximaPanel, sites: SiteSet, field_hat: DependenceField,
                 strata=None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Mean absolute difference between model and empirical extremal coefficients.

    Returns (summary, pairs): one summary row per stratum (within-stratum pairs) in natural
    order, then "Total" over all pairs. Strata with fewer than 2 sites are skipped.
    """
    table = madogram_table(panel, sites, field_hat)
    table["abs_diff"] = np.abs(table["theta_model"] - table["theta_empirical"])
    rows = []
    if strata is not None:
        strata = np.asarray([str(s) for s in strata])
        if strata.size != sites.D:
            raise InvalidArgumentError("strata label {} sites, expected {}".format(strata.size, sites.D))
        si, sj = strata[table["i"].to_numpy()], strata[table["j"].to_numpy()]
        table["stratum"] = np.where(si == sj, si, "")
        for label in natsorted(set(strata.tolist())):
            n_sites = int(np.sum(strata == label))
            if n_sites < 2:
                click.echo("Warning: stratum {} has {} site, skipped".format(label, n_sites), err=True)
                continue
            within = table["stratum"] == label
            rows.append({"stratum": label, "n_sites": n_sites, "n_pairs": int(within.sum()),
                         "mad": float(table.loc[within, "abs_diff"].mean())})
    rows.append({"stratum": TOTAL, "n_sites": sites.D, "n_pairs": len(table),
                 "mad": float(table["abs_diff"].mean())})
    return pd.DataFrame(rows, columns=["stratum", "n_sites", "n_pairs", "mad"]), table


def strata_from_values(values, breaks) -> list[str]:
    """Label each site by the interval of ``breaks`` its covariate falls in."""
    values = np.asarray(values, dtype=float)
    breaks = [float(b) for b in breaks]
    if not breaks or any(a >= b for a, b in zip(breaks, breaks[1:])):
        raise InvalidArgumentError("stratum breaks must be non-empty and strictly increasing")
    labels = ["<{:g}".format(breaks[0])]
    labels += ["{:g}-{:g}".format(a, b) for a, b in zip(breaks, breaks[1:])]
    labels.append(">={:g}".format(breaks[-1]))
    return [labels[k] for k in np.searchsorted(breaks, values, side="right")]


def bin_by_distance(table: pd.DataFrame, n_bins: int) -> pd.DataFrame:
    """Mean extremal coefficients per equal-length distance bin over [min, max]."""
    if n_bins < 1:
        raise InvalidArgumentError("need at least one distance bin")
    d = table["distance"].to_numpy()
    edges = np.linspace(d.min(), d.max(), n_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    columns = [c for c in ("theta_model", "theta_empirical") if c in table]
    grouped = table.assign(bin=which).groupby("bin")
    out = grouped[["distance"] + columns].mean()
    out["n_pairs"] = grouped.size()
    out.insert(0, "bin_hi", edges[out.index + 1])
    out.insert(0, "bin_lo", edges[out.index])
    return out.reset_index()


def int_rmse(fitted_surface, true_surface) -> float:
    """sqrt(mean over experiments of the mean squared error over sites)."""
    fitted = np.atleast_2d(np.asarray(fitted_surface, dtype=float))
    truth = np.atleast_2d(np.asarray(true_surface, dtype=float))
    if fitted.shape[-1] != truth.shape[-1] or truth.shape[0] not in (1, fitted.shape[0]):
        raise InvalidArgumentError("surfaces have mismatched shapes {} and {}".format(
            fitted.shape, truth.shape))
    per_experiment = np.mean((fitted - truth) ** 2, axis=1)
    return float(math.sqrt(np.mean(per_experiment)))


def rmse_subregion(estimates, truth) -> np.ndarray:
    """Per-experiment sqrt(mean over subregions of the squared error)."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if estimates.shape[1] != truth.size:
        raise InvalidArgumentError("got {} subregion estimates for {} true values".format(
            estimates.shape[1], truth.size))
    return np.sqrt(np.mean((estimates - truth) ** 2, axis=1))


def _require_frechet(panel: MaximaPanel) -> None:
    if panel.scale != "unit_frechet":
        raise DataError("expected a unit Frechet panel, got scale {!r}".format(panel.scale))


def _check_madogram(panel: MaximaPanel) -> None:
    if panel.T < MIN_RANK_T:
        raise DataError("madogram needs at least {} time points, got {}".format(MIN_RANK_T, panel.T))
