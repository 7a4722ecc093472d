"""Orchestration behind the simulate / fit / merge / diagnose commands."""

from __future__ import annotations

import math
import os

import click
import numpy as np
import pandas as pd

from extremal_partition import datafiles
from extremal_partition.diagnostics import (
    bin_by_distance,
    fit_gev_site,
    gev_to_frechet,
    int_rmse,
    ks_distance,
    mad_extremal,
    rank_to_frechet,
    rmse_subregion,
    strata_from_values,
)
from extremal_partition.domain import (
    build_grid_partition,
    build_kmeans_partition,
    local_rand_indices,
    rand_index,
    regular_grid_sites,
    single_region,
)
from extremal_partition.errors import ConfigError, DataError
from extremal_partition.estimator import fit, fit_stationary
from extremal_partition.likelihood import clic_cbic, pairwise_loglik, sandwich
from extremal_partition.manifest import RunConfig, write_run_manifest
from extremal_partition.merging import (
    DEFAULT_GRID,
    DEFAULT_THRESHOLDS,
    DataContext,
    average_scores,
    build_holdout_split,
    fold_scores,
    select_partition,
    sample_pairs,
)
from extremal_partition.models import (
    DependenceField,
    FitResult,
    GridSpec,
    MaximaPanel,
    PairSet,
    Partition,
    PenaltySpec,
    SimConfig,
    SiteSet,
)
from extremal_partition.simulate import sample_br


def load_sites(config: RunConfig) -> SiteSet:
    spec = config.raw("sites")
    if isinstance(spec, dict):
        return regular_grid_sites(config.integer("sites.grid", minimum=2))
    return datafiles.read_sites(config.path("sites"))


def build_partition(config: RunConfig, key: str, sites: SiteSet, seed: int) -> Partition:
    """Partition from a config block: kmeans (regions), grid (nx, ny) or file (path)."""
    if not config.has(key):
        return single_region(sites)
    method = config.choice(key + ".method", ("kmeans", "grid", "file", "single"))
    if method == "kmeans":
        return build_kmeans_partition(sites, config.integer(key + ".regions", minimum=1), seed)
    if method == "grid":
        return build_grid_partition(sites, config.integer(key + ".nx", minimum=1),
                                    config.integer(key + ".ny", minimum=1))
    if method == "file":
        return datafiles.read_partition(config.path(key + ".path"), sites)
    return single_region(sites)


def load_panel(config: RunConfig, sites: SiteSet, out_dir: str | None = None) -> tuple[MaximaPanel, list]:
    """Read the panel and bring it to unit Frechet margins; returns (panel, files written)."""
    scale = config.choice("scale", ("raw", "unit_frechet")) if config.has("scale") else None
    panel = datafiles.read_panel(config.path("panel"), sites, scale)
    if panel.scale == "unit_frechet":
        return panel, []
    margins = config.choice("margins", ("rank", "gev"), default="rank")
    if margins == "rank":
        click.echo("Standardizing margins by ranks...")
        return rank_to_frechet(panel), []

    click.echo("Fitting GEV margins at {} sites...".format(panel.D))
    params = [fit_gev_site(panel.values[:, k]) for k in range(panel.D)]
    files = []
    if out_dir is not None:
        table = pd.DataFrame({
            "id": sites.ids,
            "mu": [p.mu for p in params],
            "varsigma": [p.varsigma for p in params],
            "xi": [p.xi for p in params],
            "fallback": [p.fallback for p in params],
        })
        path = os.path.join(out_dir, "gev.csv")
        datafiles.write_table(path, table)
        files.append(path)
    return gev_to_frechet(panel, params), files


def load_pairs(config: RunConfig, sites: SiteSet, seed: int) -> PairSet:
    scheme = config.choice("pairs.scheme", ("all", "simple", "stratified"), default="all")
    fraction = config.number("pairs.fraction", default=1.0, low=0.0, high=1.0)
    classes = config.integer("pairs.classes", default=10, minimum=1)
    return sample_pairs(sites, scheme, fraction, classes, seed)


def load_penalty(config: RunConfig) -> PenaltySpec:
    return PenaltySpec(
        config.number("penalty.lambda1", default=math.inf, low=0.0, allow_inf=True),
        config.number("penalty.lambda2", default=math.inf, low=0.0, allow_inf=True),
        config.choice("penalty.q", (1, 2), default=2),
    )


def run_simulate(config: RunConfig, out_dir: str, seed: int, threads: int = 1) -> list[str]:
    """Simulate a Brown-Resnick panel from a piecewise-constant dependence field."""
    sites = load_sites(config)
    truth = build_partition(config, "simulate.truth", sites, seed)
    sigma2 = config.numbers("simulate.sigma2", default=[1.0])
    phi = config.numbers("simulate.phi", default=[0.2])
    for key, values in (("simulate.sigma2", sigma2), ("simulate.phi", phi)):
        if len(values) not in (1, truth.R):
            raise config.error(key, "needs 1 or {} values, got {}".format(truth.R, len(values)))
        if any(v <= 0 for v in values):
            raise config.error(key, "values must be positive")
    field = DependenceField.from_values(truth, sigma2, phi)
    cfg = SimConfig(
        m_star=config.integer("simulate.m_star", default=10_000, minimum=1),
        n_replicates=config.integer("simulate.replicates", default=100, minimum=1),
        seed=seed,
        jitter=config.number("simulate.jitter", default=0.0, low=0.0, high=1e-4),
    )

    click.echo("Simulating {} replicates at {} sites (m*={}, {} subregions)...".format(
        cfg.n_replicates, sites.D, cfg.m_star, truth.R))
    panel = sample_br(sites, field, cfg, threads=threads)

    os.makedirs(out_dir, exist_ok=True)
    files = [os.path.join(out_dir, name) for name in
             ("sites.csv", "truth_partition.csv", "truth_field.csv")]
    datafiles.write_sites(files[0], sites)
    datafiles.write_partition(files[1], sites, truth)
    datafiles.write_field(files[2], field)
    files += datafiles.write_panel(os.path.join(out_dir, "panel.csv"), panel, {
        "m_star": cfg.m_star,
        "replicates": cfg.n_replicates,
        "seed": seed,
    })
    files.append(write_run_manifest(out_dir, "simulate", config, seed, files))
    click.echo("Wrote {} replicates to {}".format(panel.T, out_dir))
    return files


def run_fit(config: RunConfig, out_dir: str, seed: int, verbose: bool = False) -> list[str]:
    """Fit one partition at a fixed penalty, with sandwich information and CLIC/CBIC."""
    os.makedirs(out_dir, exist_ok=True)
    sites = load_sites(config)
    panel, files = load_panel(config, sites, out_dir)
    partition = build_partition(config, "partition", sites, seed)
    spec = load_penalty(config)
    starts = config.integer("optimizer.starts", default=3, minimum=1)
    pairs = load_pairs(config, sites, seed)

    validation_pairs = None
    fraction = config.number("pairs.validation_fraction", default=0.0, low=0.0, high=0.5)
    if fraction > 0:
        pairs, validation_pairs = _split_validation(pairs, sites.D, fraction, seed)

    click.echo("Fitting {} subregion(s) on {} pairs x {} replicates...".format(
        partition.R, len(pairs), panel.T))
    result = fit(panel, pairs, sites, partition, spec, starts=starts, seed=seed, verbose=verbose)
    if not result.converged:
        click.echo("Warning: {}".format(result.condition_flag), err=True)
    info = sandwich(panel, pairs, sites, partition, result.field_hat, spec)
    if info.condition_flag:
        click.echo("Warning: {}".format(info.condition_flag), err=True)
    criteria = clic_cbic(result.pl_value, info, panel.T)

    doc = datafiles.fit_doc(result, info, criteria)
    doc["pairs"] = len(pairs)
    if validation_pairs is not None:
        doc["validation_pl"] = datafiles.plain_number(
            pairwise_loglik(panel, validation_pairs, sites, partition, result.field_hat))

    files += _write_fit_files(out_dir, sites, result, pairs)
    path = os.path.join(out_dir, "fit.yml")
    datafiles.write_yaml(path, doc)
    files.append(path)
    files.append(write_run_manifest(out_dir, "fit", config, seed, files))
    click.echo("PL {:.4f}, CLIC {:.2f}, CBIC {:.2f}".format(result.pl_value, *criteria))
    return files


def run_merge(config: RunConfig, out_dir: str, seed: int, threads: int = 1) -> list[str]:
    """Tune lambda and merge subregions from a base partition; compare base and merged models."""
    os.makedirs(out_dir, exist_ok=True)
    sites = load_sites(config)
    panel, files = load_panel(config, sites, out_dir)
    base = build_partition(config, "partition", sites, seed)
    pairs = load_pairs(config, sites, seed)
    split = build_holdout_split(
        sites, base, pairs,
        n_folds=config.integer("merge.folds", default=5, minimum=1),
        seed=seed,
        validation_fraction=config.number("merge.validation_fraction", default=0.15, low=0.0, high=0.5),
        holdout_fraction=config.number("merge.holdout_fraction", default=0.15, low=0.0, high=0.5),
        single_holdout=config.flag("merge.single_holdout"),
    )
    grid = tuple(config.numbers("merge.grid", default=list(DEFAULT_GRID), allow_inf=True))
    try:
        grids = GridSpec(grid, grid)
    except ValueError as exc:
        raise config.error("merge.grid", str(exc))
    q = config.choice("penalty.q", (1, 2), default=2)
    ctx = DataContext(panel, sites, split, q=q,
                      starts=config.integer("optimizer.starts", default=1, minimum=1),
                      seed=seed, threads=threads)

    click.echo("Merging from {} subregions: {} folds, {} validation sites, {} pairs...".format(
        base.R, len(split.folds), split.validation_sites.size, len(pairs)))
    trace = select_partition(base, grids, ctx, config.integer("merge.thresholds",
                                                           default=DEFAULT_THRESHOLDS, minimum=1))

    click.echo("Refitting stationary, base and merged models on all non-validation pairs...")
    stationary = single_region(sites)
    stationary_holdout = average_scores(fold_scores(ctx, stationary, [PenaltySpec(q=q)])[0])[1]
    rows = [
        _model_row("stationary", ctx, stationary, PenaltySpec(q=q), None, stationary_holdout),
        _model_row("base", ctx, base, trace.steps[0].penalty, trace.steps[0].field_hat,
                   trace.steps[0].holdout_ppl),
        _model_row("merged", ctx, trace.final_partition, trace.final_step.penalty,
                   trace.final_step.field_hat, trace.final_step.holdout_ppl),
    ]
    models = pd.DataFrame([r for r, _ in rows])
    final_fit = rows[-1][1]

    steps = pd.DataFrame([{
        "step": k,
        "regions": s.partition.R,
        "lambda1": s.penalty.lambda1,
        "lambda2": s.penalty.lambda2,
        "holdout_ppl": s.holdout_ppl,
        "accepted_threshold": s.accepted_threshold,
    } for k, s in enumerate(trace.steps)])

    written = {
        "trace.yml": lambda p: datafiles.write_yaml(p, datafiles.trace_doc(trace)),
        "steps.csv": lambda p: datafiles.write_table(p, steps),
        "models.csv": lambda p: datafiles.write_table(p, models),
        "split.csv": lambda p: datafiles.write_table(p, _split_table(sites, split)),
        "base_partition.csv": lambda p: datafiles.write_partition(p, sites, base),
        "base_field.csv": lambda p: datafiles.write_field(p, trace.steps[0].field_hat),
        "fit.yml": lambda p: datafiles.write_yaml(p, datafiles.fit_doc(final_fit)),
    }
    for name, write in written.items():
        path = os.path.join(out_dir, name)
        write(path)
        files.append(path)
    files += _write_fit_files(out_dir, sites, final_fit, split.fit_pairs)
    files.append(write_run_manifest(out_dir, "merge", config, seed, files))
    click.echo("Final partition: {} subregion(s) after {} merge step(s)".format(
        trace.final_partition.R, len(trace.steps) - 1))
    return files


def run_diagnose(config: RunConfig, out_dir: str, seed: int) -> list[str]:
    """Madogram tables, MAD by stratum, partition agreement and surface errors of a fitted model."""
    os.makedirs(out_dir, exist_ok=True)
    sites = load_sites(config)
    panel, files = load_panel(config, sites, out_dir)
    fit_dir = config.path("diagnose.fit_dir", directory=True)
    partition = datafiles.read_partition(os.path.join(fit_dir, "partition.csv"), sites)
    field = datafiles.read_field(os.path.join(fit_dir, "field.csv"), partition)

    strata = _load_strata(config, sites)
    click.echo("Computing extremal coefficients for {} site pairs...".format(sites.D * (sites.D - 1) // 2))
    summary, table = mad_extremal(panel, sites, field, strata)
    bins = bin_by_distance(table, config.integer("diagnose.distance_bins", default=10, minimum=1))
    ks = pd.DataFrame({"id": sites.ids, "ks": ks_distance(panel)})
    doc = {"mad_total": datafiles.plain_number(summary["mad"].iloc[-1])}

    outputs = {"mad.csv": summary, "madogram.csv": table.drop(columns=["abs_diff"]),
               "madogram_bins.csv": bins, "ks.csv": ks}

    if config.has("diagnose.reference_partition"):
        reference = datafiles.read_partition(config.path("diagnose.reference_partition"), sites)
        doc["rand_index"] = datafiles.plain_number(rand_index(reference, partition))
        outputs["local_rand.csv"] = pd.DataFrame({
            "id": sites.ids, "lri": local_rand_indices(reference, partition)})
        if config.has("diagnose.truth_field"):
            truth = datafiles.read_field(config.path("diagnose.truth_field"), reference)
            doc.update(_surface_errors(field, truth))
    elif config.has("diagnose.truth_field"):
        raise config.error("diagnose.truth_field", "needs diagnose.reference_partition")

    for name, frame in outputs.items():
        path = os.path.join(out_dir, name)
        datafiles.write_table(path, frame)
        files.append(path)
    path = os.path.join(out_dir, "diagnose.yml")
    datafiles.write_yaml(path, doc)
    files.append(path)
    files.append(write_run_manifest(out_dir, "diagnose", config, seed, files))
    for _, row in summary.iterrows():
        click.echo("  MAD {:<12} {:.4f} ({} pairs)".format(row["stratum"], row["mad"], row["n_pairs"]))
    return files


def _write_fit_files(out_dir: str, sites: SiteSet, result: FitResult, pairs: PairSet) -> list[str]:
    partition = result.field_hat.partition
    sigma2, phi = result.field_hat.site_values()
    surface = pd.DataFrame({"id": sites.ids, "region": partition.labels, "sigma2": sigma2, "phi": phi})
    paths = [os.path.join(out_dir, name) for name in
             ("field.csv", "partition.csv", "pairs.csv", "site_field.csv")]
    datafiles.write_field(paths[0], result.field_hat)
    datafiles.write_partition(paths[1], sites, partition)
    datafiles.write_pairs(paths[2], pairs)
    datafiles.write_table(paths[3], surface)
    return paths


def _model_row(name: str, ctx: DataContext, partition: Partition, spec: PenaltySpec,
               init: DependenceField | None, holdout_ppl: float) -> tuple[dict, FitResult]:
    split = ctx.split
    if partition.R == 1:
        result = fit_stationary(ctx.panel, split.fit_pairs, ctx.sites, init=init,
                                starts=ctx.starts, seed=ctx.seed)
    else:
        result = fit(ctx.panel, split.fit_pairs, ctx.sites, partition, spec, init=init,
                     starts=ctx.starts, seed=ctx.seed)
    info = sandwich(ctx.panel, split.fit_pairs, ctx.sites, partition, result.field_hat, spec)
    clic, cbic = clic_cbic(result.pl_value, info, ctx.panel.T)
    validation = math.nan
    if split.validation_pairs is not None:
        validation = pairwise_loglik(ctx.panel, split.validation_pairs, ctx.sites, partition,
                                     result.field_hat)
    row = {
        "model": name,
        "regions": partition.R,
        "lambda1": spec.lambda1,
        "lambda2": spec.lambda2,
        "pl": result.pl_value,
        "validation_pl": validation,
        "holdout_ppl": holdout_ppl,
        "clic": clic,
        "cbic": cbic,
    }
    return row, result


def _split_validation(pairs: PairSet, D: int, fraction: float, seed: int) -> tuple[PairSet, PairSet]:
    rng = np.random.default_rng([seed, 1])
    n_valid = int(math.floor(fraction * D + 0.5))
    held = rng.choice(D, size=n_valid, replace=False)
    touches = np.isin(pairs.i, held) | np.isin(pairs.j, held)
    if touches.all() or not touches.any():
        raise DataError("validation split leaves no fitting or no validation pairs")
    return pairs.select(~touches), pairs.select(touches)


def _split_table(sites: SiteSet, split) -> pd.DataFrame:
    role = np.full(sites.D, "train", dtype=object)
    for k, fold in enumerate(split.folds):
        role[fold] = "fold{}".format(k + 1)
    role[split.validation_sites] = "validation"
    return pd.DataFrame({"id": sites.ids, "role": role})


def _load_strata(config: RunConfig, sites: SiteSet) -> list | None:
    """Site strata from a CSV of ``id,stratum`` or of ``id,value`` cut at the configured breaks."""
    if not config.has("diagnose.strata"):
        return None
    path = config.path("diagnose.strata")
    frame = pd.read_csv(path)
    if "id" not in frame.columns:
        raise DataError("{}: missing column id".format(path))
    frame = frame.set_index(frame["id"].astype(str))
    missing = [i for i in sites.ids if i not in frame.index]
    if missing:
        raise DataError("{}: no stratum for site(s) {}".format(path, ", ".join(missing[:5])))
    if config.has("diagnose.elevation_breaks"):
        if "value" not in frame.columns:
            raise DataError("{}: missing column value".format(path))
        return strata_from_values(frame.loc[list(sites.ids), "value"].to_numpy(dtype=float),
                                  config.numbers("diagnose.elevation_breaks"))
    if "stratum" not in frame.columns:
        raise ConfigError("{}: needs a stratum column, or a value column with "
                          "diagnose.elevation_breaks".format(path))
    return frame.loc[list(sites.ids), "stratum"].astype(str).tolist()


def _surface_errors(field: DependenceField, truth: DependenceField) -> dict:
    """IntRMSE of the per-site surfaces and RMSE per true subregion."""
    fitted_sigma2, fitted_phi = field.site_values()
    true_sigma2, true_phi = truth.site_values()
    reference = truth.partition
    sizes = reference.sizes()
    region_sigma2 = np.bincount(reference.index, weights=fitted_sigma2, minlength=reference.R) / sizes
    region_phi = np.bincount(reference.index, weights=fitted_phi, minlength=reference.R) / sizes
    return {
        "int_rmse_sigma2": datafiles.plain_number(int_rmse(fitted_sigma2, true_sigma2)),
        "int_rmse_phi": datafiles.plain_number(int_rmse(fitted_phi, true_phi)),
        "rmse_sigma2": datafiles.plain_number(rmse_subregion(region_sigma2, truth.sigma2)[0]),
        "rmse_phi": datafiles.plain_number(rmse_subregion(region_phi, truth.phi)[0]),
    }
