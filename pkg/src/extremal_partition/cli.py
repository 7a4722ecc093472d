"""Click CLI entry point for locally stationary extremal dependence modelling."""

from __future__ import annotations

import functools

import click

from extremal_partition.manifest import load_config
from extremal_partition.pipeline import run_diagnose, run_fit, run_merge, run_simulate


def run_options(f):
    """Options shared by every pipeline command."""

    @click.option("-c", "--config", "config_path", required=True,
                  type=click.Path(), help="YAML run configuration")
    @click.option("-o", "--out", default="output", show_default=True,
                  type=click.Path(file_okay=False), help="Output directory")
    @click.option("--seed", type=int, default=None, help="Seed (overrides the config file)")
    @click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
                  help="Worker threads for replicates and holdout fits")
    @functools.wraps(f)
    def wrapper(config_path, out, seed, threads, **kwargs):
        config = load_config(config_path)
        if seed is not None:
            config.overrides["seed"] = seed
        seed = config.integer("seed", minimum=0)
        return f(config=config, out=out, seed=seed, threads=threads, **kwargs)

    return wrapper


@click.group()
@click.version_option(package_name="extremal-partition")
def cli():
    """Fit, merge and check locally stationary Brown-Resnick dependence models."""
    pass


@cli.command()
@run_options
def simulate(config, out, seed, threads):
    """Simulate block maxima from a piecewise-constant dependence field.

    Writes panel.csv (unit Frechet), sites.csv, the true partition and field,
    and manifest.yml into the output directory.
    """
    run_simulate(config, out, seed, threads)


@cli.command()
@run_options
@click.option("--verbose", is_flag=True, help="Show every objective evaluation")
def fit(config, out, seed, threads, verbose):
    """Fit the dependence field of one partition at a fixed penalty."""
    run_fit(config, out, seed, verbose=verbose)


@cli.command()
@run_options
def merge(config, out, seed, threads):
    """Tune penalties and merge neighbouring subregions from a base partition."""
    run_merge(config, out, seed, threads)


@cli.command()
@run_options
def diagnose(config, out, seed, threads):
    """Compare fitted and empirical extremal coefficients.

    Needs diagnose.fit_dir pointing at the output of fit or merge.
    """
    run_diagnose(config, out, seed)
