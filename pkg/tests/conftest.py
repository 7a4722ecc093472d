"""Shared test fixtures."""

from __future__ import annotations

import os
import tempfile

import numpy as np
import pytest
import yaml

from extremal_partition.domain import build_grid_partition, regular_grid_sites, single_region
from extremal_partition.models import DependenceField, MaximaPanel, SimConfig
from extremal_partition.simulate import sample_br


@pytest.fixture
def tmp_dir():
    """Create a temporary directory that's cleaned up after the test."""
    with tempfile.TemporaryDirectory() as d:
        yield d


@pytest.fixture
def grid_sites():
    """6 x 6 lattice on the unit square."""
    return regular_grid_sites(6)


@pytest.fixture
def quadrants(grid_sites):
    """2 x 2 grid partition of the 6 x 6 lattice."""
    return build_grid_partition(grid_sites, 2, 2)


@pytest.fixture
def make_panel():
    """Factory fixture that simulates a unit Frechet panel from a field."""

    def _make(sites, field=None, T: int = 50, m_star: int = 500, seed: int = 1) -> MaximaPanel:
        if field is None:
            field = DependenceField.from_values(single_region(sites), 1.0, 0.2)
        return sample_br(sites, field, SimConfig(m_star=m_star, n_replicates=T, seed=seed))

    return _make


@pytest.fixture
def stationary_panel(grid_sites, make_panel):
    return make_panel(grid_sites, T=80, m_star=1000, seed=3)


@pytest.fixture
def random_panel(grid_sites):
    """Independent unit Frechet values, for tests that only need valid input."""
    rng = np.random.default_rng(11)
    values = -1.0 / np.log(rng.uniform(size=(40, grid_sites.D)))
    return MaximaPanel(values, "unit_frechet", grid_sites)


@pytest.fixture
def write_config(tmp_dir):
    """Factory fixture that writes a YAML config into the temporary directory."""

    def _write(data: dict | str, name: str = "config.yml") -> str:
        path = os.path.join(tmp_dir, name)
        with open(path, "w") as f:
            if isinstance(data, str):
                f.write(data)
            else:
                yaml.safe_dump(data, f, sort_keys=False)
        return path

    return _write
