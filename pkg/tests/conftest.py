"""Shared fixtures for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from mlcv import Diffusion1D, SyntheticLowRank, pilot_mlmc


@pytest.fixture(scope="session")
def synthetic():
    """Small exactly-low-rank hierarchy used across modules."""
    return SyntheticLowRank(r_true=3, m0=8, refine=2, num_levels=3, input_dim=4, delta=1e-3)


@pytest.fixture(scope="session")
def synthetic_exact():
    """Same hierarchy with the level perturbation switched off (exact rank)."""
    return SyntheticLowRank(r_true=3, m0=8, refine=2, num_levels=3, input_dim=4, delta=0.0)


@pytest.fixture(scope="session")
def synthetic_pilot(synthetic):
    return pilot_mlmc(synthetic, 40, 123)


@pytest.fixture(scope="session")
def diffusion_small():
    """Coarse three-level diffusion hierarchy, cheap enough for unit tests."""
    return Diffusion1D(grids=(7, 15, 31), n_modes=4, kl_grid_n=65)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(987)
