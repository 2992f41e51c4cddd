"""Shared fixtures for the test suite."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from hetfx.models import Dataset, DgpFamily, DgpSpec, PropensityConfig, SimulatedSample
from hetfx.propensity import fit_propensity
from hetfx.simulation import generate


def _make_dataset(
    y: list[float] | np.ndarray,
    d: list[int] | np.ndarray,
    x: list[list[float]] | np.ndarray,
    n_treatments: int = 2,
    labels: list[str] | None = None,
) -> Dataset:
    """Small hand-written dataset."""
    return Dataset(
        y=np.asarray(y, dtype=float),
        d=np.asarray(d),
        x=np.asarray(x, dtype=float),
        n_treatments=n_treatments,
        x_labels=labels or [],
    )


@pytest.fixture
def make_dataset():
    return _make_dataset


@pytest.fixture(scope="session")
def ordinal_sample() -> SimulatedSample:
    """Ordinal design with normal errors, N = 800."""
    return generate(DgpSpec(family=DgpFamily.ORDINAL, n=800, seed=11))


@pytest.fixture(scope="session")
def ordinal_fit(ordinal_sample):
    return fit_propensity(ordinal_sample.dataset, PropensityConfig())


@pytest.fixture(scope="session")
def binary_x_sample() -> SimulatedSample:
    """Binary-X ordinal design, N = 5000."""
    return generate(DgpSpec(family=DgpFamily.ORDINAL_BINARY_X, n=5000, seed=3))


@pytest.fixture(scope="session")
def multinomial_sample() -> SimulatedSample:
    """Logit multinomial design, N = 4000."""
    return generate(DgpSpec(family=DgpFamily.MULTINOMIAL, n=4000, seed=5))


@pytest.fixture
def write_csv(tmp_path):
    """Write a frame to a CSV under tmp_path and return its path."""

    def _write(frame: pd.DataFrame, name: str = "data.csv") -> str:
        path = tmp_path / name
        frame.to_csv(path, index=False, float_format="%.17g")
        return str(path)

    return _write
