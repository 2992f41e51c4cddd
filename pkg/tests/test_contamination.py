"""Tests for the contamination weights of the multi-dummy OLS."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from hetfx.contamination import (
    closed_form_weights,
    conditional_cov,
    contamination_report,
    theorem1_estimand,
    theorem1_weights,
    usual_ols,
)
from hetfx.errors import (
    ContinuousCovariate,
    DimensionMismatch,
    InvalidConfig,
    SingularCovariance,
)
from hetfx.models import ConditionalCov, Dataset
from hetfx.simulation import usual_ols_demo


def _cell_design(n_treatments: int, n_cells: int, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Discrete design with random per-cell category probabilities."""
    rng = np.random.default_rng(seed)
    cell = np.arange(n) % n_cells
    cell_p = rng.dirichlet(np.full(n_treatments + 1, 2.0), size=n_cells)
    probs = cell_p[cell]
    d = np.arange(n) % (n_treatments + 1)
    x = np.column_stack([np.ones(n), cell.astype(float)])
    dataset = Dataset(y=np.zeros(n), d=d, x=x, n_treatments=n_treatments)
    return dataset, probs


def _binary_x_cell_probs(x2: float) -> np.ndarray:
    cdf = norm.cdf((np.array([0.0, 1.0]) - x2) / 0.5)
    return np.array([cdf[0], cdf[1] - cdf[0], 1.0 - cdf[1]])


def _multinomial_cov(p: np.ndarray) -> np.ndarray:
    return np.diag(p[1:]) - np.outer(p[1:], p[1:])


# ---------------------------------------------------------------------------
# conditional_cov
# ---------------------------------------------------------------------------

class TestConditionalCov:
    def test_uniform_single_cell_exact(self, make_dataset):
        data = make_dataset(np.zeros(6), [0, 1, 2, 0, 1, 2], np.ones((6, 1)))
        cov = conditional_cov(data, cell_probs=np.full((6, 3), 1.0 / 3.0))
        assert cov.exact
        assert cov.c_bar[0, 0] == pytest.approx(2.0 / 9.0)
        assert cov.c_bar[0, 1] == pytest.approx(-1.0 / 9.0)
        assert cov.c_bar[1, 1] == pytest.approx(2.0 / 9.0)

    def test_uniform_single_cell_empirical(self, make_dataset):
        data = make_dataset(np.zeros(6), [0, 1, 2, 0, 1, 2], np.ones((6, 1)))
        cov = conditional_cov(data)
        assert cov.n_cells == 1
        assert cov.c_bar[0, 0] == pytest.approx(2.0 / 9.0)
        assert cov.c_bar[0, 1] == pytest.approx(-1.0 / 9.0)

    def test_constant_treatment_cell_has_zero_covariance(self, make_dataset):
        x = np.column_stack([np.ones(8), [0, 0, 0, 0, 1, 1, 1, 1]])
        data = make_dataset(np.zeros(8), [1, 1, 1, 1, 0, 1, 2, 2], x)
        cov = conditional_cov(data)
        assert np.all(cov.c_of_x[:4] == 0.0)
        assert np.any(cov.c_of_x[4:] != 0.0)

    def test_symmetric_with_bernoulli_diagonal(self, binary_x_sample):
        cov = conditional_cov(binary_x_sample.dataset)
        assert cov.c_of_x == pytest.approx(np.transpose(cov.c_of_x, (0, 2, 1)))
        diag = np.diagonal(cov.c_of_x, axis1=1, axis2=2)
        assert np.all((diag >= 0.0) & (diag <= 0.25))
        assert np.all(np.linalg.eigvalsh(cov.c_bar) > -1e-12)

    def test_binary_x_design_exact_mixture(self, binary_x_sample):
        data = binary_x_sample.dataset
        cov = conditional_cov(data, cell_probs=binary_x_sample.true_probs)
        share = data.x[:, 1].mean()
        expected = (1.0 - share) * _multinomial_cov(_binary_x_cell_probs(0.0)) + (
            share * _multinomial_cov(_binary_x_cell_probs(1.0))
        )
        assert cov.c_bar == pytest.approx(expected, abs=1e-12)

    def test_continuous_covariate_rejected(self, ordinal_sample):
        with pytest.raises(ContinuousCovariate):
            conditional_cov(ordinal_sample.dataset)

    def test_probability_shape_checked(self, make_dataset):
        data = make_dataset(np.zeros(6), [0, 1, 2, 0, 1, 2], np.ones((6, 1)))
        with pytest.raises(DimensionMismatch):
            conditional_cov(data, cell_probs=np.full((6, 2), 0.5))


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

class TestTheorem1Weights:
    def test_weight_means_are_identity(self, binary_x_sample):
        report = theorem1_weights(conditional_cov(binary_x_sample.dataset))
        assert report.weight_means == pytest.approx(np.eye(2), abs=1e-12)
        assert not report.conjectured

    def test_binary_treatment_reduces_to_overlap_weight(self):
        dataset, probs = _cell_design(n_treatments=1, n_cells=4, n=40, seed=2)
        report = theorem1_weights(conditional_cov(dataset, cell_probs=probs))
        pi = probs[:, 1]
        expected = pi * (1.0 - pi) / np.mean(pi * (1.0 - pi))
        assert report.omega[:, 0, 0] == pytest.approx(expected, rel=1e-12)

    def test_homogeneous_covariance_gives_identity(self, make_dataset):
        x = np.column_stack([np.ones(9), np.arange(9) % 3])
        data = make_dataset(np.zeros(9), np.arange(9) % 3, x)
        probs = np.tile([0.2, 0.3, 0.5], (9, 1))
        report = theorem1_weights(conditional_cov(data, cell_probs=probs))
        for i in range(9):
            assert report.omega[i] == pytest.approx(np.eye(2), abs=1e-12)

    @pytest.mark.parametrize("n_treatments", [1, 2, 3])
    def test_closed_forms_match_matrix_solve(self, n_treatments):
        dataset, probs = _cell_design(n_treatments, n_cells=5, n=60, seed=n_treatments)
        cov = conditional_cov(dataset, cell_probs=probs)
        assert closed_form_weights(cov) == pytest.approx(theorem1_weights(cov).omega, abs=1e-10)

    def test_four_treatments_flagged_conjectured(self):
        dataset, probs = _cell_design(n_treatments=4, n_cells=6, n=60, seed=4)
        cov = conditional_cov(dataset, cell_probs=probs)
        assert theorem1_weights(cov).conjectured
        with pytest.raises(InvalidConfig):
            closed_form_weights(cov)

    def test_singular_average_covariance(self, make_dataset):
        data = make_dataset(np.zeros(4), [0, 1, 0, 1], np.ones((4, 1)), n_treatments=2)
        probs = np.tile([0.5, 0.5, 0.0], (4, 1))
        with pytest.raises(SingularCovariance):
            theorem1_weights(conditional_cov(data, cell_probs=probs))


# ---------------------------------------------------------------------------
# Estimand and the usual OLS
# ---------------------------------------------------------------------------

class TestTheorem1Estimand:
    def test_constant_effects_recovered(self, binary_x_sample):
        report = theorem1_weights(conditional_cov(binary_x_sample.dataset))
        mu = np.tile([1.5, -0.5], (binary_x_sample.dataset.n, 1))
        assert theorem1_estimand(report, mu) == pytest.approx([1.5, -0.5], abs=1e-12)

    def test_zero_effects(self, binary_x_sample):
        report = theorem1_weights(conditional_cov(binary_x_sample.dataset))
        zeros = np.zeros((binary_x_sample.dataset.n, 2))
        assert theorem1_estimand(report, zeros) == pytest.approx([0.0, 0.0])

    def test_binary_x_design_estimand(self, binary_x_sample):
        cov = conditional_cov(binary_x_sample.dataset, cell_probs=binary_x_sample.true_probs)
        estimand = theorem1_estimand(theorem1_weights(cov), binary_x_sample.true_mu)
        assert estimand == pytest.approx([0.13, 1.13], abs=0.04)

    def test_mu_shape_checked(self, binary_x_sample):
        report = theorem1_weights(conditional_cov(binary_x_sample.dataset))
        with pytest.raises(DimensionMismatch):
            theorem1_estimand(report, np.zeros((3, 2)))


class TestUsualOls:
    def test_constant_effects_without_noise_are_exact(self, make_dataset):
        rng = np.random.default_rng(8)
        d = np.arange(60) % 3
        x = rng.standard_normal(60)
        y = (d == 1) + 2.0 * (d == 2) + x
        data = make_dataset(y, d, np.column_stack([np.ones(60), x]))
        assert usual_ols(data) == pytest.approx([1.0, 2.0], abs=1e-10)

    def test_constant_effects_with_noise(self, make_dataset):
        rng = np.random.default_rng(9)
        n = 20_000
        d = rng.integers(0, 3, n)
        x = rng.standard_normal(n)
        y = (d == 1) + 2.0 * (d == 2) + x + rng.standard_normal(n)
        data = make_dataset(y, d, np.column_stack([np.ones(n), x]))
        assert usual_ols(data) == pytest.approx([1.0, 2.0], abs=0.08)

    def test_report_bundles_slopes_and_estimand(self, binary_x_sample):
        report = contamination_report(
            binary_x_sample.dataset, mu=binary_x_sample.true_mu,
            cell_probs=binary_x_sample.true_probs,
        )
        assert report.usual_ols_slopes.shape == (2,)
        assert report.estimand.shape == (2,)


@pytest.mark.slow
class TestUsualOlsDemonstration:
    def test_million_draws(self):
        report = usual_ols_demo(n=1_000_000, seed=0)
        assert report.ols_coef == pytest.approx([0.91, 0.13, 1.12, 1.94], abs=0.02)
        assert report.estimand == pytest.approx([0.13, 1.13], abs=0.02)
        assert report.naive_target == [1.0, 0.7, 1.4, 1.0]


@pytest.mark.slow
class TestClosedFormAgreement:
    @pytest.mark.parametrize("n_treatments", [2, 3])
    def test_ten_thousand_random_covariances(self, n_treatments):
        rng = np.random.default_rng(100 + n_treatments)
        worst = 0.0
        for _ in range(10_000):
            p = rng.dirichlet(np.full(n_treatments + 1, 5.0), size=6)[:, 1:]
            c_of_x = np.stack([np.diag(row) - np.outer(row, row) for row in p])
            cov = ConditionalCov(c_of_x=c_of_x, c_bar=c_of_x.mean(axis=0), exact=True)
            matrix = theorem1_weights(cov).omega
            gap = np.max(np.abs(closed_form_weights(cov) - matrix))
            worst = max(worst, gap / max(1.0, float(np.max(np.abs(matrix)))))
        assert worst <= 1e-12
