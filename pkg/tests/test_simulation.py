"""Tests for the simulation designs and the Monte Carlo harness."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm, skew

from hetfx import simulation
from hetfx.errors import ExcessFailures, InvalidConfig, InvalidSpecCombination
from hetfx.models import (
    CenteringKind,
    CenteringVariant,
    DgpFamily,
    DgpSpec,
    ErrorDist,
    PropensityKind,
    SimTable,
    TargetSource,
)
from hetfx.simulation import (
    estimator_config,
    generate,
    panel_spec,
    run_monte_carlo,
    sample_frame,
    standardize_chi3,
    usual_ols_demo,
)
from hetfx.streams import task_rng

VARIANTS = [
    CenteringVariant(kind=CenteringKind.RAW),
    CenteringVariant(kind=CenteringKind.COVARIATE_POLY, q=2),
    CenteringVariant(kind=CenteringKind.INDEX_POLY, q=2),
]


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

class TestDesigns:
    def test_standardized_chi3_moments(self):
        rng = np.random.default_rng(0)
        draws = standardize_chi3(rng.chisquare(3, 1_000_000))
        assert draws.mean() == pytest.approx(0.0, abs=0.01)
        assert draws.std() == pytest.approx(1.0, abs=0.01)
        assert skew(draws) == pytest.approx(np.sqrt(8.0 / 3.0), abs=0.05)

    def test_binary_x_control_share(self):
        sample = generate(DgpSpec(family=DgpFamily.ORDINAL_BINARY_X, n=1_000_000, seed=1))
        expected = 0.3 * 0.5 + 0.7 * norm.cdf(-2.0)
        assert np.mean(sample.dataset.d == 0) == pytest.approx(expected, abs=0.002)

    def test_ordinal_effect_mean(self):
        sample = generate(DgpSpec(family=DgpFamily.ORDINAL, n=1_000_000, seed=2))
        assert sample.true_mu[:, 1].mean() == pytest.approx(2.0, abs=0.01)

    @pytest.mark.parametrize("family", list(DgpFamily))
    def test_probabilities_valid(self, family):
        sample = generate(DgpSpec(family=family, n=2000, seed=4))
        probs = sample.true_probs
        assert probs.sum(axis=1) == pytest.approx(1.0, abs=1e-12)
        assert np.all((probs > 0.0) & (probs < 1.0))
        assert sample.true_mu.shape == (2000, 2)

    def test_outcome_decomposition(self, ordinal_sample):
        data = ordinal_sample.dataset
        mu = ordinal_sample.true_mu
        treated = np.where(data.d > 0, mu[np.arange(data.n), np.maximum(data.d - 1, 0)], 0.0)
        assert data.y == pytest.approx(ordinal_sample.y0 + treated)

    def test_chi3_misspecified_design(self):
        spec = DgpSpec(
            family=DgpFamily.ORDINAL, error_dist=ErrorDist.CHI3, regression_misspec=True,
            n=500, seed=3,
        )
        sample = generate(spec)
        assert sample.dataset.x_labels == ["const", "x2", "x3"]
        index = sample.dataset.x[:, 1] + sample.dataset.x[:, 2] + sample.dataset.x[:, 1] ** 2
        assert sample.true_indices[:, 0] == pytest.approx(index)

    def test_same_seed_same_sample(self):
        spec = DgpSpec(family=DgpFamily.MULTINOMIAL, n=300, seed=8)
        assert np.array_equal(generate(spec).dataset.y, generate(spec).dataset.y)
        other = generate(DgpSpec(family=DgpFamily.MULTINOMIAL, n=300, seed=9))
        assert not np.array_equal(generate(spec).dataset.y, other.dataset.y)

    def test_streams_independent_of_order(self):
        first = task_rng(5, 3).random(4)
        task_rng(5, 0).random(100)
        assert np.array_equal(first, task_rng(5, 3).random(4))
        assert not np.array_equal(first, task_rng(5, 4).random(4))

    def test_sample_frame_columns(self, ordinal_sample):
        frame = sample_frame(ordinal_sample)
        assert list(frame.columns) == ["y", "d", "x2", "x3", "p0", "p1", "p2", "mu1", "mu2"]
        assert len(frame) == ordinal_sample.dataset.n


class TestPanels:
    def test_ordinal_panels(self):
        spec = panel_spec(SimTable.ORDINAL, 4, 1000, 0)
        assert spec.family == DgpFamily.ORDINAL
        assert spec.error_dist == ErrorDist.CHI3
        assert spec.regression_misspec
        assert estimator_config(spec).kind == PropensityKind.ORDERED_PROBIT

    def test_multinomial_panels(self):
        spec = panel_spec(SimTable.MULTINOMIAL, 2, 1000, 0)
        assert spec.family == DgpFamily.MULTINOMIAL_ABS
        config = estimator_config(spec)
        assert config.kind == PropensityKind.MNL
        assert config.mnl_layout == simulation.MNL_LAYOUT

    def test_unknown_panel(self):
        with pytest.raises(InvalidSpecCombination):
            panel_spec(SimTable.ORDINAL, 5, 1000, 0)

    def test_invalid_combination(self):
        with pytest.raises(InvalidSpecCombination):
            DgpSpec(family=DgpFamily.ORDINAL_BINARY_X, error_dist=ErrorDist.CHI3)
        with pytest.raises(InvalidSpecCombination):
            DgpSpec(family=DgpFamily.MULTINOMIAL, error_dist=ErrorDist.CHI3)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

class TestRunMonteCarlo:
    def test_small_run(self):
        spec = panel_spec(SimTable.ORDINAL, 1, 300, 7)
        report = run_monte_carlo(spec, VARIANTS, reps=4, panel=1)
        assert [row.estimator for row in report.rows] == [
            "b0_1", "bX_1", "bpi_1", "b0_2", "bX_2", "bpi_2",
        ]
        assert report.n_failed == 0
        for row in report.rows:
            assert row.rmse**2 == pytest.approx(row.abs_bias**2 + row.sim_sd**2, rel=1e-12)
            assert row.avg_asy_sd > 0.0
            assert row.coverage * 4 == pytest.approx(round(row.coverage * 4))

    def test_reproducible_across_workers(self):
        spec = panel_spec(SimTable.MULTINOMIAL, 1, 300, 3)
        variants = VARIANTS[2:]
        serial = run_monte_carlo(spec, variants, reps=3, n_jobs=1)
        parallel = run_monte_carlo(spec, variants, reps=3, n_jobs=2)
        assert serial.rows == parallel.rows

    def test_estimated_targets(self):
        spec = panel_spec(SimTable.ORDINAL, 1, 300, 7)
        report = run_monte_carlo(
            spec, VARIANTS[:1], reps=2, target_source=TargetSource.ESTIMATED
        )
        assert report.target_source == TargetSource.ESTIMATED

    def test_needs_two_repetitions(self):
        with pytest.raises(InvalidConfig):
            run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 300, 0), VARIANTS, reps=1)

    def test_excess_failures(self, monkeypatch):
        monkeypatch.setattr(simulation, "_one_repetition", lambda *args: None)
        with pytest.raises(ExcessFailures) as exc_info:
            run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 300, 0), VARIANTS, reps=5)
        assert exc_info.value.failed == 5


class TestUsualOlsDemo:
    def test_report_structure(self):
        report = usual_ols_demo(n=20_000, seed=1)
        assert report.labels == ["const", "D1", "D2", "x2"]
        assert report.naive_target == [1.0, 0.7, 1.4, 1.0]
        assert report.estimand == pytest.approx([0.13, 1.13], abs=0.05)
        assert report.contamination_gap == pytest.approx(
            [abs(report.ols_coef[1] - 0.7), abs(report.ols_coef[2] - 1.4)]
        )


# ---------------------------------------------------------------------------
# Desk-scale Monte Carlo runs
# ---------------------------------------------------------------------------

def _row(report, estimator):
    return next(row for row in report.rows if row.estimator == estimator)


@pytest.mark.slow
class TestDeskScaleTables:
    def test_ordinal_panel_one(self):
        report = run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 1000, 7), VARIANTS, reps=500)
        row = _row(report, "bpi_1")
        assert row.abs_bias <= 0.02
        assert 0.09 <= row.sim_sd <= 0.13
        assert row.avg_asy_sd == pytest.approx(row.sim_sd, rel=0.15)

    def test_ordinal_interval_coverage(self):
        report = run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 1000, 7), VARIANTS[2:], reps=500)
        assert 0.92 <= _row(report, "bpi_1").coverage <= 0.98

    def test_ordinal_asy_sd_halves(self):
        variants = VARIANTS[2:]
        small = run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 1000, 7), variants, reps=300)
        large = run_monte_carlo(panel_spec(SimTable.ORDINAL, 1, 4000, 7), variants, reps=300)
        ratio = _row(large, "bpi_1").avg_asy_sd / _row(small, "bpi_1").avg_asy_sd
        assert ratio == pytest.approx(0.5, abs=0.08)

    def test_chi3_raw_centering_biased(self):
        report = run_monte_carlo(panel_spec(SimTable.ORDINAL, 2, 4000, 7), VARIANTS, reps=300)
        raw = _row(report, "b0_1").abs_bias
        index = _row(report, "bpi_1").abs_bias
        assert 0.40 <= raw <= 0.54
        assert index <= 0.07
        assert raw > index

    def test_multinomial_centering_gains_efficiency(self):
        report = run_monte_carlo(
            panel_spec(SimTable.MULTINOMIAL, 1, 1000, 7), VARIANTS, reps=300
        )
        ratio = _row(report, "b0_1").sim_sd / _row(report, "bX_1").sim_sd
        assert 1.4 <= ratio <= 2.2
