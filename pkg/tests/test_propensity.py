"""Tests for the ordered probit and multinomial logit treatment models."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import norm

from hetfx.errors import (
    BadCategory,
    DegenerateDenominator,
    InvalidConfig,
    MissingCategory,
    SeparationSuspected,
)
from hetfx.models import (
    DgpFamily,
    DgpSpec,
    MnlSpec,
    OrderedProbitSpec,
    PropensityConfig,
    PropensityKind,
)
from hetfx.propensity import (
    OrderedProbitModel,
    _finish_fit,
    category_probs,
    fit_mnl,
    fit_ordered_probit,
    fit_propensity,
    known_propensity,
    pairwise_from_probs,
    pairwise_propensity,
    score_vectors,
)
from hetfx.regression import central_difference
from hetfx.simulation import MNL_ALPHA, MNL_LAYOUT, estimator_config, generate


def _opg_se(scores: np.ndarray) -> np.ndarray:
    return np.sqrt(np.diag(np.linalg.inv(scores.T @ scores)))


# ---------------------------------------------------------------------------
# Ordered probit
# ---------------------------------------------------------------------------

class TestOrderedProbit:
    def test_recovers_design_parameters(self):
        data = generate(DgpSpec(family=DgpFamily.ORDINAL, n=4000, seed=21)).dataset
        fit = fit_propensity(data, PropensityConfig())
        truth = np.array([0.0, 1.0, 1.0, 1.0])
        se = _opg_se(fit.scores)
        assert np.all(np.abs(fit.alpha_hat - truth) < 4.0 * se)
        assert fit.param_labels == ["kappa[const]", "kappa[x2]", "kappa[x3]", "tau2"]

    def test_irrelevant_covariate_near_zero(self, ordinal_sample):
        data = ordinal_sample.dataset
        noise = np.random.default_rng(4).standard_normal(data.n)
        x = np.column_stack([data.x, noise])
        spec = OrderedProbitSpec(x=x, n_treatments=2)
        fit = fit_ordered_probit(spec, data.d)
        assert abs(fit.alpha_hat[3]) < 4.0 * _opg_se(fit.scores)[3]

    def test_fit_invariants(self, ordinal_fit):
        assert ordinal_fit.probs.sum(axis=1) == pytest.approx(1.0, abs=1e-10)
        assert np.all((ordinal_fit.probs > 0.0) & (ordinal_fit.probs < 1.0))
        assert np.max(np.abs(ordinal_fit.scores.mean(axis=0))) <= 1e-6
        assert ordinal_fit.converged
        assert ordinal_fit.indices.shape == (ordinal_fit.probs.shape[0], 1)

    def test_thresholds_ordered(self, ordinal_fit):
        assert ordinal_fit.alpha_hat[3] > 0.0

    def test_scores_match_finite_differences(self, ordinal_sample, ordinal_fit):
        model = ordinal_fit.model
        numeric = central_difference(model.loglik_obs, ordinal_fit.alpha_hat, rel_step=1e-6)
        assert np.max(np.abs(numeric - ordinal_fit.scores)) <= 1e-5

    def test_binary_case_is_probit(self):
        rng = np.random.default_rng(6)
        n = 1500
        x = np.column_stack([np.ones(n), rng.standard_normal(n)])
        d = (x @ np.array([0.3, 0.8]) + rng.standard_normal(n) > 0).astype(int)
        fit = fit_ordered_probit(OrderedProbitSpec(x=x, n_treatments=1), d)
        # textbook binary probit score (d - Phi) phi / (Phi (1 - Phi)) x
        s = x @ fit.alpha_hat
        p = norm.cdf(s)
        textbook = ((d - p) * norm.pdf(s) / (p * (1.0 - p)))[:, None] * x
        assert fit.scores == pytest.approx(textbook, abs=1e-10)
        assert np.max(np.abs(textbook.mean(axis=0))) < 1e-6

    def test_true_parameters_reproduce_cell_probabilities(self):
        spec = OrderedProbitSpec(x=np.array([[1.0, 0.0], [1.0, 1.0]]), n_treatments=2)
        model = OrderedProbitModel(spec, np.array([0, 2]))
        probs = model.probabilities(np.array([0.0, 1.0, 1.0]))
        assert probs[0, 0] == pytest.approx(0.5)
        assert probs[1, 2] == pytest.approx(0.5)
        assert probs[0, 2] == pytest.approx(1.0 - norm.cdf(1.0))

    def test_large_index_puts_mass_on_top_category(self):
        spec = OrderedProbitSpec(x=np.ones((1, 1)), n_treatments=2)
        model = OrderedProbitModel(spec, np.array([2]))
        assert model.probabilities(np.array([40.0, 1.0]))[0] == pytest.approx([0.0, 0.0, 1.0])

    def test_missing_category(self, ordinal_sample):
        data = ordinal_sample.dataset
        d = np.where(data.d == 2, 1, data.d)
        with pytest.raises(MissingCategory) as exc_info:
            fit_ordered_probit(OrderedProbitSpec(x=data.x, n_treatments=2), d)
        assert exc_info.value.category == 2

    def test_vanishing_probabilities_flag_separation(self):
        x = np.array([[-1.0], [-1.0], [1.0], [1.0]])
        d = np.array([0, 0, 1, 1])
        model = OrderedProbitModel(OrderedProbitSpec(x=x, n_treatments=1), d)
        with pytest.raises(SeparationSuspected):
            _finish_fit(PropensityKind.ORDERED_PROBIT, model, np.array([20.0]), 5, ["kappa"])

    def test_tail_row_keeps_well_conditioned_fit(self, ordinal_sample, caplog):
        data = ordinal_sample.dataset
        x = np.vstack([data.x, [1.0, 12.0, 0.0]])
        d = np.append(data.d, 2)
        with caplog.at_level("WARNING", logger="hetfx.propensity"):
            fit = fit_ordered_probit(OrderedProbitSpec(x=x, n_treatments=2), d)
        assert fit.converged
        assert np.min(fit.probs) < 1e-12
        assert fit.probs[-1, 2] == pytest.approx(1.0)
        assert "keeping the fit" in caplog.text

    def test_row_permutation_leaves_estimates_unchanged(self, ordinal_sample, ordinal_fit):
        data = ordinal_sample.dataset
        order = np.random.default_rng(8).permutation(data.n)
        spec = OrderedProbitSpec(x=data.x[order], n_treatments=2)
        fit = fit_ordered_probit(spec, data.d[order])
        assert fit.alpha_hat == pytest.approx(ordinal_fit.alpha_hat, abs=1e-6)
        assert fit.loglik == pytest.approx(ordinal_fit.loglik, rel=1e-10)

    def test_cumulative_probabilities_monotone(self, ordinal_fit):
        cumulative = np.cumsum(ordinal_fit.probs, axis=1)
        assert np.all(np.diff(cumulative, axis=1) >= 0.0)
        # P(D <= j | X) falls as the index rises
        order = np.argsort(ordinal_fit.indices[:, 0])
        assert np.all(np.diff(cumulative[order, :-1], axis=0) <= 1e-12)


# ---------------------------------------------------------------------------
# Multinomial logit
# ---------------------------------------------------------------------------

class TestMultinomialLogit:
    def test_recovers_design_parameters(self, multinomial_sample):
        data = multinomial_sample.dataset
        config = PropensityConfig(kind=PropensityKind.MNL, mnl_layout=MNL_LAYOUT)
        fit = fit_propensity(data, config)
        se = _opg_se(fit.scores)
        assert np.all(np.abs(fit.alpha_hat - MNL_ALPHA) < 4.0 * se)
        assert fit.indices.shape == (data.n, 2)

    def test_zero_index_gives_uniform_probabilities(self, ordinal_sample):
        data = ordinal_sample.dataset
        spec = MnlSpec.from_tokens(data.x, data.x_labels, 2, [["0"], ["0"]])
        fit = fit_mnl(spec, data.d)
        assert fit.probs == pytest.approx(np.full((data.n, 3), 1.0 / 3.0))

    def test_binary_case_is_logit(self):
        rng = np.random.default_rng(7)
        n = 1500
        x = np.column_stack([np.ones(n), rng.standard_normal(n)])
        d = (rng.random(n) < expit(x @ np.array([-0.2, 1.1]))).astype(int)
        spec = MnlSpec.from_tokens(x, ["const", "x1"], 1, [["const", "x1"]])
        fit = fit_mnl(spec, d)
        p = expit(x @ fit.alpha_hat)
        assert np.max(np.abs(((d - p)[:, None] * x).mean(axis=0))) < 1e-6
        assert fit.probs[:, 1] == pytest.approx(p, abs=1e-12)

    def test_information_matches_score_derivative(self, multinomial_sample):
        data = multinomial_sample.dataset
        config = PropensityConfig(kind=PropensityKind.MNL, mnl_layout=MNL_LAYOUT)
        fit = fit_propensity(data, config)
        model = fit.model
        numeric = central_difference(lambda a: model.scores(a).mean(axis=0), fit.alpha_hat)
        assert -numeric == pytest.approx(model.information(fit.alpha_hat), abs=1e-6)

    def test_alternative_specific_default(self, ordinal_sample):
        fit = fit_propensity(ordinal_sample.dataset, PropensityConfig(kind=PropensityKind.MNL))
        assert fit.n_params == 6

    def test_layout_must_name_known_covariates(self, ordinal_sample):
        data = ordinal_sample.dataset
        with pytest.raises(InvalidConfig):
            MnlSpec.from_tokens(data.x, data.x_labels, 2, [["x9"], ["x2"]])

    def test_layout_needs_one_row_per_alternative(self, ordinal_sample):
        data = ordinal_sample.dataset
        with pytest.raises(InvalidConfig):
            MnlSpec.from_tokens(data.x, data.x_labels, 2, [["x2"]])


# ---------------------------------------------------------------------------
# Accessors
# ---------------------------------------------------------------------------

class TestAccessors:
    def test_category_probs(self, ordinal_fit):
        assert category_probs(ordinal_fit, 1) == pytest.approx(ordinal_fit.probs[:, 1])
        with pytest.raises(BadCategory):
            category_probs(ordinal_fit, 3)

    def test_equal_probabilities_give_one_half(self):
        probs = np.tile([0.3, 0.3, 0.4], (5, 1))
        assert pairwise_from_probs(probs, 1) == pytest.approx(np.full(5, 0.5))

    def test_vanishing_control_probability(self):
        probs = np.array([[1e-9, 0.5, 0.5 - 1e-9]])
        assert pairwise_from_probs(probs, 1)[0] == pytest.approx(1.0, abs=1e-8)

    def test_binary_x_design_closed_form(self, binary_x_sample):
        fit = known_propensity(binary_x_sample.true_probs)
        pi = pairwise_propensity(fit, 1)
        x2 = binary_x_sample.dataset.x[:, 1]
        expected = (norm.cdf(2.0) - 0.5) / norm.cdf(2.0)
        assert pi[x2 == 0.0] == pytest.approx(expected)

    def test_degenerate_denominator(self):
        probs = np.array([[0.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
        with pytest.raises(DegenerateDenominator):
            pairwise_from_probs(probs, 1)
        masked = pairwise_from_probs(probs, 1, mask=np.array([False, True]))
        assert masked.tolist() == [0.5, 0.5]

    def test_target_out_of_range(self, ordinal_fit):
        with pytest.raises(BadCategory):
            pairwise_propensity(ordinal_fit, 0)

    def test_score_vectors(self, ordinal_fit):
        assert score_vectors(ordinal_fit).shape == (ordinal_fit.probs.shape[0], 4)

    def test_known_propensity_has_no_parameters(self, binary_x_sample):
        fit = known_propensity(binary_x_sample.true_probs)
        assert fit.n_params == 0
        assert fit.kind == PropensityKind.KNOWN
        with pytest.raises(InvalidConfig):
            fit_propensity(binary_x_sample.dataset, PropensityConfig(kind=PropensityKind.KNOWN))


@pytest.mark.slow
class TestParameterRecovery:
    @pytest.mark.parametrize(
        ("family", "truth"),
        [
            (DgpFamily.ORDINAL, np.array([0.0, 1.0, 1.0, 1.0])),
            (DgpFamily.MULTINOMIAL, MNL_ALPHA),
        ],
    )
    def test_repeated_fits_cover_truth(self, family, truth):
        reps = 200
        z = np.empty((reps, truth.shape[0]))
        for r in range(reps):
            spec = DgpSpec(family=family, n=4000, seed=1000 + r)
            fit = fit_propensity(generate(spec).dataset, estimator_config(spec))
            z[r] = (fit.alpha_hat - truth) / _opg_se(fit.scores)
        within_three = np.mean(np.abs(z) < 3.0, axis=0)
        coverage = np.mean(np.abs(z) < 1.96, axis=0)
        assert np.all(within_three >= 0.95)
        assert np.all((coverage >= 0.90) & (coverage <= 0.98))
