"""Treatment models fitted by maximum likelihood.

Ordered probit: P(D = j | X) = Phi(tau_{j+1} - X'kappa) - Phi(tau_j - X'kappa)
with tau_0 = -inf, tau_1 = 0, tau_{J+1} = +inf. Thresholds stay ordered by
optimizing over log-gaps.

Multinomial logit: P(D = j | X) = exp(W_j'alpha) / (1 + sum_l exp(W_l'alpha)),
the base category contributing the 1.

Both are maximized with scipy's trust-region Newton method and report
per-observation analytic scores at the optimum.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax
from scipy.stats import norm

from .errors import (
    BadCategory,
    DegenerateDenominator,
    InvalidConfig,
    MissingCategory,
    Nonconvergence,
    SeparationSuspected,
)
from .models import (
    Dataset,
    MnlSpec,
    OrderedProbitSpec,
    PropensityConfig,
    PropensityFit,
    PropensityKind,
)
from .regression import central_difference, make_dummies

logger = logging.getLogger(__name__)

# Floor applied inside log-likelihood evaluations only.
PROB_FLOOR = 1e-300

# Fitted probabilities below this are suspect.
# Also the floor for score outer product eigenvalues.
SEPARATION_TOL = 1e-12

# Score outer product condition number beyond which the fit is treated as diverging.
MAX_CONDITION = 1e12

# Max |mean score| accepted at the optimum.
SCORE_TOL = 1e-6

MAX_ITERATIONS = 200


def _check_categories(d: np.ndarray, n_treatments: int) -> np.ndarray:
    counts = np.bincount(d, minlength=n_treatments + 1)
    missing = np.flatnonzero(counts[: n_treatments + 1] == 0)
    if missing.size:
        raise MissingCategory(int(missing[0]))
    return counts


# ---------------------------------------------------------------------------
# Ordered probit
# ---------------------------------------------------------------------------

def _interval_prob(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Phi(hi) - Phi(lo), using survival functions in the upper tail."""
    upper = lo > 0
    return np.where(
        upper,
        norm.sf(lo) - norm.sf(hi),
        norm.cdf(hi) - norm.cdf(lo),
    )


class OrderedProbitModel:
    """Ordered probit likelihood in the identified parameterization.

    alpha = (kappa over the x columns, tau_2, ..., tau_J).
    """

    def __init__(self, spec: OrderedProbitSpec, d: np.ndarray):
        self.x = np.asarray(spec.x, dtype=float)
        self.d = np.asarray(d, dtype=np.int64)
        self.n_treatments = spec.n_treatments
        self.n_kappa = self.x.shape[1]

    def cutpoints(self, alpha: np.ndarray) -> np.ndarray:
        return np.concatenate([[-np.inf, 0.0], alpha[self.n_kappa:], [np.inf]])

    def indices(self, alpha: np.ndarray) -> np.ndarray:
        return (self.x @ alpha[: self.n_kappa])[:, None]

    def probabilities(self, alpha: np.ndarray) -> np.ndarray:
        s = self.x @ alpha[: self.n_kappa]
        z = self.cutpoints(alpha)[None, :] - s[:, None]
        return _interval_prob(z[:, :-1], z[:, 1:])

    def _observed_bounds(self, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.x @ alpha[: self.n_kappa]
        cuts = self.cutpoints(alpha)
        return cuts[self.d] - s, cuts[self.d + 1] - s

    def observed_probs(self, alpha: np.ndarray) -> np.ndarray:
        lo, hi = self._observed_bounds(alpha)
        return _interval_prob(lo, hi)

    def loglik_obs(self, alpha: np.ndarray) -> np.ndarray:
        return np.log(np.maximum(self.observed_probs(alpha), PROB_FLOOR))

    def scores(self, alpha: np.ndarray) -> np.ndarray:
        lo, hi = self._observed_bounds(alpha)
        p = np.maximum(_interval_prob(lo, hi), PROB_FLOOR)
        phi_lo = norm.pdf(lo)
        phi_hi = norm.pdf(hi)

        grad_kappa = -((phi_hi - phi_lo) / p)[:, None] * self.x
        grad_tau = np.zeros((self.d.shape[0], self.n_treatments - 1))
        for m in range(2, self.n_treatments + 1):
            grad_tau[:, m - 2] = (
                phi_hi * (self.d + 1 == m) - phi_lo * (self.d == m)
            ) / p
        return np.hstack([grad_kappa, grad_tau])

    # -- log-gap reparameterization ------------------------------------

    def alpha_from_theta(self, theta: np.ndarray) -> np.ndarray:
        gaps = np.exp(theta[self.n_kappa:])
        return np.concatenate([theta[: self.n_kappa], np.cumsum(gaps)])

    def theta_gradient(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the mean log-likelihood with respect to theta."""
        alpha = self.alpha_from_theta(theta)
        g_alpha = self.scores(alpha).mean(axis=0)
        g_kappa = g_alpha[: self.n_kappa]
        g_tau = g_alpha[self.n_kappa:]
        # tau_m depends on every gap l <= m
        g_gaps = np.cumsum(g_tau[::-1])[::-1] * np.exp(theta[self.n_kappa:])
        return np.concatenate([g_kappa, g_gaps])

    def start(self, constant_col: int | None) -> np.ndarray:
        """Starting theta matching the marginal category frequencies."""
        counts = np.bincount(self.d, minlength=self.n_treatments + 1)
        cumulative = np.cumsum(counts)[:-1] / self.d.shape[0]
        z = norm.ppf(cumulative)
        kappa = np.zeros(self.n_kappa)
        if constant_col is not None:
            kappa[constant_col] = -z[0]
        return np.concatenate([kappa, np.log(np.diff(z))])


def _constant_column(x: np.ndarray) -> int | None:
    for k in range(x.shape[1]):
        if np.all(x[:, k] == 1.0):
            return k
    return None


def _diverging(scores: np.ndarray) -> bool:
    """True when the score outer product is vanishing or ill conditioned."""
    outer = scores.T @ scores / scores.shape[0]
    eig = np.linalg.eigvalsh(outer)
    if not np.all(np.isfinite(eig)) or eig[0] <= SEPARATION_TOL:
        return True
    return bool(eig[-1] / eig[0] > MAX_CONDITION)


def _finish_fit(
    kind: PropensityKind,
    model: OrderedProbitModel | MultinomialLogitModel,
    alpha: np.ndarray,
    iterations: int,
    param_labels: list[str],
) -> PropensityFit:
    scores = model.scores(alpha)
    gradnorm = float(np.max(np.abs(scores.mean(axis=0)))) if scores.size else 0.0
    if not np.all(np.isfinite(alpha)) or gradnorm > SCORE_TOL:
        raise Nonconvergence(iterations, gradnorm)

    probs = model.probabilities(alpha)
    if np.min(probs) < SEPARATION_TOL:
        row, category = np.unravel_index(int(np.argmin(probs)), probs.shape)
        detail = (
            f"fitted probability of category {category} is {probs[row, category]:.3g} "
            f"at row {row}"
        )
        if _diverging(scores):
            raise SeparationSuspected(detail)
        logger.warning("%s; information is well conditioned, keeping the fit", detail)

    loglik = float(model.loglik_obs(alpha).sum())
    logger.info(
        "%s converged in %d iterations (loglik %.4f, max |mean score| %.2e)",
        kind.value, iterations, loglik, gradnorm,
    )
    return PropensityFit(
        kind=kind,
        alpha_hat=alpha,
        probs=probs,
        indices=model.indices(alpha),
        scores=scores,
        loglik=loglik,
        converged=True,
        iterations=iterations,
        param_labels=param_labels,
        model=model,
    )


def fit_ordered_probit(spec: OrderedProbitSpec, d: np.ndarray) -> PropensityFit:
    """Maximum likelihood ordered probit with sigma = 1 and tau_1 = 0."""
    d = np.asarray(d, dtype=np.int64)
    _check_categories(d, spec.n_treatments)
    model = OrderedProbitModel(spec, d)

    def objective(theta: np.ndarray) -> float:
        return -float(model.loglik_obs(model.alpha_from_theta(theta)).mean())

    def gradient(theta: np.ndarray) -> np.ndarray:
        return -model.theta_gradient(theta)

    def hessian(theta: np.ndarray) -> np.ndarray:
        h = central_difference(gradient, theta)
        return 0.5 * (h + h.T)

    result = minimize(
        objective,
        model.start(_constant_column(model.x)),
        jac=gradient,
        hess=hessian,
        method="trust-exact",
        options={"gtol": 1e-10, "maxiter": MAX_ITERATIONS},
    )
    logger.debug("ordered probit optimizer: %s", result.message)
    alpha = model.alpha_from_theta(result.x)
    return _finish_fit(
        PropensityKind.ORDERED_PROBIT, model, alpha, int(result.nit), spec.param_labels()
    )


# ---------------------------------------------------------------------------
# Multinomial logit
# ---------------------------------------------------------------------------

class MultinomialLogitModel:
    """MNL likelihood with index W_j'alpha for j = 1..J and 0 for category 0."""

    def __init__(self, spec: MnlSpec, d: np.ndarray):
        self.w = spec.w_tensor()
        self.d = np.asarray(d, dtype=np.int64)
        self.n_treatments = spec.n_treatments
        self.dummies = make_dummies(self.d, spec.n_treatments)

    def indices(self, alpha: np.ndarray) -> np.ndarray:
        return np.einsum("njk,k->nj", self.w, alpha)

    def _utilities(self, alpha: np.ndarray) -> np.ndarray:
        v = self.indices(alpha)
        return np.hstack([np.zeros((v.shape[0], 1)), v])

    def probabilities(self, alpha: np.ndarray) -> np.ndarray:
        return softmax(self._utilities(alpha), axis=1)

    def observed_probs(self, alpha: np.ndarray) -> np.ndarray:
        return self.probabilities(alpha)[np.arange(self.d.shape[0]), self.d]

    def loglik_obs(self, alpha: np.ndarray) -> np.ndarray:
        return log_softmax(self._utilities(alpha), axis=1)[np.arange(self.d.shape[0]), self.d]

    def scores(self, alpha: np.ndarray) -> np.ndarray:
        resid = self.dummies - self.probabilities(alpha)[:, 1:]
        return np.einsum("nj,njk->nk", resid, self.w)

    def information(self, alpha: np.ndarray) -> np.ndarray:
        """Negative Hessian of the mean log-likelihood."""
        p = self.probabilities(alpha)[:, 1:]
        n = p.shape[0]
        pw = np.einsum("nj,njk->nk", p, self.w)
        outer = np.einsum("nj,njk,njl->kl", p, self.w, self.w) / n
        return outer - pw.T @ pw / n


def fit_mnl(spec: MnlSpec, d: np.ndarray) -> PropensityFit:
    """Maximum likelihood multinomial logit started from alpha = 0."""
    d = np.asarray(d, dtype=np.int64)
    _check_categories(d, spec.n_treatments)
    model = MultinomialLogitModel(spec, d)

    result = minimize(
        lambda a: -float(model.loglik_obs(a).mean()),
        np.zeros(spec.alpha_len),
        jac=lambda a: -model.scores(a).mean(axis=0),
        hess=model.information,
        method="trust-exact",
        options={"gtol": 1e-10, "maxiter": MAX_ITERATIONS},
    )
    logger.debug("mnl optimizer: %s", result.message)
    labels = [f"alpha{k + 1}" for k in range(spec.alpha_len)]
    return _finish_fit(PropensityKind.MNL, model, result.x, int(result.nit), labels)


# ---------------------------------------------------------------------------
# Dispatch and accessors
# ---------------------------------------------------------------------------

def fit_propensity(dataset: Dataset, config: PropensityConfig) -> PropensityFit:
    """Fit the configured treatment model on all observations of ``dataset``."""
    if config.kind == PropensityKind.ORDERED_PROBIT:
        spec = OrderedProbitSpec(
            x=dataset.x, n_treatments=dataset.n_treatments, x_labels=dataset.x_labels
        )
        return fit_ordered_probit(spec, dataset.d)
    if config.kind == PropensityKind.MNL:
        if config.mnl_layout:
            mnl = MnlSpec.from_tokens(
                dataset.x, dataset.x_labels, dataset.n_treatments, config.mnl_layout
            )
        else:
            mnl = MnlSpec.alternative_specific(
                dataset.x, dataset.x_labels, dataset.n_treatments
            )
        return fit_mnl(mnl, dataset.d)
    raise InvalidConfig(f"cannot fit a {config.kind.value} propensity model from data")


def known_propensity(probs: np.ndarray, indices: np.ndarray | None = None) -> PropensityFit:
    """Zero-parameter fit carrying known category probabilities."""
    return PropensityFit.from_probabilities(probs, indices)


def category_probs(fit: PropensityFit, j: int) -> np.ndarray:
    """P_j(alpha_hat; X_i) for every observation."""
    if not 0 <= j <= fit.n_treatments:
        raise BadCategory(f"category {j} outside 0..{fit.n_treatments}")
    return fit.probs[:, j]


def pairwise_from_probs(
    probs: np.ndarray, d: int, mask: np.ndarray | None = None
) -> np.ndarray:
    """P_d / (P_0 + P_d) row by row.

    A denominator below SEPARATION_TOL on a ``mask`` row (any row without a
    mask) raises; elsewhere such rows get 0.5, since they never enter a
    subsample sum.
    """
    den = probs[:, 0] + probs[:, d]
    tiny = den < SEPARATION_TOL
    checked = tiny if mask is None else tiny & mask
    if checked.any():
        row = int(np.flatnonzero(checked)[0])
        raise DegenerateDenominator(
            f"P_0 + P_{d} = {den[row]:.3g} at row {row}; pairwise propensity undefined"
        )
    return np.divide(probs[:, d], den, out=np.full(den.shape, 0.5), where=~tiny)


def pairwise_propensity(
    fit: PropensityFit, d: int, mask: np.ndarray | None = None
) -> np.ndarray:
    """pi_X^d = P(D = d | X, D in {0, d}) for every observation."""
    if not 1 <= d <= fit.n_treatments:
        raise BadCategory(f"target category {d} outside 1..{fit.n_treatments}")
    return pairwise_from_probs(fit.probs, d, mask)


def score_vectors(fit: PropensityFit) -> np.ndarray:
    """Per-observation log-likelihood gradients at alpha_hat (N x len(alpha))."""
    return fit.scores
