"""Asymptotic and bootstrap inference for the subsample residual regression.

The estimate solves the sample moment

    m_i(b, a, g) = D0d_i * (Y_i - G_i(g, a) - b * eps_i(a)) * eps_i(a),

eps(a) = D_d - P_d(a) / (P_0(a) + P_d(a)), with a the treatment-model
parameter estimated on all N rows. Its influence on beta_hat is carried by
L = N^-1 sum dm_i/da' times eta_i = (N^-1 sum s s')^-1 s_i. The centering
coefficients g need no correction term.
"""

from __future__ import annotations

import logging

import numpy as np
from joblib import Parallel, delayed, parallel_config
from scipy.stats import chi2

from .errors import (
    REPLICATE_FAILURES,
    DimensionMismatch,
    ExcessFailures,
    InvalidConfig,
    SingularCovariance,
    SingularScoreOuterProduct,
)
from .estimators import centering_basis, estimate_subsample
from .models import (
    BootstrapResult,
    CenteringKind,
    CenteringVariant,
    CovarianceReport,
    Dataset,
    PropensityConfig,
    PropensityFit,
    SubsampleEstimate,
    VarianceReport,
)
from .propensity import fit_propensity, pairwise_from_probs
from .regression import central_difference
from .streams import task_rng

logger = logging.getLogger(__name__)

# Condition number beyond which N^-1 sum s s' is treated as singular.
MAX_CONDITION = 1e12

MIN_BOOTSTRAP_REPS = 100
BOOTSTRAP_FAILURE_WARN = 0.05


# ---------------------------------------------------------------------------
# Moment condition
# ---------------------------------------------------------------------------

def moment_fn(
    b: float,
    a: np.ndarray,
    g: np.ndarray,
    dataset: Dataset,
    fit: PropensityFit,
    d: int,
    variant: CenteringVariant,
    mask: np.ndarray,
) -> np.ndarray:
    """Per-observation moment m_i; zero for rows outside the subsample."""
    probs = fit.probabilities_at(a)
    eps = (dataset.d == d).astype(float) - pairwise_from_probs(probs, d, mask)
    indices = fit.indices_at(a) if variant.kind == CenteringKind.INDEX_POLY else None
    basis = centering_basis(dataset, variant, indices)
    resid = dataset.y - basis.columns @ g - b * eps
    return np.where(mask, resid * eps, 0.0)


def numeric_L(
    estimate: SubsampleEstimate, fit: PropensityFit, dataset: Dataset
) -> np.ndarray:
    """Central-difference derivative of the mean moment with respect to a."""
    if fit.n_params == 0:
        return np.zeros(0)

    def mean_moment(a: np.ndarray) -> float:
        m = moment_fn(
            estimate.beta_hat, a, estimate.gamma_hat, dataset, fit,
            estimate.d, estimate.variant, estimate.mask,
        )
        return float(m.mean())

    return central_difference(mean_moment, fit.alpha_hat)


# ---------------------------------------------------------------------------
# Influence terms
# ---------------------------------------------------------------------------

def _eta(fit: PropensityFit) -> np.ndarray:
    scores = fit.scores
    n = scores.shape[0]
    outer = scores.T @ scores / n
    if np.linalg.cond(outer) > MAX_CONDITION:
        raise SingularScoreOuterProduct(
            f"score outer product is singular (condition {np.linalg.cond(outer):.3g})"
        )
    return np.linalg.solve(outer, scores.T).T


def _influence(
    estimate: SubsampleEstimate,
    fit: PropensityFit,
    dataset: Dataset,
    eta: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray, np.ndarray]:
    mask = estimate.mask.astype(float)
    eps = estimate.psr
    v = estimate.centered_y - estimate.beta_hat * eps
    moment = mask * v * eps
    den = float(np.mean(mask * eps**2))

    if fit.n_params == 0:
        return moment, np.zeros(dataset.n), den, np.zeros(0), np.zeros((dataset.n, 0))
    if eta is None:
        eta = _eta(fit)
    L_hat = numeric_L(estimate, fit, dataset)
    return moment, eta @ L_hat, den, L_hat, eta


def asy_variance(
    estimate: SubsampleEstimate, fit: PropensityFit, dataset: Dataset
) -> VarianceReport:
    """Sandwich variance of beta_hat with the first-step correction.

    Sums run over all N rows: D0d zeroes the moment part off the subsample
    while the score-based correction uses every observation.
    """
    moment, correction, den, L_hat, eta = _influence(estimate, fit, dataset)
    n = dataset.n
    omega = float(np.mean((moment + correction) ** 2)) / den**2
    naive = float(np.mean(moment**2)) / den**2
    return VarianceReport(
        d=estimate.d,
        omega_hat=omega,
        asy_sd=float(np.sqrt(omega / n)),
        omega_naive=naive,
        naive_sd=float(np.sqrt(naive / n)),
        L_hat=L_hat,
        eta=eta,
        moment_term=moment,
        correction_term=correction,
    )


def asy_covariance(
    estimates: list[SubsampleEstimate],
    fit: PropensityFit,
    dataset: Dataset,
    null: np.ndarray | None = None,
) -> CovarianceReport:
    """Joint asymptotic covariance of several targets sharing one propensity fit.

    Also returns the Wald statistic for beta = ``null`` (default zero).
    """
    if not estimates:
        raise InvalidConfig("asy_covariance needs at least one estimate")
    eta = _eta(fit) if fit.n_params else None
    zetas = []
    dens = []
    for est in estimates:
        moment, correction, den, _, _ = _influence(est, fit, dataset, eta)
        zetas.append(moment + correction)
        dens.append(den)
    z = np.column_stack(zetas)
    dens_arr = np.asarray(dens)
    cov = (z.T @ z / dataset.n) / np.outer(dens_arr, dens_arr) / dataset.n
    cov = 0.5 * (cov + cov.T)

    beta = np.array([est.beta_hat for est in estimates])
    null = np.zeros_like(beta) if null is None else np.asarray(null, dtype=float)
    if null.shape != beta.shape:
        raise DimensionMismatch(
            f"Wald null has {null.shape[0]} entries for {beta.shape[0]} targets"
        )
    diff = beta - null
    try:
        wald = float(diff @ np.linalg.solve(cov, diff))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"joint covariance is singular: {exc}") from exc
    return CovarianceReport(
        targets=[est.d for est in estimates],
        beta=beta,
        cov_matrix=cov,
        wald=wald,
        wald_df=len(estimates),
        wald_pvalue=float(chi2.sf(wald, len(estimates))),
    )


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def _bootstrap_replicate(
    dataset: Dataset,
    config: PropensityConfig,
    d: int,
    variant: CenteringVariant,
    seed: int,
    index: int,
) -> float | None:
    rows = task_rng(seed, index).integers(0, dataset.n, dataset.n)
    try:
        sample = dataset.subset(rows)
        fit = fit_propensity(sample, config)
        return estimate_subsample(sample, fit, d, variant).beta_hat
    except REPLICATE_FAILURES as exc:
        logger.warning("Bootstrap replicate %d dropped: %s", index, exc)
        return None


def bootstrap_se(
    dataset: Dataset,
    config: PropensityConfig,
    d: int,
    variant: CenteringVariant,
    n_reps: int = 200,
    seed: int = 0,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Pairs bootstrap SD of beta_hat, refitting the treatment model each time."""
    if n_reps < MIN_BOOTSTRAP_REPS:
        raise InvalidConfig(
            f"bootstrap needs at least {MIN_BOOTSTRAP_REPS} replicates (got {n_reps})"
        )
    with parallel_config(backend="loky", inner_max_num_threads=1):
        results = Parallel(n_jobs=n_jobs)(
            delayed(_bootstrap_replicate)(dataset, config, d, variant, seed, i)
            for i in range(n_reps)
        )
    kept = np.array([r for r in results if r is not None])
    failed = n_reps - kept.shape[0]
    if failed > BOOTSTRAP_FAILURE_WARN * n_reps:
        logger.warning(
            "%d of %d bootstrap replicates failed (more than %.0f%%)",
            failed, n_reps, 100 * BOOTSTRAP_FAILURE_WARN,
        )
    if kept.shape[0] < 2:
        raise ExcessFailures(failed, n_reps, BOOTSTRAP_FAILURE_WARN)
    return BootstrapResult(
        se=float(np.std(kept, ddof=1)),
        replicates=kept,
        n_failed=failed,
        n_total=n_reps,
    )
