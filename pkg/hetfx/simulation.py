"""Simulation designs and the Monte Carlo harness.

Ordinal designs draw D from thresholds (0, 1) on a latent index; the
multinomial ones draw D from logit or absolute-value choice probabilities.
Untreated outcomes are linear in X with N(0, 1) noise and the effect of
category d is d times one covariate, so mu_d(X) is known exactly.

Each repetition runs on its own random stream, so a report depends only
on (design, seed, reps), never on the number of workers.
"""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, parallel_config
from scipy.special import softmax
from scipy.stats import chi2, norm

from .contamination import conditional_cov, theorem1_estimand, theorem1_weights, usual_ols_fit
from .errors import (
    REPLICATE_FAILURES,
    ExcessFailures,
    InvalidConfig,
    InvalidSpecCombination,
)
from .estimators import estimate_subsample, ow_target, overlap_weights
from .inference import asy_variance
from .models import (
    CenteringVariant,
    Dataset,
    DemoReport,
    DgpFamily,
    DgpSpec,
    ErrorDist,
    MonteCarloReport,
    MonteCarloRow,
    PropensityConfig,
    PropensityKind,
    SimTable,
    SimulatedSample,
    TargetSource,
)
from .propensity import fit_propensity, known_propensity
from .streams import task_rng

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Design constants
# ---------------------------------------------------------------------------

THRESHOLDS = np.array([0.0, 1.0])

# Binary-X ordinal design
P_X2_ONE = 0.7
BINARY_X_ERROR_SD = 0.5

# Multinomial design: W_1 = (-x0, x1, 0, x3, 0), W_2 = (-x0, 0, x2, 0, x3)
MNL_ALPHA = np.array([1.0, 1.0, 1.0, 1.0, 2.0])
MNL_LAYOUT: list[list[str]] = [
    ["-x0", "x1", "0", "x3", "0"],
    ["-x0", "0", "x2", "0", "x3"],
]

MAX_FAILURE_RATE = 0.02
COVERAGE_Z = float(norm.ppf(0.975))
DEFAULT_REPS = 500
FULL_REPS = 5000
FULL_SIZES = (1000, 4000)

PANELS: dict[SimTable, dict[int, tuple[DgpFamily, ErrorDist, bool]]] = {
    SimTable.ORDINAL: {
        1: (DgpFamily.ORDINAL, ErrorDist.NORMAL, False),
        2: (DgpFamily.ORDINAL, ErrorDist.CHI3, False),
        3: (DgpFamily.ORDINAL, ErrorDist.NORMAL, True),
        4: (DgpFamily.ORDINAL, ErrorDist.CHI3, True),
    },
    SimTable.MULTINOMIAL: {
        1: (DgpFamily.MULTINOMIAL, ErrorDist.NORMAL, False),
        2: (DgpFamily.MULTINOMIAL_ABS, ErrorDist.NORMAL, False),
        3: (DgpFamily.MULTINOMIAL, ErrorDist.NORMAL, True),
        4: (DgpFamily.MULTINOMIAL_ABS, ErrorDist.NORMAL, True),
    },
}


def panel_spec(table: SimTable, panel: int, n: int, seed: int) -> DgpSpec:
    try:
        family, error_dist, misspec = PANELS[table][panel]
    except KeyError:
        raise InvalidSpecCombination(f"no panel {panel} in the {table.value} table") from None
    return DgpSpec(
        family=family, error_dist=error_dist, regression_misspec=misspec, n=n, seed=seed
    )


def estimator_config(spec: DgpSpec) -> PropensityConfig:
    """Treatment model fitted to a design; misspecified panels still fit the base index."""
    if spec.propensity_kind == PropensityKind.MNL:
        return PropensityConfig(kind=PropensityKind.MNL, mnl_layout=MNL_LAYOUT)
    return PropensityConfig(kind=PropensityKind.ORDERED_PROBIT)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def standardize_chi3(raw: np.ndarray) -> np.ndarray:
    """Chi-square(3) draws rescaled to mean 0 and SD 1."""
    return (np.asarray(raw, dtype=float) - 3.0) / np.sqrt(6.0)


def _chi3_cdf(e: np.ndarray) -> np.ndarray:
    return chi2.cdf(3.0 + np.sqrt(6.0) * e, df=3)


def _ordinal_probs(index: np.ndarray, cdf) -> np.ndarray:
    """P(D = j) = F(c_{j+1} - index) - F(c_j - index) over thresholds (0, 1)."""
    cuts = np.concatenate([[-np.inf], THRESHOLDS, [np.inf]])
    cum = cdf(cuts[None, :] - index[:, None])
    return np.diff(cum, axis=1)


def _outcomes(
    rng: np.random.Generator, baseline: np.ndarray, effect: np.ndarray, d: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Y0 = baseline + U, Y^j = Y0 + j * effect; returns (Y, Y0, mu)."""
    y0 = baseline + rng.standard_normal(baseline.shape[0])
    mu = np.column_stack([effect, 2.0 * effect])
    treated = np.where(d > 0, mu[np.arange(d.shape[0]), np.maximum(d - 1, 0)], 0.0)
    return y0 + treated, y0, mu


def _draw_categories(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)[:, :-1]
    return (u[:, None] > cum).sum(axis=1)


def _ordinal_binary_x(n: int, rng: np.random.Generator) -> SimulatedSample:
    x2 = (rng.random(n) < P_X2_ONE).astype(float)
    eps = BINARY_X_ERROR_SD * rng.standard_normal(n)
    index = x2
    latent = index + eps
    d = (latent >= THRESHOLDS[0]).astype(np.int64) + (latent >= THRESHOLDS[1])
    probs = _ordinal_probs(index, lambda e: norm.cdf(e / BINARY_X_ERROR_SD))
    y, y0, mu = _outcomes(rng, 1.0 + x2, x2, d)
    dataset = Dataset(
        y=y, d=d, x=np.column_stack([np.ones(n), x2]), n_treatments=2,
        x_labels=["const", "x2"],
    )
    return SimulatedSample(
        dataset=dataset, true_probs=probs, true_mu=mu, y0=y0, true_indices=index[:, None]
    )


def _ordinal(
    n: int, rng: np.random.Generator, error_dist: ErrorDist, misspec: bool
) -> SimulatedSample:
    x2 = rng.standard_normal(n)
    x3 = 2.0 * rng.random(n)
    if error_dist == ErrorDist.CHI3:
        eps = standardize_chi3(np.sum(rng.standard_normal((n, 3)) ** 2, axis=1))
        cdf = _chi3_cdf
    else:
        eps = rng.standard_normal(n)
        cdf = norm.cdf
    index = x2 + x3
    if misspec:
        index = index + x2**2
    latent = index + eps
    d = (latent >= THRESHOLDS[0]).astype(np.int64) + (latent >= THRESHOLDS[1])
    probs = _ordinal_probs(index, cdf)
    y, y0, mu = _outcomes(rng, 1.0 + x2 + x3, x3, d)
    dataset = Dataset(
        y=y, d=d, x=np.column_stack([np.ones(n), x2, x3]), n_treatments=2,
        x_labels=["const", "x2", "x3"],
    )
    return SimulatedSample(
        dataset=dataset, true_probs=probs, true_mu=mu, y0=y0, true_indices=index[:, None]
    )


def _multinomial(
    n: int, rng: np.random.Generator, absolute: bool, misspec: bool
) -> SimulatedSample:
    x0, x1, x2 = rng.standard_normal((3, n))
    x3 = 2.0 * rng.random(n)
    if misspec:
        # e^{x3} enters both alternatives with slope 2 and is absent from the fitted W
        v1 = -x0 + x1 + x3 + 2.0 * np.exp(x3)
        v2 = -x0 + x2 + x3 + 2.0 * np.exp(x3)
    else:
        v1 = -x0 + x1 + MNL_ALPHA[3] * x3
        v2 = -x0 + x2 + MNL_ALPHA[4] * x3
    v = np.column_stack([v1, v2])
    if absolute:
        weights = np.column_stack([np.ones(n), np.abs(v)])
        probs = weights / weights.sum(axis=1, keepdims=True)
    else:
        probs = softmax(np.column_stack([np.zeros(n), v]), axis=1)
    d = _draw_categories(rng, probs)
    y, y0, mu = _outcomes(rng, 1.0 + x3, x3, d)
    dataset = Dataset(
        y=y, d=d, x=np.column_stack([np.ones(n), x0, x1, x2, x3]), n_treatments=2,
        x_labels=["const", "x0", "x1", "x2", "x3"],
    )
    return SimulatedSample(dataset=dataset, true_probs=probs, true_mu=mu, y0=y0, true_indices=v)


def generate(spec: DgpSpec, rng: np.random.Generator | None = None) -> SimulatedSample:
    """Draw one sample of size spec.n, using the seed's first stream by default."""
    rng = rng if rng is not None else task_rng(spec.seed, 0)
    if spec.family == DgpFamily.ORDINAL_BINARY_X:
        return _ordinal_binary_x(spec.n, rng)
    if spec.family == DgpFamily.ORDINAL:
        return _ordinal(spec.n, rng, spec.error_dist, spec.regression_misspec)
    return _multinomial(
        spec.n, rng, spec.family == DgpFamily.MULTINOMIAL_ABS, spec.regression_misspec
    )


def sample_frame(sample: SimulatedSample) -> pd.DataFrame:
    """One generated sample as a table: y, d, covariates, true P_j and mu_j."""
    data = sample.dataset
    frame = pd.DataFrame({"y": data.y, "d": data.d})
    for k, label in enumerate(data.x_labels):
        if label != "const":
            frame[label] = data.x[:, k]
    for j in range(sample.true_probs.shape[1]):
        frame[f"p{j}"] = sample.true_probs[:, j]
    for j in range(sample.true_mu.shape[1]):
        frame[f"mu{j + 1}"] = sample.true_mu[:, j]
    return frame


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def _one_repetition(
    spec: DgpSpec,
    variants: list[CenteringVariant],
    targets: list[int],
    target_source: TargetSource,
    index: int,
) -> np.ndarray | None:
    """(beta_hat, asy_sd, target) for every (variant, d), or None if the repetition failed."""
    out = np.empty((3, len(variants), len(targets)))
    try:
        sample = generate(spec, task_rng(spec.seed, index))
        data = sample.dataset
        fit = fit_propensity(data, estimator_config(spec))
        if target_source == TargetSource.ESTIMATED:
            weight_fit = fit
        else:
            weight_fit = known_propensity(sample.true_probs, sample.true_indices)
        for di, d in enumerate(targets):
            target = ow_target(overlap_weights(weight_fit, d), sample.true_mu[:, d - 1])
            for vi, variant in enumerate(variants):
                est = estimate_subsample(data, fit, d, variant)
                out[0, vi, di] = est.beta_hat
                out[1, vi, di] = asy_variance(est, fit, data).asy_sd
                out[2, vi, di] = target
    except REPLICATE_FAILURES as exc:
        logger.warning("Repetition %d dropped: %s", index, exc)
        return None
    return out


def run_monte_carlo(
    spec: DgpSpec,
    variants: list[CenteringVariant],
    reps: int,
    n_jobs: int = 1,
    target_source: TargetSource = TargetSource.TRUE,
    panel: int = 0,
    targets: list[int] | None = None,
) -> MonteCarloReport:
    """Repeat generate -> fit -> estimate -> variance and summarize the errors.

    Bias is measured against the overlap-weighted mean of the true mu_d in
    each sample. Repetitions that fail numerically are dropped and counted.
    """
    if reps < 2:
        raise InvalidConfig(f"a Monte Carlo run needs at least 2 repetitions, got {reps}")
    targets = targets or [1, 2]
    logger.info(
        "Monte Carlo: %s (%s, misspec=%s), n=%d, %d reps, seed %d",
        spec.family.value, spec.error_dist.value, spec.regression_misspec,
        spec.n, reps, spec.seed,
    )
    # one BLAS thread per worker; reports must not depend on n_jobs
    with parallel_config(backend="loky", inner_max_num_threads=1):
        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_repetition)(spec, variants, targets, target_source, r)
            for r in range(reps)
        )
    kept = [r for r in results if r is not None]
    failed = reps - len(kept)
    if failed > MAX_FAILURE_RATE * reps or len(kept) < 2:
        raise ExcessFailures(failed, reps, MAX_FAILURE_RATE)
    if failed:
        logger.warning("%d of %d repetitions dropped", failed, reps)

    stacked = np.stack(kept)
    errors = stacked[:, 0] - stacked[:, 2]
    covered = np.abs(errors) <= COVERAGE_Z * stacked[:, 1]
    rows: list[MonteCarloRow] = []
    for di, d in enumerate(targets):
        for vi, variant in enumerate(variants):
            e = errors[:, vi, di]
            rows.append(MonteCarloRow(
                estimator=f"{variant.symbol}_{d}",
                variant=variant.kind,
                d=d,
                abs_bias=float(abs(e.mean())),
                sim_sd=float(e.std()),
                avg_asy_sd=float(stacked[:, 1, vi, di].mean()),
                rmse=float(np.sqrt(np.mean(e**2))),
                coverage=float(covered[:, vi, di].mean()),
            ))

    mnl = spec.propensity_kind == PropensityKind.MNL
    table = SimTable.MULTINOMIAL if mnl else SimTable.ORDINAL
    return MonteCarloReport(
        table=table,
        panel=panel,
        family=spec.family,
        error_dist=spec.error_dist,
        regression_misspec=spec.regression_misspec,
        n=spec.n,
        reps=reps,
        n_failed=failed,
        seed=spec.seed,
        target_source=target_source,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# The usual-OLS demonstration
# ---------------------------------------------------------------------------

def usual_ols_demo(n: int = 1_000_000, seed: int = 0) -> DemoReport:
    """OLS of Y on (1, D1, D2, X2) in the binary-X design next to what it estimates.

    The estimand uses contamination weights built from the exact category
    probabilities of each observation's cell.
    """
    sample = generate(DgpSpec(family=DgpFamily.ORDINAL_BINARY_X, n=n, seed=seed))
    data = sample.dataset
    ols = usual_ols_fit(data)
    labels = ["const", "D1", "D2", "x2"]
    order = [ols.column_labels.index(label) for label in labels]

    weights = theorem1_weights(conditional_cov(data, cell_probs=sample.true_probs))
    estimand = theorem1_estimand(weights, sample.true_mu)

    naive = [1.0, P_X2_ONE, 2.0 * P_X2_ONE, 1.0]
    coef = [float(ols.coef[k]) for k in order]
    logger.info("Usual OLS on n=%d: D slopes %.4f, %.4f", n, coef[1], coef[2])
    return DemoReport(
        n=n,
        seed=seed,
        labels=labels,
        ols_coef=coef,
        ols_t_values=[float(ols.t_values[k]) for k in order],
        estimand=[float(v) for v in estimand],
        naive_target=naive,
        contamination_gap=[abs(coef[1] - naive[1]), abs(coef[2] - naive[2])],
    )
