"""Subsample OLS on propensity-score residuals.

For target category d, only rows with D in {0, d} are used. Y is centered
by some function of X fit on that subsample (the raw variant subtracts the
full-sample mean of Y by default), then regressed without
intercept on the residual eps = D_d - pi^d(X), pi^d = P_d / (P_0 + P_d).
The estimand is the overlap-weighted average of mu_d(X) whatever the
centering; the centering only buys robustness to a misspecified
propensity model and efficiency.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import (
    BadCategory,
    DegenerateDenominator,
    DegeneratePsr,
    DimensionMismatch,
    EmptySubsampleSide,
    InvalidConfig,
)
from .models import (
    CenteringKind,
    CenteringVariant,
    Dataset,
    DesignMatrix,
    OverlapWeights,
    PropensityDiagnostics,
    PropensityFit,
    SubsampleEstimate,
)
from .propensity import pairwise_propensity
from .regression import fit_ols, poly_basis

logger = logging.getLogger(__name__)

# Propensities outside [EXTREME_LOW, EXTREME_HIGH] are counted in diagnostics.
EXTREME_LOW = 0.01
EXTREME_HIGH = 0.99

# max |eps| on the subsample below this means pi^d reproduces D exactly.
PSR_TOL = 1e-10


def subsample_mask(
    dataset: Dataset, d: int, support: np.ndarray | None = None
) -> np.ndarray:
    """Boolean mask of rows with D in {0, d}, optionally restricted to ``support``."""
    if not 1 <= d <= dataset.n_treatments:
        raise BadCategory(f"target category {d} outside 1..{dataset.n_treatments}")
    mask = (dataset.d == 0) | (dataset.d == d)
    if support is not None:
        support = np.asarray(support, dtype=bool)
        if support.shape != mask.shape:
            raise DimensionMismatch(
                f"support mask has {support.shape[0]} rows, expected {dataset.n}"
            )
        mask &= support
    for side in (0, d):
        if not np.any(mask & (dataset.d == side)):
            raise EmptySubsampleSide(
                f"no observations with D = {side} in the subsample for d = {d}"
            )
    return mask


# ---------------------------------------------------------------------------
# Centering
# ---------------------------------------------------------------------------

def centering_basis(
    dataset: Dataset,
    variant: CenteringVariant,
    indices: np.ndarray | None = None,
) -> DesignMatrix:
    """Regressors whose fitted combination is subtracted from Y."""
    if variant.kind == CenteringKind.RAW:
        return poly_basis(np.zeros((dataset.n, 0)), 0)

    if variant.kind == CenteringKind.COVARIATE_POLY:
        cols = dataset.nonconstant_columns()
        return poly_basis(
            dataset.x[:, cols],
            variant.q,
            variant.interactions,
            labels=[dataset.x_labels[k] for k in cols],
        )

    if indices is None:
        raise InvalidConfig("index-polynomial centering needs a propensity fit")
    idx = np.asarray(indices, dtype=float).reshape(dataset.n, -1)
    return poly_basis(
        idx,
        variant.q,
        variant.interactions,
        labels=[f"index{j + 1}" for j in range(idx.shape[1])],
    )


def center_outcome(
    dataset: Dataset,
    mask: np.ndarray,
    variant: CenteringVariant,
    fit: PropensityFit | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Y minus its centering function, fit on the ``mask`` rows.

    A pooled RAW variant subtracts the mean of Y over all N rows instead.
    Returns full-length centered Y and the centering coefficients.
    """
    indices = fit.indices if fit is not None else None
    basis = centering_basis(dataset, variant, indices)
    if variant.kind == CenteringKind.RAW and variant.pooled_mean:
        mask = np.ones(dataset.n, dtype=bool)
    ols = fit_ols(basis.rows(mask), dataset.y[mask])
    centered = dataset.y - basis.columns @ ols.coef
    return centered, ols.coef


# ---------------------------------------------------------------------------
# Residual regression
# ---------------------------------------------------------------------------

def olspsr(centered_y: np.ndarray, psr: np.ndarray, mask: np.ndarray) -> float:
    """No-intercept OLS slope of centered Y on the residual, over the mask."""
    eps = psr[mask]
    if np.max(np.abs(eps)) < PSR_TOL:
        raise DegeneratePsr(
            "propensity-score residuals vanish on the subsample; pi^d predicts D exactly"
        )
    return float(centered_y[mask] @ eps / (eps @ eps))


def propensity_diagnostics(pi: np.ndarray, mask: np.ndarray) -> PropensityDiagnostics:
    sub = pi[mask]
    return PropensityDiagnostics(
        min=float(sub.min()),
        median=float(np.median(sub)),
        max=float(sub.max()),
        n_below=int(np.sum(sub < EXTREME_LOW)),
        n_above=int(np.sum(sub > EXTREME_HIGH)),
    )


def estimate_subsample(
    dataset: Dataset,
    fit: PropensityFit,
    d: int,
    variant: CenteringVariant,
    support: np.ndarray | None = None,
) -> SubsampleEstimate:
    """Centered subsample residual regression for category ``d``."""
    mask = subsample_mask(dataset, d, support)
    pi = pairwise_propensity(fit, d, mask)
    psr = (dataset.d == d).astype(float) - pi
    centered, gamma = center_outcome(dataset, mask, variant, fit)
    beta = olspsr(centered, psr, mask)

    diagnostics = propensity_diagnostics(pi, mask)
    if diagnostics.n_below or diagnostics.n_above:
        logger.warning(
            "d=%d: %d propensities below %.2f and %d above %.2f on the subsample",
            d, diagnostics.n_below, EXTREME_LOW, diagnostics.n_above, EXTREME_HIGH,
        )
    return SubsampleEstimate(
        d=d,
        beta_hat=beta,
        variant=variant,
        mask=mask,
        psr=psr,
        centered_y=centered,
        gamma_hat=gamma,
        diagnostics=diagnostics,
        support_restricted=support is not None,
    )


# ---------------------------------------------------------------------------
# Overlap weights and the per-sample target
# ---------------------------------------------------------------------------

def overlap_weights(
    fit: PropensityFit, d: int, support: np.ndarray | None = None
) -> OverlapWeights:
    """w proportional to P_0 P_d / (P_0 + P_d), mean 1 over ``support`` (default all rows)."""
    if not 1 <= d <= fit.n_treatments:
        raise BadCategory(f"target category {d} outside 1..{fit.n_treatments}")
    p0 = fit.probs[:, 0]
    pd = fit.probs[:, d]
    den = p0 + pd
    raw = np.divide(p0 * pd, den, out=np.zeros_like(den), where=den > 0)

    n = raw.shape[0]
    support = np.ones(n, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    if support.shape != (n,):
        raise DimensionMismatch(f"support mask has {support.shape[0]} rows, expected {n}")
    raw = np.where(support, raw, 0.0)
    total = raw[support].mean() if support.any() else 0.0
    if total <= 0:
        raise DegenerateDenominator(f"no overlap between D = 0 and D = {d} on the support")
    return OverlapWeights(d=d, w=raw / total, support=support)


def ow_target(weights: OverlapWeights, mu_d: np.ndarray) -> float:
    """Overlap-weighted mean of mu_d over the support."""
    mu_d = np.asarray(mu_d, dtype=float)
    if mu_d.shape != weights.w.shape:
        raise DimensionMismatch(f"mu_d has shape {mu_d.shape}, expected {weights.w.shape}")
    return float(np.mean((weights.w * mu_d)[weights.support]))
