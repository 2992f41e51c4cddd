"""Contamination of the multi-dummy OLS under heterogeneous effects.

With saturated discrete covariates, the slope of D_k in the OLS of Y on
(D_1..D_J, X) estimates E{sum_j omega_kj(X) mu_j(X)}, where
omega(X) = Cbar^{-1} C(X) and C(X) = Cov(D | X). The diagonal weights
average to one and the off-diagonal ones to zero, so effects of other
treatments leak into each slope wherever C(X) varies with X.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import (
    ContinuousCovariate,
    DimensionMismatch,
    EmptyCell,
    InvalidConfig,
    SingularCovariance,
)
from .models import ConditionalCov, ContaminationReport, Dataset, DesignMatrix, OlsFit
from .regression import fit_ols, make_dummies

logger = logging.getLogger(__name__)

# |det Cbar| below this times scale^J counts as singular.
SINGULAR_TOL = 1e-12


# ---------------------------------------------------------------------------
# Conditional covariances
# ---------------------------------------------------------------------------

def covariate_cells(x: np.ndarray) -> tuple[np.ndarray, int]:
    """Label each row by its distinct covariate vector."""
    _, labels = np.unique(np.asarray(x), axis=0, return_inverse=True)
    labels = np.asarray(labels).reshape(-1)
    return labels, int(labels.max()) + 1


def _multinomial_cov(p: np.ndarray) -> np.ndarray:
    """diag(p) - p p' for each row of p (N x J)."""
    return np.einsum("nj,jk->njk", p, np.eye(p.shape[1])) - p[:, :, None] * p[:, None, :]


def conditional_cov(
    dataset: Dataset,
    x_cells: np.ndarray | None = None,
    cell_probs: np.ndarray | None = None,
) -> ConditionalCov:
    """Cov(D_j, D_k | X_i) per observation and its observation average.

    With ``cell_probs`` (N x (J+1) exact category probabilities) the
    covariances are the multinomial ones implied by those probabilities.
    Otherwise they are within-cell sample covariances over the discrete
    covariate cells ``x_cells`` (derived from the distinct rows of x when
    omitted).
    """
    n, j_count = dataset.n, dataset.n_treatments

    if cell_probs is not None:
        probs = np.asarray(cell_probs, dtype=float)
        if probs.shape != (n, j_count + 1):
            raise DimensionMismatch(
                f"cell probabilities have shape {probs.shape}, expected {(n, j_count + 1)}"
            )
        c_of_x = _multinomial_cov(probs[:, 1:])
        n_cells = covariate_cells(dataset.x)[1] if x_cells is None else len(np.unique(x_cells))
        return ConditionalCov(
            c_of_x=c_of_x, c_bar=c_of_x.mean(axis=0), n_cells=n_cells, exact=True
        )

    if x_cells is None:
        labels, n_cells = covariate_cells(dataset.x)
    else:
        labels = np.asarray(x_cells).reshape(-1)
        if labels.shape[0] != n:
            raise DimensionMismatch(f"{labels.shape[0]} cell labels for {n} observations")
        _, labels = np.unique(labels, return_inverse=True)
        labels = np.asarray(labels).reshape(-1)
        n_cells = int(labels.max()) + 1
    if n_cells == n and n > 1:
        raise ContinuousCovariate(
            f"every observation is its own covariate cell ({n} cells); "
            "contamination weights need discrete covariates"
        )

    counts = np.bincount(labels, minlength=n_cells)
    if np.any(counts == 0):
        raise EmptyCell(f"covariate cell {int(np.argmin(counts))} has no observations")

    dummies = make_dummies(dataset.d, j_count)
    cell_p = np.zeros((n_cells, j_count))
    np.add.at(cell_p, labels, dummies)
    cell_p /= counts[:, None]
    c_of_x = _multinomial_cov(cell_p)[labels]
    logger.info("Conditional covariances over %d covariate cells", n_cells)
    return ConditionalCov(c_of_x=c_of_x, c_bar=c_of_x.mean(axis=0), n_cells=n_cells)


# ---------------------------------------------------------------------------
# Contamination weights
# ---------------------------------------------------------------------------

def _check_invertible(c_bar: np.ndarray) -> None:
    j_count = c_bar.shape[0]
    scale = float(np.max(np.abs(np.diag(c_bar)))) if j_count else 0.0
    det = float(np.linalg.det(c_bar))
    if scale == 0.0 or abs(det) < SINGULAR_TOL * scale**j_count:
        raise SingularCovariance(
            f"averaged dummy covariance is singular (det {det:.3g}, scale {scale:.3g})"
        )


def theorem1_weights(cov: ConditionalCov) -> ContaminationReport:
    """omega(X_i) = Cbar^{-1} C(X_i) for every observation.

    Row k of omega(X) weights the effects mu_1..mu_J inside the D_k slope.
    J >= 4 is computed the same way but flagged ``conjectured``.
    """
    _check_invertible(cov.c_bar)
    omega = np.linalg.solve(cov.c_bar[None, :, :], cov.c_of_x)
    j_count = cov.c_bar.shape[0]
    conjectured = j_count >= 4
    if conjectured:
        logger.warning(
            "J=%d: contamination weights computed, estimand interpretation is conjectured",
            j_count,
        )
    return ContaminationReport(
        omega=omega,
        weight_means=omega.mean(axis=0),
        conjectured=conjectured,
    )


def closed_form_weights(cov: ConditionalCov) -> np.ndarray:
    """Explicit weight formulas for J <= 3 (N x J x J).

    J = 1 is the binary overlap weight C(X)/C; J = 2 uses the 2 x 2
    determinant; J = 3 uses the adjugate of Cbar over its determinant.
    """
    c = cov.c_bar
    cx = cov.c_of_x
    j_count = c.shape[0]
    _check_invertible(c)

    if j_count == 1:
        return cx / c[0, 0]

    if j_count == 2:
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        omega = np.empty_like(cx)
        for j in range(2):
            omega[:, 0, j] = (c[1, 1] * cx[:, 0, j] - c[0, 1] * cx[:, 1, j]) / det
            omega[:, 1, j] = (c[0, 0] * cx[:, 1, j] - c[0, 1] * cx[:, 0, j]) / det
        return omega

    if j_count == 3:
        c11, c12, c13 = c[0, 0], c[0, 1], c[0, 2]
        c22, c23, c33 = c[1, 1], c[1, 2], c[2, 2]
        adj = np.array([
            [c22 * c33 - c23**2, c13 * c23 - c12 * c33, c12 * c23 - c13 * c22],
            [c13 * c23 - c12 * c33, c11 * c33 - c13**2, c12 * c13 - c11 * c23],
            [c12 * c23 - c13 * c22, c12 * c13 - c11 * c23, c11 * c22 - c12**2],
        ])
        det = c11 * adj[0, 0] + c12 * adj[0, 1] + c13 * adj[0, 2]
        omega = np.empty_like(cx)
        for k in range(3):
            for j in range(3):
                omega[:, k, j] = (
                    adj[k, 0] * cx[:, 0, j] + adj[k, 1] * cx[:, 1, j] + adj[k, 2] * cx[:, 2, j]
                ) / det
        return omega

    raise InvalidConfig(f"closed-form weights exist only for J <= 3 (got J={j_count})")


def theorem1_estimand(report: ContaminationReport, mu: np.ndarray) -> np.ndarray:
    """Average over observations of sum_j omega_kj(X_i) mu_j(X_i), for each k."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 1:
        mu = mu[:, None]
    if mu.shape != report.omega.shape[:2]:
        raise DimensionMismatch(
            f"mu has shape {mu.shape}, expected {report.omega.shape[:2]}"
        )
    return np.einsum("nkj,nj->nk", report.omega, mu).mean(axis=0)


# ---------------------------------------------------------------------------
# The usual OLS
# ---------------------------------------------------------------------------

def usual_ols_fit(dataset: Dataset) -> OlsFit:
    """OLS of Y on (D_1..D_J, X), dummies first."""
    dummies = make_dummies(dataset.d, dataset.n_treatments)
    design = DesignMatrix(
        columns=np.column_stack([dummies, dataset.x]),
        column_labels=[f"D{j}" for j in range(1, dataset.n_treatments + 1)]
        + list(dataset.x_labels),
    )
    return fit_ols(design, dataset.y)


def usual_ols(dataset: Dataset) -> np.ndarray:
    """Slopes of D_1..D_J in the OLS of Y on (D_1..D_J, X)."""
    return usual_ols_fit(dataset).coef[: dataset.n_treatments]


def contamination_report(
    dataset: Dataset,
    mu: np.ndarray | None = None,
    cell_probs: np.ndarray | None = None,
    x_cells: np.ndarray | None = None,
) -> ContaminationReport:
    """Weights, optional estimand and the usual-OLS slopes in one report."""
    cov = conditional_cov(dataset, x_cells=x_cells, cell_probs=cell_probs)
    report = theorem1_weights(cov)
    if mu is not None:
        report.estimand = theorem1_estimand(report, mu)
    report.usual_ols_slopes = usual_ols(dataset)
    return report
