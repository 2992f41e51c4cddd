"""Shared numerical primitives: least squares, dummies, projections, polynomial bases.

Every OLS in the package goes through ``fit_ols``, which solves by a
column-pivoted QR decomposition and refuses rank-deficient designs.
Callers pass explicit constant columns; nothing adds an intercept.
"""

from __future__ import annotations

import logging
from collections.abc import Callable

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import DimensionMismatch, InvalidConfig, OutOfRangeCategory, RankDeficient
from .models import DesignMatrix, OlsFit

logger = logging.getLogger(__name__)

# Relative threshold on |R_kk| / |R_11| of the pivoted QR factor.
RANK_TOL = 1e-10

# Central-difference step, scaled by max(1, |param|).
DERIVATIVE_STEP = 1e-5


# ---------------------------------------------------------------------------
# Least squares
# ---------------------------------------------------------------------------

def fit_ols(design: DesignMatrix, response: np.ndarray) -> OlsFit:
    """OLS of ``response`` on the design columns via pivoted QR.

    Raises RankDeficient naming the first column (in pivot order) whose
    pivot falls below RANK_TOL relative to the largest one.
    """
    x = design.columns
    y = np.asarray(response, dtype=float)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise DimensionMismatch(
            f"response has {y.shape[0]} rows but the design has {x.shape[0]}"
        )
    n, k = x.shape
    if n < k:
        raise RankDeficient(k - 1, design.column_labels[k - 1])

    q_mat, r_mat, pivot = qr(x, mode="economic", pivoting=True)
    r_diag = np.abs(np.diag(r_mat))
    small = r_diag <= RANK_TOL * (r_diag[0] if k else 0.0)
    if small.any():
        bad = int(pivot[int(np.argmax(small))])
        raise RankDeficient(bad, design.column_labels[bad])

    qty = q_mat.T @ y
    coef = np.empty(k)
    coef[pivot] = solve_triangular(r_mat, qty)
    fitted = q_mat @ qty
    residuals = y - fitted

    dof = n - k
    sigma2 = float(residuals @ residuals) / dof if dof > 0 else np.nan
    r_inv = solve_triangular(r_mat, np.eye(k))
    std_errors = np.empty(k)
    std_errors[pivot] = np.sqrt(np.sum(r_inv**2, axis=1) * sigma2)

    return OlsFit(
        coef=coef,
        residuals=residuals,
        fitted=fitted,
        std_errors=std_errors,
        column_labels=list(design.column_labels),
    )


def linear_projection(target: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample linear projection of ``target`` on the columns of ``x``."""
    return fit_ols(DesignMatrix(columns=x), target).fitted


# ---------------------------------------------------------------------------
# Treatment dummies
# ---------------------------------------------------------------------------

def make_dummies(d: np.ndarray, n_treatments: int) -> np.ndarray:
    """N x J matrix with column j-1 holding 1[d = j]; category 0 has no column."""
    d = np.asarray(d)
    invalid = (d < 0) | (d > n_treatments) | (d != np.round(d))
    if invalid.any():
        row = int(np.flatnonzero(invalid)[0])
        raise OutOfRangeCategory(float(d[row]), row, n_treatments)
    return (d[:, None] == np.arange(1, n_treatments + 1)[None, :]).astype(float)


# ---------------------------------------------------------------------------
# Polynomial bases
# ---------------------------------------------------------------------------

def _power_label(label: str, power: int) -> str:
    return label if power == 1 else f"{label}^{power}"


def poly_basis(
    x: np.ndarray,
    q: int,
    with_interactions: bool = True,
    labels: list[str] | None = None,
) -> DesignMatrix:
    """Constant plus powers (and optionally pairwise products) of the columns of x.

    Column order: the constant; pure powers degree by degree, variables in
    order within a degree; then products x_i^a x_j^b (a, b >= 1, a + b <= q)
    sorted by (a + b, i, j, a). Two variables at q = 2 give
    (1, x2, x3, x2^2, x3^2, x2*x3).
    """
    if q < 0:
        raise InvalidConfig(f"polynomial order must be non-negative, got {q}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    labels = labels or [f"v{i}" for i in range(p)]

    columns = [np.ones(n)]
    names = ["1"]
    for degree in range(1, q + 1):
        for i in range(p):
            columns.append(x[:, i] ** degree)
            names.append(_power_label(labels[i], degree))

    if with_interactions:
        terms = [
            (a + b, i, j, a)
            for i in range(p)
            for j in range(i + 1, p)
            for a in range(1, q)
            for b in range(1, q - a + 1)
        ]
        for total, i, j, a in sorted(terms):
            b = total - a
            columns.append(x[:, i] ** a * x[:, j] ** b)
            names.append(f"{_power_label(labels[i], a)}*{_power_label(labels[j], b)}")

    return DesignMatrix(columns=np.column_stack(columns), column_labels=names)


# ---------------------------------------------------------------------------
# Numerical derivatives
# ---------------------------------------------------------------------------

def central_difference(
    fn: Callable[[np.ndarray], np.ndarray | float],
    params: np.ndarray,
    rel_step: float = DERIVATIVE_STEP,
) -> np.ndarray:
    """Jacobian of ``fn`` at ``params`` by central differences.

    Step for component k is rel_step * max(1, |params_k|). The derivative
    axis is last: a scalar fn gives a vector, a vector fn an (m, k) array.
    """
    params = np.asarray(params, dtype=float)
    columns = []
    for k in range(params.shape[0]):
        h = rel_step * max(1.0, abs(params[k]))
        up = params.copy()
        down = params.copy()
        up[k] += h
        down[k] -= h
        columns.append((np.asarray(fn(up)) - np.asarray(fn(down))) / (2.0 * h))
    if not columns:
        return np.zeros(0)
    return np.stack(columns, axis=-1)
