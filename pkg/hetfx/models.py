"""Core data models for hetfx.

Holds the observed data triple, the fitted treatment models, the subsample
estimates with their inference, the simulation designs and every report the
CLI renders. Array-valued models are internal; report models hold plain
floats and lists so they serialize with ``model_dump(mode="json")``.
"""

from __future__ import annotations

import enum
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import (
    DimensionMismatch,
    InvalidConfig,
    InvalidSpecCombination,
    MissingValues,
    OutOfRangeCategory,
)


# ---------------------------------------------------------------------------
# Observed data
# ---------------------------------------------------------------------------

class Dataset(BaseModel):
    """Outcome y, treatment d in {0..J} and covariates x (N x nu).

    The first covariate column may be a constant; no intercept is ever added
    implicitly.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    n_treatments: int = Field(ge=1, description="J, the number of non-control categories")
    x_labels: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_invariants(self) -> Dataset:
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        d = np.asarray(self.d, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or d.ndim != 1 or x.ndim != 2:
            raise DimensionMismatch("y and d must be vectors and x a matrix")
        n = y.shape[0]
        if d.shape[0] != n or x.shape[0] != n:
            raise DimensionMismatch(
                f"row counts differ: y has {n}, d has {d.shape[0]}, x has {x.shape[0]}"
            )
        if n <= x.shape[1]:
            raise DimensionMismatch(
                f"need more observations than covariate columns ({n} <= {x.shape[1]})"
            )

        labels = list(self.x_labels) or [f"x{k}" for k in range(x.shape[1])]
        if len(labels) != x.shape[1]:
            raise DimensionMismatch(
                f"{len(labels)} covariate labels for {x.shape[1]} columns"
            )

        bad = np.flatnonzero(~np.isfinite(y))
        if bad.size:
            raise MissingValues("y", int(bad[0]))
        bad_rows, bad_cols = np.nonzero(~np.isfinite(x))
        if bad_rows.size:
            raise MissingValues(labels[bad_cols[0]], int(bad_rows[0]))

        invalid = ~np.isfinite(d) | (d != np.round(d)) | (d < 0) | (d > self.n_treatments)
        if invalid.any():
            row = int(np.flatnonzero(invalid)[0])
            raise OutOfRangeCategory(float(d[row]), row, self.n_treatments)

        self.y = y
        self.x = x
        self.d = d.astype(np.int64)
        self.x_labels = labels
        return self

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def nonconstant_columns(self) -> list[int]:
        """Indices of covariate columns that vary across observations."""
        return [k for k in range(self.x.shape[1]) if np.ptp(self.x[:, k]) > 0]

    def subset(self, rows: np.ndarray) -> Dataset:
        return Dataset(
            y=self.y[rows],
            d=self.d[rows],
            x=self.x[rows],
            n_treatments=self.n_treatments,
            x_labels=self.x_labels,
        )


# ---------------------------------------------------------------------------
# Regression primitives
# ---------------------------------------------------------------------------

class DesignMatrix(BaseModel):
    """Regressor columns with one name per column."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    columns: np.ndarray
    column_labels: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_labels(self) -> DesignMatrix:
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.ndim != 2:
            raise DimensionMismatch("design columns must form a matrix")
        if not self.column_labels:
            self.column_labels = [f"c{k}" for k in range(cols.shape[1])]
        elif len(self.column_labels) != cols.shape[1]:
            raise DimensionMismatch(
                f"{len(self.column_labels)} labels for {cols.shape[1]} design columns"
            )
        self.columns = cols
        return self

    def rows(self, mask: np.ndarray) -> DesignMatrix:
        return DesignMatrix(columns=self.columns[mask], column_labels=self.column_labels)


class OlsFit(BaseModel):
    """Least-squares coefficients with conventional standard errors."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coef: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    std_errors: np.ndarray
    column_labels: list[str]

    @property
    def t_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.std_errors

    def coefficient(self, label: str) -> float:
        return float(self.coef[self.column_labels.index(label)])


# ---------------------------------------------------------------------------
# Contamination
# ---------------------------------------------------------------------------

class ConditionalCov(BaseModel):
    """Per-observation covariances of the treatment dummies given X and their mean."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    c_of_x: np.ndarray = Field(description="N x J x J, Cov(D_j, D_k | X_i)")
    c_bar: np.ndarray = Field(description="J x J observation average of c_of_x")
    n_cells: int = 0
    exact: bool = Field(default=False, description="Built from supplied cell probabilities")


class ContaminationReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    omega: np.ndarray = Field(description="N x J x J, omega_kj(X_i)")
    weight_means: np.ndarray
    estimand: Optional[np.ndarray] = None
    usual_ols_slopes: Optional[np.ndarray] = None
    conjectured: bool = Field(
        default=False,
        description="J >= 4: weights computed, estimand interpretation unproven",
    )


# ---------------------------------------------------------------------------
# Treatment models
# ---------------------------------------------------------------------------

class PropensityKind(str, enum.Enum):
    """Model used for P(D = j | X)."""

    ORDERED_PROBIT = "ordered-probit"
    MNL = "mnl"
    KNOWN = "known"


class OrderedProbitSpec(BaseModel):
    """Ordered probit with sigma = 1 and the first threshold fixed at 0.

    ``x`` carries the intercept column if one is wanted; the identified
    parameter is (kappa over the x columns, tau_2 .. tau_J).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    n_treatments: int = Field(ge=1)
    x_labels: list[str] = Field(default_factory=list)

    @property
    def n_params(self) -> int:
        return int(self.x.shape[1]) + self.n_treatments - 1

    def param_labels(self) -> list[str]:
        labels = self.x_labels or [f"x{k}" for k in range(self.x.shape[1])]
        return [f"kappa[{lab}]" for lab in labels] + [
            f"tau{m}" for m in range(2, self.n_treatments + 1)
        ]


class MnlSlot(BaseModel):
    """One entry of W_j: a signed covariate, or a structural zero."""

    column: Optional[str] = None
    sign: float = 1.0

    @classmethod
    def parse(cls, token: str) -> MnlSlot:
        token = token.strip()
        if token in ("0", ""):
            return cls()
        if token.startswith("-"):
            return cls(column=token[1:], sign=-1.0)
        return cls(column=token.lstrip("+"))


class MnlSpec(BaseModel):
    """Multinomial logit with index W_j'alpha for j = 1..J and 0 for the base category.

    ``layout[j-1][k]`` says which covariate (if any) fills slot k of W_j.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    x_labels: list[str]
    n_treatments: int = Field(ge=1)
    layout: list[list[MnlSlot]]

    @model_validator(mode="after")
    def _check_layout(self) -> MnlSpec:
        if len(self.layout) != self.n_treatments:
            raise InvalidConfig(
                f"MNL layout has {len(self.layout)} alternatives, expected {self.n_treatments}"
            )
        widths = {len(row) for row in self.layout}
        if len(widths) != 1:
            raise InvalidConfig("every MNL alternative needs the same number of slots")
        for row in self.layout:
            for slot in row:
                if slot.column is not None and slot.column not in self.x_labels:
                    raise InvalidConfig(
                        f"MNL layout names unknown covariate {slot.column!r}"
                    )
        return self

    @property
    def alpha_len(self) -> int:
        return len(self.layout[0])

    @classmethod
    def from_tokens(
        cls,
        x: np.ndarray,
        x_labels: list[str],
        n_treatments: int,
        rows: list[list[str]],
    ) -> MnlSpec:
        layout = [[MnlSlot.parse(tok) for tok in row] for row in rows]
        return cls(x=x, x_labels=x_labels, n_treatments=n_treatments, layout=layout)

    @classmethod
    def alternative_specific(
        cls, x: np.ndarray, x_labels: list[str], n_treatments: int
    ) -> MnlSpec:
        """Separate coefficients on every covariate for each alternative."""
        width = len(x_labels)
        layout: list[list[MnlSlot]] = []
        for j in range(n_treatments):
            row = [MnlSlot() for _ in range(width * n_treatments)]
            for k, label in enumerate(x_labels):
                row[j * width + k] = MnlSlot(column=label)
            layout.append(row)
        return cls(x=x, x_labels=x_labels, n_treatments=n_treatments, layout=layout)

    def w_tensor(self) -> np.ndarray:
        """W as an N x J x K array."""
        n = self.x.shape[0]
        w = np.zeros((n, self.n_treatments, self.alpha_len))
        for j, row in enumerate(self.layout):
            for k, slot in enumerate(row):
                if slot.column is not None:
                    w[:, j, k] = slot.sign * self.x[:, self.x_labels.index(slot.column)]
        return w


class PropensityConfig(BaseModel):
    """How to (re)fit the treatment model on a dataset."""

    kind: PropensityKind = PropensityKind.ORDERED_PROBIT
    mnl_layout: Optional[list[list[str]]] = Field(
        default=None,
        description="Per-alternative slot tokens; alternative-specific coefficients if unset",
    )


class PropensityFit(BaseModel):
    """Fitted treatment model evaluated at its estimate.

    ``model`` is the likelihood object the fit came from; it re-evaluates
    probabilities and index functions at perturbed parameters. Fits built
    from known probabilities carry no parameters and no model.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: PropensityKind
    alpha_hat: np.ndarray
    probs: np.ndarray = Field(description="N x (J+1), P_j(alpha_hat; X_i)")
    indices: np.ndarray = Field(description="N x 1 (ordered) or N x J (MNL)")
    scores: np.ndarray = Field(description="N x len(alpha), per-observation loglik gradients")
    loglik: float = 0.0
    converged: bool = True
    iterations: int = 0
    param_labels: list[str] = Field(default_factory=list)
    model: Any = Field(default=None, exclude=True)

    @property
    def n_params(self) -> int:
        return int(self.alpha_hat.shape[0])

    @property
    def n_treatments(self) -> int:
        return int(self.probs.shape[1]) - 1

    def probabilities_at(self, alpha: np.ndarray) -> np.ndarray:
        if self.model is None:
            return self.probs
        return self.model.probabilities(alpha)

    def indices_at(self, alpha: np.ndarray) -> np.ndarray:
        if self.model is None:
            return self.indices
        return self.model.indices(alpha)

    @classmethod
    def from_probabilities(
        cls, probs: np.ndarray, indices: np.ndarray | None = None
    ) -> PropensityFit:
        """Wrap known category probabilities as a zero-parameter fit.

        Without explicit indices, the log-odds log(P_j / P_0) serve as index
        functions.
        """
        probs = np.asarray(probs, dtype=float)
        if indices is None:
            with np.errstate(divide="ignore"):
                indices = np.log(probs[:, 1:]) - np.log(probs[:, :1])
        n = probs.shape[0]
        return cls(
            kind=PropensityKind.KNOWN,
            alpha_hat=np.zeros(0),
            probs=probs,
            indices=np.asarray(indices, dtype=float).reshape(n, -1),
            scores=np.zeros((n, 0)),
        )


# ---------------------------------------------------------------------------
# Subsample estimators
# ---------------------------------------------------------------------------

class CenteringKind(str, enum.Enum):
    """What is subtracted from Y before the residual regression."""

    RAW = "raw"              # subsample mean of Y
    COVARIATE_POLY = "covpoly"   # polynomial in X
    INDEX_POLY = "indexpoly"     # polynomial in the fitted index functions


CENTERING_LABELS: dict[CenteringKind, str] = {
    CenteringKind.RAW: "beta^0 (Y centered at its subsample mean)",
    CenteringKind.COVARIATE_POLY: "beta^X (Y centered at a polynomial in X)",
    CenteringKind.INDEX_POLY: "beta^pi (Y centered at a polynomial in the propensity index)",
}

CENTERING_SYMBOLS: dict[CenteringKind, str] = {
    CenteringKind.RAW: "b0",
    CenteringKind.COVARIATE_POLY: "bX",
    CenteringKind.INDEX_POLY: "bpi",
}


class CenteringVariant(BaseModel):
    kind: CenteringKind = CenteringKind.INDEX_POLY
    q: int = Field(default=2, ge=0, description="Polynomial order; ignored for RAW")
    interactions: bool = True
    pooled_mean: bool = Field(
        default=True,
        description="RAW only: center on the full-sample mean of Y; False uses the subsample mean",
    )

    @property
    def order(self) -> int:
        return 0 if self.kind == CenteringKind.RAW else self.q

    @property
    def symbol(self) -> str:
        return CENTERING_SYMBOLS[self.kind]


class PropensityDiagnostics(BaseModel):
    """Spread of the pairwise propensity pi^d over the subsample."""

    min: float
    median: float
    max: float
    n_below: int = Field(description="Count of pi^d < 0.01")
    n_above: int = Field(description="Count of pi^d > 0.99")


class SubsampleEstimate(BaseModel):
    """Residual-regression estimate for one treatment category.

    ``psr`` and ``centered_y`` are full-length; rows outside ``mask``
    never enter a sum.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    d: int
    beta_hat: float
    variant: CenteringVariant
    mask: np.ndarray
    psr: np.ndarray
    centered_y: np.ndarray
    gamma_hat: np.ndarray
    diagnostics: PropensityDiagnostics
    asy_sd: Optional[float] = None
    support_restricted: bool = False

    @property
    def n_sub(self) -> int:
        return int(self.mask.sum())


class OverlapWeights(BaseModel):
    """Overlap weights over all N rows, zero off ``support``, mean 1 on it."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    d: int
    w: np.ndarray
    support: np.ndarray


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

class VarianceReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    d: int
    omega_hat: float
    asy_sd: float
    omega_naive: float = Field(description="Variance ignoring estimation of alpha")
    naive_sd: float
    L_hat: np.ndarray
    eta: np.ndarray
    moment_term: np.ndarray = Field(description="D0d * V * eps per observation")
    correction_term: np.ndarray = Field(description="L_hat' eta_i per observation")


class CovarianceReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    targets: list[int]
    beta: np.ndarray
    cov_matrix: np.ndarray
    wald: Optional[float] = None
    wald_df: Optional[int] = None
    wald_pvalue: Optional[float] = None


class BootstrapResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    se: float
    replicates: np.ndarray
    n_failed: int
    n_total: int


class SeMethod(str, enum.Enum):
    ASYMPTOTIC = "asymptotic"
    BOOTSTRAP = "bootstrap"


# ---------------------------------------------------------------------------
# Simulation designs
# ---------------------------------------------------------------------------

class DgpFamily(str, enum.Enum):
    """Data-generating processes of the simulation study."""

    ORDINAL_BINARY_X = "ordinal-binary"   # binary X2, used by the OLS demonstration
    ORDINAL = "ordinal"                   # X2 normal, X3 uniform on [0, 2]
    MULTINOMIAL = "multinomial"           # logit choice probabilities
    MULTINOMIAL_ABS = "multinomial-abs"   # probabilities proportional to |W'alpha|


class ErrorDist(str, enum.Enum):
    NORMAL = "normal"
    CHI3 = "chi3"   # chi-square(3), standardized


class SimTable(str, enum.Enum):
    ORDINAL = "ordinal"
    MULTINOMIAL = "multinomial"


class TargetSource(str, enum.Enum):
    """Which propensities weight the per-sample overlap target."""

    TRUE = "true"
    ESTIMATED = "estimated"


class DgpSpec(BaseModel):
    family: DgpFamily
    error_dist: ErrorDist = ErrorDist.NORMAL
    regression_misspec: bool = False
    n: int = Field(default=1000, ge=10)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_combination(self) -> DgpSpec:
        if self.family == DgpFamily.ORDINAL_BINARY_X and (
            self.error_dist != ErrorDist.NORMAL or self.regression_misspec
        ):
            raise InvalidSpecCombination(
                "the binary-X ordinal design only has normal errors and no misspecification"
            )
        if self.family in (DgpFamily.MULTINOMIAL, DgpFamily.MULTINOMIAL_ABS) and (
            self.error_dist != ErrorDist.NORMAL
        ):
            raise InvalidSpecCombination(
                "multinomial designs take their error law from the family, not error_dist"
            )
        return self

    @property
    def propensity_kind(self) -> PropensityKind:
        if self.family in (DgpFamily.MULTINOMIAL, DgpFamily.MULTINOMIAL_ABS):
            return PropensityKind.MNL
        return PropensityKind.ORDERED_PROBIT


class SimulatedSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dataset: Dataset
    true_probs: np.ndarray = Field(description="N x (J+1)")
    true_mu: np.ndarray = Field(description="N x J, mu_d(X_i)")
    y0: np.ndarray = Field(description="Untreated potential outcome")
    true_indices: np.ndarray


# ---------------------------------------------------------------------------
# Reports (serializable)
# ---------------------------------------------------------------------------

class MonteCarloRow(BaseModel):
    estimator: str = Field(description="Centering symbol plus target, e.g. 'bpi_1'")
    variant: CenteringKind
    d: int
    abs_bias: float
    sim_sd: float
    avg_asy_sd: float
    rmse: float
    coverage: float | None = Field(
        default=None,
        description="Share of repetitions whose 95% interval covers the target",
    )


class MonteCarloReport(BaseModel):
    table: SimTable
    panel: int
    family: DgpFamily
    error_dist: ErrorDist
    regression_misspec: bool
    n: int
    reps: int
    n_failed: int
    seed: int
    target_source: TargetSource
    rows: list[MonteCarloRow]


class DemoReport(BaseModel):
    n: int
    seed: int
    labels: list[str]
    ols_coef: list[float]
    ols_t_values: list[float]
    estimand: list[float] = Field(description="Contamination-weighted estimand of the D slopes")
    naive_target: list[float] = Field(description="(beta_1, E X2, 2 E X2, beta_2)")
    contamination_gap: list[float] = Field(description="|OLS slope - naive target| per D slope")


class EstimateRow(BaseModel):
    d: int
    variant: CenteringKind
    q: int
    beta_hat: float
    asy_sd: float
    naive_sd: float
    t_value: float
    n_sub: int
    pi_min: float
    pi_median: float
    pi_max: float
    n_pi_below: int
    n_pi_above: int
    bootstrap_se: Optional[float] = None
    bootstrap_failed: Optional[int] = None


class CovarianceSummary(BaseModel):
    variant: CenteringKind
    targets: list[int]
    cov_matrix: list[list[float]]
    wald: Optional[float] = None
    wald_df: Optional[int] = None
    wald_pvalue: Optional[float] = None


class EstimationReport(BaseModel):
    input: str
    n: int
    n_treatments: int
    propensity: PropensityKind
    param_labels: list[str]
    alpha_hat: list[float]
    loglik: float
    iterations: int
    rows: list[EstimateRow]
    covariances: list[CovarianceSummary] = Field(default_factory=list)


class WeightSummary(BaseModel):
    d: int
    min: float
    q25: float
    median: float
    q75: float
    max: float
    mean: float


class WeightsReport(BaseModel):
    input: str
    n: int
    n_treatments: int
    overlap: list[WeightSummary]
    contamination_means: Optional[list[list[float]]] = None
    usual_ols_slopes: Optional[list[float]] = None
    closed_form_max_diff: Optional[float] = None
    conjectured: bool = False
    contamination_skipped: Optional[str] = None


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

class OutputFormat(str, enum.Enum):
    TABLE = "table"
    CSV = "csv"
    JSON = "json"


class RunConfig(BaseModel):
    """Everything a subcommand needs, collected from flags and environment."""

    command: str
    input_path: Optional[str] = None
    outcome: Optional[str] = None
    treatment: Optional[str] = None
    covariates: list[str] = Field(default_factory=list)
    add_constant: bool = True
    num_treatments: Optional[int] = None
    propensity: PropensityKind = PropensityKind.ORDERED_PROBIT
    mnl_layout: Optional[list[list[str]]] = None
    variants: list[CenteringKind] = Field(
        default_factory=lambda: list(CenteringKind),
    )
    q: int = Field(default=2, ge=0)
    pooled_mean: bool = True
    d_targets: list[int] = Field(default_factory=list)
    se: SeMethod = SeMethod.ASYMPTOTIC
    bootstrap_reps: int = 200
    wald_null: Optional[list[float]] = None
    seed: int = Field(default=0, ge=0)
    reps: int = 500
    n: int = 1000
    table: SimTable = SimTable.ORDINAL
    panel: int = 1
    target_source: TargetSource = TargetSource.TRUE
    full: bool = False
    emit_data: Optional[str] = None
    weights_path: Optional[str] = None
    output_format: OutputFormat = OutputFormat.TABLE
    output_path: Optional[str] = None
    threads: int = 1

    @model_validator(mode="after")
    def _check_preconditions(self) -> RunConfig:
        if self.command == "simulate" and self.reps < 2:
            raise InvalidConfig(f"--reps must be at least 2 (got {self.reps})")
        if self.se == SeMethod.BOOTSTRAP and self.bootstrap_reps < 100:
            raise InvalidConfig(
                f"bootstrap needs at least 100 replicates (got {self.bootstrap_reps})"
            )
        if self.panel not in (1, 2, 3, 4):
            raise InvalidConfig(f"--panel must be 1..4 (got {self.panel})")
        if self.threads < 1:
            raise InvalidConfig(f"--threads must be positive (got {self.threads})")
        if self.n < 10:
            raise InvalidConfig(f"--n must be at least 10 (got {self.n})")
        if self.command in ("estimate", "weights") and not (
            self.input_path and self.outcome and self.treatment
        ):
            raise InvalidConfig("estimate/weights need an input CSV, --outcome and --treatment")
        if not self.variants:
            raise InvalidConfig("at least one centering variant is required")
        return self
