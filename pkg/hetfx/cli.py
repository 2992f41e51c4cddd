"""CLI entry point for hetfx.

Usage:
    # Subsample residual regression on your own data:
    hetfx estimate data.csv --outcome y --treatment d --covariates x2 x3

    # One panel of the simulation tables:
    hetfx simulate --table ordinal --panel 1 --n 1000 --reps 500 --seed 7

    # Usual OLS next to its contamination-weighted estimand:
    hetfx demo --n 1000000

    # Overlap and contamination weights:
    hetfx weights data.csv --outcome y --treatment d --covariates x2 --weights-csv w.csv
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

load_dotenv()  # a local .env may set HETFX_THREADS and HETFX_LOG_LEVEL

from .contamination import closed_form_weights, conditional_cov, contamination_report
from .errors import (
    ColumnNotFound,
    ContinuousCovariate,
    DataError,
    InvalidConfig,
    MissingValues,
    NumericalError,
    RankDeficient,
)
from .estimators import estimate_subsample, overlap_weights
from .inference import asy_covariance, asy_variance, bootstrap_se
from .models import (
    CenteringKind,
    CenteringVariant,
    CovarianceSummary,
    Dataset,
    EstimateRow,
    EstimationReport,
    OutputFormat,
    PropensityConfig,
    PropensityFit,
    PropensityKind,
    RunConfig,
    SeMethod,
    SimTable,
    TargetSource,
    WeightsReport,
    WeightSummary,
)
from .propensity import fit_propensity
from .renderer import CSV_FLOAT_FORMAT, centering_legend, render, render_many
from .simulation import (
    DEFAULT_REPS,
    FULL_REPS,
    FULL_SIZES,
    generate,
    panel_spec,
    run_monte_carlo,
    sample_frame,
    usual_ols_demo,
)

logger = logging.getLogger(__name__)

EXIT_DATA_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

DEMO_N = 1_000_000


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="hetfx",
        description=(
            "Heterogeneous multiple-treatment effects: subsample OLS on "
            "propensity-score residuals"
        ),
        epilog="centering variants:\n" + centering_legend(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command")

    # -- estimate command --
    estimate_parser = subparsers.add_parser(
        "estimate",
        help="Estimate overlap-weighted effects from a CSV file",
        epilog="centering variants:\n" + centering_legend(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_data_arguments(estimate_parser)
    _add_variant_arguments(estimate_parser)
    estimate_parser.add_argument(
        "--d",
        nargs="+",
        type=int,
        default=None,
        help="Target categories (default: 1..J)",
    )
    estimate_parser.add_argument(
        "--se",
        choices=[m.value for m in SeMethod],
        default=SeMethod.ASYMPTOTIC.value,
        help="Standard errors (default: asymptotic; bootstrap adds a pairs-bootstrap SD)",
    )
    estimate_parser.add_argument("--bootstrap-reps", type=int, default=200)
    estimate_parser.add_argument(
        "--wald-null",
        nargs="+",
        type=float,
        default=None,
        help="Null values for the joint Wald test, one per target (default: 0)",
    )
    estimate_parser.add_argument("--seed", type=int, default=0, help="Bootstrap seed")
    _add_common_arguments(estimate_parser)

    # -- simulate command --
    simulate_parser = subparsers.add_parser(
        "simulate",
        help="Run one panel of the Monte Carlo study",
        epilog="centering variants:\n" + centering_legend(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    simulate_parser.add_argument(
        "--table",
        choices=[t.value for t in SimTable],
        default=SimTable.ORDINAL.value,
    )
    simulate_parser.add_argument("--panel", type=int, default=1, help="Panel 1..4")
    simulate_parser.add_argument("--n", type=int, default=1000, help="Sample size")
    simulate_parser.add_argument("--reps", type=int, default=DEFAULT_REPS)
    simulate_parser.add_argument("--seed", type=int, default=0)
    simulate_parser.add_argument(
        "--target-source",
        choices=[t.value for t in TargetSource],
        default=TargetSource.TRUE.value,
        help="Propensities used for the per-sample overlap target (default: true)",
    )
    simulate_parser.add_argument(
        "--full",
        action="store_true",
        help=f"{FULL_REPS} repetitions at N = {' and '.join(map(str, FULL_SIZES))}",
    )
    simulate_parser.add_argument(
        "--emit-data",
        default=None,
        metavar="PATH",
        help="Also write one generated sample to this CSV",
    )
    _add_variant_arguments(simulate_parser)
    _add_common_arguments(simulate_parser)

    # -- demo command --
    demo_parser = subparsers.add_parser(
        "demo", help="Usual OLS against its contamination-weighted estimand"
    )
    demo_parser.add_argument("--n", type=int, default=DEMO_N)
    demo_parser.add_argument("--seed", type=int, default=0)
    _add_common_arguments(demo_parser)

    # -- weights command --
    weights_parser = subparsers.add_parser(
        "weights", help="Overlap and contamination weights for a CSV file"
    )
    _add_data_arguments(weights_parser)
    weights_parser.add_argument(
        "--weights-csv",
        default=None,
        metavar="PATH",
        help="Write per-observation weights to this CSV",
    )
    _add_common_arguments(weights_parser)

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return

    _configure_logging(args.verbose)
    try:
        config = _build_config(args)
        if config.command == "estimate":
            _cmd_estimate(config)
        elif config.command == "simulate":
            _cmd_simulate(config)
        elif config.command == "demo":
            _cmd_demo(config)
        elif config.command == "weights":
            _cmd_weights(config)
    except (DataError, ValidationError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_DATA_ERROR)
    except NumericalError as e:
        print(f"Numerical failure: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL_ERROR)


# ---------------------------------------------------------------------------
# Argument groups
# ---------------------------------------------------------------------------

def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("input", help="CSV file with a header row")
    parser.add_argument("--outcome", required=True, help="Outcome column")
    parser.add_argument("--treatment", required=True, help="Treatment column coded 0..J")
    parser.add_argument(
        "--covariates", nargs="+", default=[], help="Covariate columns (default: none)"
    )
    parser.add_argument(
        "--no-constant",
        action="store_true",
        help="Do not prepend a constant column to the covariates",
    )
    parser.add_argument(
        "--num-treatments",
        type=int,
        default=None,
        help="J, the number of non-control categories (default: largest treatment value)",
    )
    parser.add_argument(
        "--model",
        choices=[PropensityKind.ORDERED_PROBIT.value, PropensityKind.MNL.value],
        default=PropensityKind.ORDERED_PROBIT.value,
        help="Treatment model (default: ordered-probit)",
    )
    parser.add_argument(
        "--mnl-layout",
        default=None,
        help=(
            "MNL index layout, alternatives separated by ';' and slots by ','; a slot is a "
            "covariate, '-covariate' or 0 (default: alternative-specific coefficients)"
        ),
    )


def _add_variant_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--variant",
        nargs="+",
        choices=[k.value for k in CenteringKind],
        default=[k.value for k in CenteringKind],
        help="Centering of Y: raw = beta^0, covpoly = beta^X, indexpoly = beta^pi (default: all)",
    )
    parser.add_argument("--q", type=int, default=2, help="Polynomial order (default: 2)")
    parser.add_argument(
        "--raw-subsample-mean",
        action="store_true",
        help="Center raw Y on the subsample mean instead of the full-sample mean",
    )


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--format",
        choices=[f.value for f in OutputFormat],
        default=OutputFormat.TABLE.value,
        help="Output format (default: table)",
    )
    parser.add_argument(
        "--output", "-o",
        help="Output file path (default: stdout)",
        default=None,
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker processes for repetitions and replicates (default: $HETFX_THREADS or 1)",
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Enable verbose logging",
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _configure_logging(verbose: bool) -> None:
    level = "INFO" if verbose else os.environ.get("HETFX_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get("HETFX_THREADS", "1")
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"HETFX_THREADS must be an integer (got {raw!r})") from None


def _parse_layout(raw: str | None) -> list[list[str]] | None:
    if raw is None:
        return None
    return [[tok.strip() for tok in alt.split(",")] for alt in raw.split(";")]


def _build_config(args: argparse.Namespace) -> RunConfig:
    """Collect the parsed flags into a validated RunConfig."""
    fields: dict = {
        "command": args.command,
        "output_format": OutputFormat(args.format),
        "output_path": args.output,
        "threads": _threads(args.threads),
    }
    if args.command in ("estimate", "weights"):
        fields.update(
            input_path=args.input,
            outcome=args.outcome,
            treatment=args.treatment,
            covariates=args.covariates,
            add_constant=not args.no_constant,
            num_treatments=args.num_treatments,
            propensity=PropensityKind(args.model),
            mnl_layout=_parse_layout(args.mnl_layout),
        )
    if args.command in ("estimate", "simulate"):
        fields.update(
            variants=[CenteringKind(v) for v in args.variant],
            q=args.q,
            pooled_mean=not args.raw_subsample_mean,
        )
    if args.command == "estimate":
        fields.update(
            d_targets=args.d or [],
            se=SeMethod(args.se),
            bootstrap_reps=args.bootstrap_reps,
            wald_null=args.wald_null,
            seed=args.seed,
        )
    elif args.command == "simulate":
        fields.update(
            table=SimTable(args.table),
            panel=args.panel,
            n=args.n,
            reps=args.reps,
            seed=args.seed,
            target_source=TargetSource(args.target_source),
            full=args.full,
            emit_data=args.emit_data,
        )
    elif args.command == "demo":
        fields.update(n=args.n, seed=args.seed)
    elif args.command == "weights":
        fields.update(weights_path=args.weights_csv)
    return RunConfig(**fields)


# ---------------------------------------------------------------------------
# Input and output
# ---------------------------------------------------------------------------

def load_dataset(config: RunConfig) -> Dataset:
    """Read the bound columns of the input CSV into a Dataset."""
    try:
        frame = pd.read_csv(config.input_path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InvalidConfig(f"cannot read {config.input_path}: {e}") from e

    columns = [config.outcome, config.treatment, *config.covariates]
    available = [str(c) for c in frame.columns]
    for column in columns:
        if column not in frame.columns:
            raise ColumnNotFound(column, available)

    values = {}
    for column in columns:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        missing = np.flatnonzero(numeric.isna().to_numpy())
        if missing.size:
            raise MissingValues(column, int(missing[0]))
        values[column] = numeric.to_numpy(dtype=float)

    d = values[config.treatment]
    n_treatments = config.num_treatments or max(1, int(np.floor(d.max())))
    x_cols = [values[c] for c in config.covariates]
    labels = list(config.covariates)
    if config.add_constant:
        x_cols.insert(0, np.ones(len(frame)))
        labels.insert(0, "const")
    x = np.column_stack(x_cols) if x_cols else np.zeros((len(frame), 0))

    logger.info("Read %d rows from %s", len(frame), config.input_path)
    return Dataset(
        y=values[config.outcome],
        d=d,
        x=x,
        n_treatments=n_treatments,
        x_labels=labels,
    )


def _write_output(output: str, path: str | None) -> None:
    if path:
        with open(path, "w") as f:
            f.write(output)
        print(f"Report written to {path}", file=sys.stderr)
    else:
        print(output)


def _propensity_config(config: RunConfig) -> PropensityConfig:
    return PropensityConfig(kind=config.propensity, mnl_layout=config.mnl_layout)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _estimate_variant(
    config: RunConfig,
    dataset: Dataset,
    fit: PropensityFit,
    prop_config: PropensityConfig,
    variant: CenteringVariant,
    targets: list[int],
) -> tuple[list[EstimateRow], CovarianceSummary | None]:
    """Rows for every target under one centering, plus their joint covariance."""
    kind = variant.kind
    rows: list[EstimateRow] = []
    estimates = []
    for d in targets:
        est = estimate_subsample(dataset, fit, d, variant)
        var = asy_variance(est, fit, dataset)
        est.asy_sd = var.asy_sd
        estimates.append(est)

        boot = None
        if config.se == SeMethod.BOOTSTRAP:
            print(f"  bootstrap d={d} ({kind.value})...", file=sys.stderr)
            boot = bootstrap_se(
                dataset, prop_config, d, variant,
                n_reps=config.bootstrap_reps, seed=config.seed, n_jobs=config.threads,
            )
        diag = est.diagnostics
        rows.append(EstimateRow(
            d=d,
            variant=kind,
            q=variant.order,
            beta_hat=est.beta_hat,
            asy_sd=var.asy_sd,
            naive_sd=var.naive_sd,
            t_value=est.beta_hat / var.asy_sd,
            n_sub=est.n_sub,
            pi_min=diag.min,
            pi_median=diag.median,
            pi_max=diag.max,
            n_pi_below=diag.n_below,
            n_pi_above=diag.n_above,
            bootstrap_se=boot.se if boot else None,
            bootstrap_failed=boot.n_failed if boot else None,
        ))

    if len(targets) < 2:
        return rows, None
    null = np.asarray(config.wald_null) if config.wald_null is not None else None
    cov = asy_covariance(estimates, fit, dataset, null=null)
    return rows, CovarianceSummary(
        variant=kind,
        targets=cov.targets,
        cov_matrix=cov.cov_matrix.tolist(),
        wald=cov.wald,
        wald_df=cov.wald_df,
        wald_pvalue=cov.wald_pvalue,
    )


def _cmd_estimate(config: RunConfig) -> None:
    """Fit the treatment model once, then every (variant, target) estimate.

    A centering whose basis is rank deficient on this data is skipped.
    """
    dataset = load_dataset(config)
    prop_config = _propensity_config(config)
    fit = fit_propensity(dataset, prop_config)
    targets = config.d_targets or list(range(1, dataset.n_treatments + 1))
    print(
        f"Fitted {fit.kind.value} on {dataset.n} rows in {fit.iterations} iterations",
        file=sys.stderr,
    )

    rows: list[EstimateRow] = []
    covariances: list[CovarianceSummary] = []
    for kind in config.variants:
        variant = CenteringVariant(kind=kind, q=config.q, pooled_mean=config.pooled_mean)
        try:
            variant_rows, cov = _estimate_variant(
                config, dataset, fit, prop_config, variant, targets
            )
        except RankDeficient as exc:
            logger.warning("Skipping %s centering: %s", kind.value, exc)
            print(f"Skipped {kind.value} centering: {exc}", file=sys.stderr)
            continue
        rows.extend(variant_rows)
        if cov is not None:
            covariances.append(cov)

    report = EstimationReport(
        input=config.input_path,
        n=dataset.n,
        n_treatments=dataset.n_treatments,
        propensity=fit.kind,
        param_labels=fit.param_labels,
        alpha_hat=fit.alpha_hat.tolist(),
        loglik=fit.loglik,
        iterations=fit.iterations,
        rows=rows,
        covariances=covariances,
    )
    _write_output(render(report, config.output_format), config.output_path)


def _cmd_simulate(config: RunConfig) -> None:
    """Run the requested panel at one sample size, or the full grid with --full."""
    variants = [
        CenteringVariant(kind=kind, q=config.q, pooled_mean=config.pooled_mean)
        for kind in config.variants
    ]
    sizes = list(FULL_SIZES) if config.full else [config.n]
    reps = FULL_REPS if config.full else config.reps

    if config.emit_data:
        sample = generate(panel_spec(config.table, config.panel, sizes[0], config.seed))
        sample_frame(sample).to_csv(
            config.emit_data, index=False, float_format=CSV_FLOAT_FORMAT
        )
        print(f"Sample written to {config.emit_data}", file=sys.stderr)

    reports = []
    for n in sizes:
        spec = panel_spec(config.table, config.panel, n, config.seed)
        print(
            f"Simulating {config.table.value} panel {config.panel}, N={n}, {reps} reps...",
            file=sys.stderr,
        )
        reports.append(run_monte_carlo(
            spec, variants, reps,
            n_jobs=config.threads,
            target_source=config.target_source,
            panel=config.panel,
        ))
    _write_output(render_many(reports, config.output_format), config.output_path)


def _cmd_demo(config: RunConfig) -> None:
    print(f"Usual OLS on N={config.n} (seed {config.seed})...", file=sys.stderr)
    report = usual_ols_demo(n=config.n, seed=config.seed)
    _write_output(render(report, config.output_format), config.output_path)


def _cmd_weights(config: RunConfig) -> None:
    """Overlap weights for every category; contamination weights when X is discrete."""
    dataset = load_dataset(config)
    fit = fit_propensity(dataset, _propensity_config(config))

    per_obs = pd.DataFrame(index=range(dataset.n))
    summaries: list[WeightSummary] = []
    for d in range(1, dataset.n_treatments + 1):
        w = overlap_weights(fit, d).w
        per_obs[f"ow{d}"] = w
        q25, median, q75 = np.quantile(w, [0.25, 0.5, 0.75])
        summaries.append(WeightSummary(
            d=d,
            min=float(w.min()),
            q25=float(q25),
            median=float(median),
            q75=float(q75),
            max=float(w.max()),
            mean=float(w.mean()),
        ))

    report = WeightsReport(
        input=config.input_path,
        n=dataset.n,
        n_treatments=dataset.n_treatments,
        overlap=summaries,
    )
    try:
        contamination = contamination_report(dataset)
    except ContinuousCovariate as e:
        logger.warning("Contamination weights skipped: %s", e)
        report.contamination_skipped = str(e)
    else:
        omega = contamination.omega
        report.contamination_means = contamination.weight_means.tolist()
        report.usual_ols_slopes = contamination.usual_ols_slopes.tolist()
        report.conjectured = contamination.conjectured
        if dataset.n_treatments <= 3:
            closed = closed_form_weights(conditional_cov(dataset))
            report.closed_form_max_diff = float(np.max(np.abs(closed - omega)))
        for k in range(dataset.n_treatments):
            for j in range(dataset.n_treatments):
                per_obs[f"omega{k + 1}_{j + 1}"] = omega[:, k, j]

    if config.weights_path:
        per_obs.to_csv(config.weights_path, index=False, float_format=CSV_FLOAT_FORMAT)
        print(f"Weights written to {config.weights_path}", file=sys.stderr)
    _write_output(render(report, config.output_format), config.output_path)


if __name__ == "__main__":
    main()
