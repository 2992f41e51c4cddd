"""Output renderer for hetfx reports.

JSON keeps full round-trip precision, CSV writes 17 significant digits and
the terminal tables (rich) show 6. All three formats read the same report
model, so their numbers agree.
"""

from __future__ import annotations

import io
import json

import pandas as pd
from rich.console import Console
from rich.table import Table

from .models import (
    CENTERING_LABELS,
    CenteringKind,
    DemoReport,
    EstimationReport,
    MonteCarloReport,
    OutputFormat,
    WeightsReport,
)

Report = MonteCarloReport | DemoReport | EstimationReport | WeightsReport

CSV_FLOAT_FORMAT = "%.17g"


def _num(value: float | None) -> str:
    return "-" if value is None else f"{value:.6g}"


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def render_json(report: Report) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def report_frame(report: Report) -> pd.DataFrame:
    """The tabular part of a report, one row per estimate."""
    if isinstance(report, MonteCarloReport):
        return pd.DataFrame([
            {
                "table": report.table.value,
                "panel": report.panel,
                "n": report.n,
                "estimator": row.estimator,
                "d": row.d,
                "abs_bias": row.abs_bias,
                "sd": row.sim_sd,
                "sd_asy": row.avg_asy_sd,
                "rmse": row.rmse,
            }
            for row in report.rows
        ])
    if isinstance(report, EstimationReport):
        return pd.DataFrame([row.model_dump(mode="json") for row in report.rows])
    if isinstance(report, DemoReport):
        naive = dict(zip(report.labels, report.naive_target))
        return pd.DataFrame({
            "term": report.labels,
            "ols_coef": report.ols_coef,
            "t_value": report.ols_t_values,
            "naive_target": [naive[label] for label in report.labels],
        })
    return pd.DataFrame([summary.model_dump(mode="json") for summary in report.overlap])


def render_csv(report: Report) -> str:
    return report_frame(report).to_csv(index=False, float_format=CSV_FLOAT_FORMAT)


# ---------------------------------------------------------------------------
# Rich tables
# ---------------------------------------------------------------------------

def _monte_carlo_table(report: MonteCarloReport) -> Table:
    spec = report.error_dist.value if report.table.value == "ordinal" else report.family.value
    misspec = ", regression misspecified" if report.regression_misspec else ""
    table = Table(
        title=(
            f"{report.table.value.title()} D=0,1,2, panel {report.panel} "
            f"({spec}{misspec}), N={report.n}, {report.reps} reps"
        )
    )
    for header in ("estimator", "|bias|", "SD", "SD_asy", "RMSE"):
        table.add_column(header, justify="right")
    for row in report.rows:
        table.add_row(
            row.estimator, _num(row.abs_bias), _num(row.sim_sd),
            _num(row.avg_asy_sd), _num(row.rmse),
        )
    if report.n_failed:
        table.caption = f"{report.n_failed} repetitions dropped"
    return table


def _estimation_tables(report: EstimationReport) -> list[Table]:
    fit = Table(
        title=f"{report.propensity.value} fit on {report.n} rows (loglik {_num(report.loglik)})"
    )
    fit.add_column("parameter")
    fit.add_column("estimate", justify="right")
    for label, value in zip(report.param_labels, report.alpha_hat):
        fit.add_row(label, _num(value))

    est = Table(title="Subsample residual regression")
    for header in ("d", "centering", "q", "beta", "asy SD", "t", "n_sub",
                   "pi min/med/max", "extreme", "boot SE"):
        est.add_column(header, justify="right")
    for row in report.rows:
        est.add_row(
            str(row.d), row.variant.value, str(row.q), _num(row.beta_hat),
            _num(row.asy_sd), _num(row.t_value), str(row.n_sub),
            f"{_num(row.pi_min)}/{_num(row.pi_median)}/{_num(row.pi_max)}",
            str(row.n_pi_below + row.n_pi_above), _num(row.bootstrap_se),
        )
    tables = [fit, est]

    for cov in report.covariances:
        joint = Table(
            title=f"Joint covariance, {cov.variant.value} (Wald p = {_num(cov.wald_pvalue)})"
        )
        joint.add_column("")
        for d in cov.targets:
            joint.add_column(f"d={d}", justify="right")
        for d, row in zip(cov.targets, cov.cov_matrix):
            joint.add_row(f"d={d}", *[_num(v) for v in row])
        tables.append(joint)
    return tables


def _demo_table(report: DemoReport) -> Table:
    table = Table(title=f"Usual OLS of Y on (1, D1, D2, X2), N={report.n}")
    for header in ("term", "OLS (t)", "naive target", "OLS estimand"):
        table.add_column(header, justify="right")
    estimand = {"D1": report.estimand[0], "D2": report.estimand[1]}
    for label, coef, t, naive in zip(
        report.labels, report.ols_coef, report.ols_t_values, report.naive_target
    ):
        table.add_row(label, f"{_num(coef)} ({t:.1f})", _num(naive), _num(estimand.get(label)))
    table.caption = "gap |OLS - naive|: " + ", ".join(_num(g) for g in report.contamination_gap)
    return table


def _weights_tables(report: WeightsReport) -> list[Table]:
    ow = Table(title=f"Overlap weights, N={report.n}")
    for header in ("d", "min", "q25", "median", "q75", "max", "mean"):
        ow.add_column(header, justify="right")
    for s in report.overlap:
        ow.add_row(str(s.d), *[_num(v) for v in (s.min, s.q25, s.median, s.q75, s.max, s.mean)])
    tables = [ow]
    if report.contamination_means is not None:
        title = "Mean contamination weights omega_kj"
        if report.conjectured:
            title += " (conjectured decomposition)"
        cw = Table(title=title)
        cw.add_column("k")
        for j in range(1, report.n_treatments + 1):
            cw.add_column(f"j={j}", justify="right")
        for k, row in enumerate(report.contamination_means, start=1):
            cw.add_row(str(k), *[_num(v) for v in row])
        if report.usual_ols_slopes is not None:
            cw.caption = "usual OLS slopes: " + ", ".join(_num(b) for b in report.usual_ols_slopes)
        tables.append(cw)
    return tables


def render_table(report: Report) -> str:
    """Human-readable tables, numbers to 6 significant digits."""
    if isinstance(report, MonteCarloReport):
        tables = [_monte_carlo_table(report)]
    elif isinstance(report, EstimationReport):
        tables = _estimation_tables(report)
    elif isinstance(report, DemoReport):
        tables = [_demo_table(report)]
    else:
        tables = _weights_tables(report)

    buffer = io.StringIO()
    console = Console(file=buffer, width=120, force_terminal=False, color_system=None)
    for table in tables:
        console.print(table)
    if isinstance(report, WeightsReport) and report.contamination_skipped:
        console.print(f"contamination weights skipped: {report.contamination_skipped}")
    return buffer.getvalue()


def centering_legend() -> str:
    return "\n".join(f"  {kind.value:<10} {CENTERING_LABELS[kind]}" for kind in CenteringKind)


def render(report: Report, fmt: OutputFormat) -> str:
    if fmt == OutputFormat.JSON:
        return render_json(report)
    if fmt == OutputFormat.CSV:
        return render_csv(report)
    return render_table(report)


def render_many(reports: list[Report], fmt: OutputFormat) -> str:
    """Several reports as one document: a JSON array, one CSV table or stacked tables."""
    if len(reports) == 1:
        return render(reports[0], fmt)
    if fmt == OutputFormat.JSON:
        return json.dumps([r.model_dump(mode="json") for r in reports], indent=2)
    if fmt == OutputFormat.CSV:
        frame = pd.concat([report_frame(r) for r in reports], ignore_index=True)
        return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT)
    return "".join(render_table(r) for r in reports)
