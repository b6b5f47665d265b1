"""Command-line front end wiring the pipeline end to end.

Subcommands: ``fit`` (learn a model from visits), ``track`` (filter one
patient's coefficient tensors), ``monitor`` (control chart over tensors or
visits), ``simulate`` (scenario to visit CSV), ``predict`` (emergence
probabilities).  Every run is a pure function of its inputs, flags and seed.
Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import DataError, NumericalError
from .io import (
    ModelFile,
    VisitRow,
    VisitSchema,
    parse_visits,
    read_model,
    read_tensor_series,
    write_chart_series,
    write_chart_svg,
    write_model,
    write_tensor_series,
    write_visits,
)
from .kalman import FilterConfig, run_filter, stability_report, visit_observations
from .learn import FitConfig, cross_validate, extract_structure, fit_group_lasso, fit_mle
from .monitor import MultilinearPCA, chart_calibrate, monitor_stream
from .network import REFERENCE_CONDITIONS, FactorSchema, reference_factor_schema
from .simulate import load_reference_truth, parse_scenario, run_scenario

EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


@click.group()
@click.version_option(version=__version__)
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker processes for cross-validation folds (never changes results).")
@click.option("--quiet", is_flag=True, help="Suppress progress output.")
@click.pass_context
def main(ctx, threads, quiet):
    """Dynamic functional continuous-time Bayesian network toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads
    ctx.obj["quiet"] = quiet


def _echo(ctx, message):
    if not ctx.obj.get("quiet"):
        click.echo(message)


def _load_visit_schema(path, conditions, factors):
    condition_names = tuple(conditions.split(",")) if conditions else REFERENCE_CONDITIONS
    reference = reference_factor_schema()
    factor_names = tuple(factors.split(",")) if factors else reference.names
    if factor_names == reference.names:
        return VisitSchema(condition_names, reference)
    # non-reference factor layout: derive encoding constants from the data
    import csv as _csv

    file_path = Path(path)
    if not file_path.exists():
        raise DataError(f"visit file not found: {file_path}")
    with file_path.open(newline="") as handle:
        reader = _csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{file_path}: empty file (header row is mandatory)")
        try:
            indices = [header.index(name) for name in factor_names]
        except ValueError as exc:
            raise DataError(f"{file_path}: {exc}") from None
        values = []
        for row in reader:
            if row and any(cell.strip() for cell in row):
                values.append([float(row[i]) for i in indices])
    if not values:
        raise DataError(f"{file_path}: no data rows to derive factor encodings from")
    return VisitSchema(condition_names, FactorSchema.from_values(factor_names, values))


@main.command()
@click.argument("visits", type=click.Path())
@click.option("-o", "--output", "model_out", required=True, type=click.Path())
@click.option("--lambda", "lam", type=float, default=None,
              help="Group-lasso penalty weight; 0 gives the plain MLE.")
@click.option("--cv", "cv_grid", type=str, default=None,
              help="Comma-separated penalty grid; selects by cross-validation.")
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--conditions", type=str, default=None, help="Comma-separated condition columns.")
@click.option("--factors", type=str, default=None, help="Comma-separated factor columns.")
@click.option("--edge-threshold", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=500, show_default=True)
@click.pass_context
@_handles_errors
def fit(ctx, visits, model_out, lam, cv_grid, folds, conditions, factors,
        edge_threshold, max_iter):
    """Learn structure and coefficients from a visit CSV."""
    if lam is None and cv_grid is None:
        raise DataError("pass either --lambda or --cv")
    schema = _load_visit_schema(visits, conditions, factors)
    trajectories, report = parse_visits(visits, schema)
    _echo(ctx, f"parsed {report.n_rows} rows, {report.n_patients} patients "
               f"({report.n_dropped} dropped)")
    config = FitConfig(cv_folds=folds, max_iter=max_iter, edge_threshold=edge_threshold)
    cv_curve = None
    if cv_grid is not None:
        grid = [float(v) for v in cv_grid.split(",")]
        lam, cv_curve = cross_validate(trajectories, grid, config, n_jobs=ctx.obj["threads"])
        _echo(ctx, "cross-validation (lambda, held-out NLL):")
        for value, nll in zip(cv_curve.lambdas, cv_curve.mean_nll):
            _echo(ctx, f"  {value:g}\t{nll:.6f}")
        _echo(ctx, f"selected lambda = {lam:g}")
    if lam == 0.0:
        params = fit_mle(trajectories, config)
    else:
        from dataclasses import replace

        params = fit_group_lasso(trajectories, replace(config, lam=lam))
    structure = extract_structure(params, edge_threshold)
    metadata = {"command": "fit", "n_patients": report.n_patients}
    if cv_curve is not None:
        metadata["cv_curve"] = {
            "lambdas": [float(v) for v in cv_curve.lambdas],
            "mean_nll": [float(v) for v in cv_curve.mean_nll],
        }
    write_model(
        model_out,
        params,
        structure=structure,
        condition_names=schema.condition_names,
        factor_schema=schema.factor_schema,
        penalty_weight=lam,
        metadata=metadata,
    )
    _echo(ctx, f"model written to {model_out} ({int(structure.sum())} edges)")


def _select_trajectory(trajectories, patient):
    for traj in trajectories:
        if traj.patient_id == patient:
            return traj
    raise DataError(f"unknown patient id {patient!r}")


@main.command()
@click.argument("model", type=click.Path())
@click.argument("visits", type=click.Path())
@click.option("--patient", required=True, help="Patient id to track.")
@click.option("-o", "--output", "tensors_out", required=True, type=click.Path())
@click.option("--diagnostics", type=click.Path(), default=None,
              help="Per-visit diagnostics CSV (default: <output>.diagnostics.csv).")
@click.option("--process-noise", type=float, default=1e-4, show_default=True)
@click.option("--initial-cov", type=float, default=1e-2, show_default=True)
@click.option("--track-groups", type=click.Choice(["surviving", "all"]),
              default="surviving", show_default=True)
@click.option("--pin-factors", is_flag=True,
              help="Keep the filter's design vector at the first visit's factors "
                   "(monitoring semantics).")
@click.pass_context
@_handles_errors
def track(ctx, model, visits, patient, tensors_out, diagnostics, process_noise,
          initial_cov, track_groups, pin_factors):
    """Filter one patient's coefficient tensors through their visits."""
    model_file = read_model(model)
    trajectories, _ = parse_visits(visits, model_file.visit_schema)
    traj = _select_trajectory(trajectories, patient)
    design = traj.events[0].risk_factors if pin_factors else None
    observations = visit_observations(traj, design=design)
    config = FilterConfig(
        process_noise=process_noise, initial_cov=initial_cov, track=track_groups
    )
    states, tensors = run_filter(model_file.params, observations, config)
    times = [traj.events[0].time] + [e.time for e in traj.events[1:]]
    write_tensor_series(tensors_out, times[: len(tensors)], tensors)
    diag_path = diagnostics or f"{tensors_out}.diagnostics.csv"
    base = tensors[0]
    with Path(diag_path).open("w", newline="") as handle:
        handle.write("index,time,innovation_norm,cov_trace,mse_vs_initial\n")
        for idx, (state, tensor) in enumerate(zip(states, tensors)):
            innovation = "" if state.innovation_norm is None else repr(state.innovation_norm)
            mse = float(np.mean((tensor - base) ** 2))
            handle.write(
                f"{idx},{times[idx] if idx < len(times) else ''},{innovation},"
                f"{repr(float(np.trace(state.cov)))},{repr(mse)}\n"
            )
    report = stability_report(states)
    _echo(ctx, f"{len(tensors) - 1} visit updates written to {tensors_out}")
    if report.violated:
        _echo(ctx, f"stability conditions violated: {', '.join(report.violated)}")
    else:
        _echo(ctx, "stability conditions satisfied")


@main.command()
@click.argument("model", type=click.Path())
@click.option("--tensors", "tensors_path", type=click.Path(), default=None,
              help="Tensor series from `track`.")
@click.option("--visits", "visits_path", type=click.Path(), default=None,
              help="Visit CSV; runs the filter internally (factors pinned to baseline).")
@click.option("--patient", default=None, help="Patient id (with --visits).")
@click.option("--phase1", type=int, required=True, help="Calibration sample count.")
@click.option("--lambda-ewma", type=float, default=0.15, show_default=True)
@click.option("--L", "width", type=float, default=1.5, show_default=True)
@click.option("--target-dims", type=str, default=None,
              help="Comma-separated per-mode subspace sizes (default: auto at 97%).")
@click.option("--multivariate", is_flag=True,
              help="Chart the T-squared of residual features instead of the norm.")
@click.option("--signal-on", type=click.Choice(["upper", "both"]), default="upper",
              show_default=True)
@click.option("-o", "--output", "chart_out", required=True, type=click.Path())
@click.option("--svg", "svg_out", type=click.Path(), default=None)
@click.pass_context
@_handles_errors
def monitor(ctx, model, tensors_path, visits_path, patient, phase1, lambda_ewma,
            width, target_dims, multivariate, signal_on, chart_out, svg_out):
    """Calibrate on the first N tensors and chart the remainder."""
    model_file = read_model(model)
    if (tensors_path is None) == (visits_path is None):
        raise DataError("pass exactly one of --tensors or --visits")
    if tensors_path is not None:
        times, tensors = read_tensor_series(tensors_path)
        tensors = tensors[1:]  # drop the initial (pre-update) tensor
        times = times[1:]
    else:
        if patient is None:
            raise DataError("--visits requires --patient")
        trajectories, _ = parse_visits(visits_path, model_file.visit_schema)
        traj = _select_trajectory(trajectories, patient)
        observations = visit_observations(traj, design=traj.events[0].risk_factors)
        _, tensors = run_filter(model_file.params, observations, FilterConfig())
        tensors = tensors[1:]
        times = [e.time for e in traj.events[1:]]
    if phase1 < 2 or phase1 > len(tensors):
        raise NumericalError(
            f"phase-I length {phase1} exceeds the {len(tensors)} available samples"
            if phase1 > len(tensors)
            else "phase-I length must be at least 2"
        )
    dims = tuple(int(v) for v in target_dims.split(",")) if target_dims else None
    mpca = MultilinearPCA(target_dims=dims).fit(np.stack(tensors[:phase1]))
    phase1_errors = mpca.reconstruction_error(np.stack(tensors[:phase1]))[1]
    if multivariate:
        residuals, _ = mpca.reconstruction_error(np.stack(tensors[:phase1]))
        phase1_errors = residuals.reshape(phase1, -1)
    chart = chart_calibrate(phase1_errors, lambda_ewma, width, signal_on=signal_on)
    series = monitor_stream(mpca, chart, tensors[phase1:], times=times[phase1:])
    write_chart_series(chart_out, series)
    if svg_out:
        write_chart_svg(svg_out, series)
    n_signals = sum(p.signal for p in series)
    _echo(ctx, f"{len(series)} monitored points, {n_signals} signals -> {chart_out}")


@main.command()
@click.argument("truth", type=str)
@click.argument("scenario", type=click.Path())
@click.option("-o", "--output", "visits_out", required=True, type=click.Path())
@click.option("--visits-only", is_flag=True,
              help="Write scheduled visit rows only (drop transition-time rows).")
@click.option("--chart", "chart_out", type=click.Path(), default=None,
              help="Also write the scenario's chart series.")
@click.option("--report", "report_out", type=click.Path(), default=None,
              help="Also write the detection report (JSON).")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.pass_context
@_handles_errors
def simulate(ctx, truth, scenario, visits_out, visits_only, chart_out, report_out, seed):
    """Run a scenario spec against a truth model and emit its visit CSV.

    TRUTH is a model file path, or the word 'reference' for the packaged
    ground-truth fixture.
    """
    if truth == "reference":
        params = load_reference_truth()
        schema = reference_factor_schema()
        conditions = REFERENCE_CONDITIONS
    else:
        model_file = read_model(truth)
        params = model_file.params
        schema = model_file.factor_schema
        conditions = model_file.condition_names
    spec = parse_scenario(scenario)
    if seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=seed)
    result = run_scenario(params, spec, schema=schema)
    rows = result.rows
    if visits_only:
        dt = spec.interval
        rows = [r for r in rows if abs(r.time / dt - round(r.time / dt)) < 1e-9]
    write_visits(visits_out, rows, VisitSchema(conditions, schema))
    _echo(ctx, f"{len(rows)} rows written to {visits_out}")
    if chart_out:
        write_chart_series(chart_out, result.series)
    if report_out:
        detection = result.detection
        Path(report_out).write_text(
            json.dumps(
                {
                    "first_signal": detection.first_signal,
                    "signals": list(detection.signals),
                    "changes": [
                        {
                            "observation": c.observation,
                            "factor": c.factor,
                            "value": c.value,
                            "first_signal": c.first_signal,
                            "delay": c.delay,
                        }
                        for c in detection.changes
                    ],
                },
                indent=1,
            )
            + "\n"
        )
    if result.detection.signals:
        _echo(ctx, f"signals at observations {list(result.detection.signals)}")
    else:
        _echo(ctx, "no signals")


@main.command()
@click.argument("model", type=click.Path())
@click.option("--profile", required=True, help="Comma-separated 0/1 condition states.")
@click.option("--factor", "factor_values", multiple=True,
              help="Raw factor value as name=value (repeatable; all required).")
@click.option("--horizon", type=float, default=1.0, show_default=True,
              help="Prediction horizon in years.")
@_handles_errors
def predict(model, profile, factor_values, horizon):
    """Print per-condition emergence probabilities over a horizon."""
    model_file = read_model(model)
    states = np.array([int(v) for v in profile.split(",")], dtype=np.int8)
    if states.shape[0] != model_file.params.n_conditions:
        raise DataError(
            f"profile has {states.shape[0]} entries, model has "
            f"{model_file.params.n_conditions} conditions"
        )
    raw = {}
    for item in factor_values:
        if "=" not in item:
            raise DataError(f"--factor needs name=value, got {item!r}")
        name, value = item.split("=", 1)
        raw[name.strip()] = float(value)
    z = model_file.factor_schema.encode(raw)
    tensor = model_file.params.expand()
    from .network import emergence_probability

    for child, name in enumerate(model_file.condition_names):
        if states[child] == 1:
            click.echo(f"{name}\tactive")
        else:
            prob = emergence_probability(tensor, z, states, child, horizon)
            click.echo(f"{name}\t{prob:.6f}")


if __name__ == "__main__":
    main()
