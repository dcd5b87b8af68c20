# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Configuration-driven experiment runner.

`run` executes one experiment end to end and persists a report, flat CSV tables,
the solver log and a run record; `sweep` repeats a base experiment along one axis;
`emit_plot_data` turns persisted series into tidy CSVs for plotting.
"""

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from cluster_expansion import (
    CoefficientForm,
    ContextFactory,
    Estimate,
    LocalFunctionalSpec,
    MCParams,
    RunDiagnostics,
    Verdict,
    cluster_coefficient,
    convergence_sweep,
    direct_coefficient,
    geometric_growth,
    gevrey_fit,
    moment_inequality_ratio,
    run_realizations,
    s_envelope_fit,
    s_table,
    stability_check,
    stderr_scaling,
    taylor_report,
    truncation_doubling,
)
from corrector_solver import SolverParams, homogenized_matrix, locality_probe, write_corrector
from difference_calculus import WindowPolicy
from errors import ConfigError, LabError
from inclusion_field import (
    CoefficientField,
    Grid,
    MaterialPair,
    checkerboard_background,
    write_coefficients,
)
from lab_config import ExperimentConfig, dump_config, with_axis
from oracle import homogenized_1d, taylor_coefficients_1d
from point_process import Box, Seed, dump_cloud
from reports import (
    CSV_COLUMNS,
    ExperimentResult,
    ResultRow,
    RunRecord,
    artifact_version,
    csv_text,
    manifest,
    report_document,
    result_csv_rows,
    write_json,
    write_results_csv,
    write_series_csv,
    write_solver_log,
    write_text,
)

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
RESULTS_FILE = "results.csv"
SOLVER_LOG_FILE = "solver_log.csv"
CONFIG_FILE = "config.yaml"
RECORD_FILE = "run_record.json"
SWEEP_FILE = "sweep.csv"
PLOT_DIR = "plot_data"

EXIT_CODES = {Verdict.PASS: 0, Verdict.INCONCLUSIVE: 2, Verdict.FAIL: 1}


def exit_code(verdict: Union[str, Verdict]) -> int:
    """0 for pass, 2 for inconclusive, 1 for fail."""
    return EXIT_CODES[Verdict(verdict)]


def overall(checks: Dict[str, Verdict]) -> Verdict:
    """Worst verdict among the checks; PASS when there are none."""
    values = set(Verdict(v) for v in checks.values())
    if Verdict.FAIL in values:
        return Verdict.FAIL
    if Verdict.INCONCLUSIVE in values:
        return Verdict.INCONCLUSIVE
    return Verdict.PASS


class WarningCollector(logging.Handler):
    """Keeps the formatted text of every warning emitted while attached."""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(f"{record.name}: {record.getMessage()}")


@contextmanager
def _collect_warnings() -> Iterator[WarningCollector]:
    collector = WarningCollector()
    root = logging.getLogger()
    root.addHandler(collector)
    try:
        yield collector
    finally:
        root.removeHandler(collector)


@dataclass
class StageTimer:
    """Wall time per named stage, in the order the stages ran."""

    timings: Dict[str, float] = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        logger.info("stage %s started", name)
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = self.timings.get(name, 0.0) + elapsed
            logger.info("stage %s finished in %.3fs", name, elapsed)


def build_box(config: ExperimentConfig) -> Box:
    return Box(config.physics.d, config.physics.L)


def build_grid(config: ExperimentConfig) -> Grid:
    grid = Grid(build_box(config), config.physics.n)
    if config.physics.production:
        grid.check_resolution()
    return grid


def build_materials(config: ExperimentConfig, grid: Grid) -> MaterialPair:
    """Two-phase material from config; a checkerboard background replaces A1 cell-wise."""
    cfg = config.materials
    d = config.physics.d
    A1 = np.asarray(cfg.A1, dtype=float) if cfg.A1 is not None else cfg.alpha * np.eye(d)
    A2 = np.asarray(cfg.A2, dtype=float) if cfg.A2 is not None else cfg.beta * np.eye(d)
    if cfg.background == "constant":
        return MaterialPair(A1, A2, cfg.alpha, cfg.beta)
    high = cfg.checkerboard_high if cfg.checkerboard_high is not None else cfg.beta
    try:
        background = checkerboard_background(grid, A1, high * np.eye(d), cfg.checkerboard_period)
    except LabError as e:
        raise ConfigError(str(e), "materials.checkerboard_period") from e
    return MaterialPair(A1, A2, cfg.alpha, cfg.beta, background)


def build_solver(config: ExperimentConfig) -> SolverParams:
    cfg = config.solver
    return SolverParams(
        T=config.physics.T,
        e=tuple(config.physics.e),
        tolerance=cfg.tolerance,
        max_iterations=cfg.max_iterations,
        face_rule=cfg.face_rule,
        check_energy=cfg.check_energy,
    )


def build_factory(config: ExperimentConfig) -> ContextFactory:
    grid = build_grid(config)
    window = WindowPolicy(config.solver.c1, config.solver.eps_loc) if config.solver.window else None
    return ContextFactory(
        box=grid.box,
        grid=grid,
        intensity=config.physics.intensity,
        h=config.physics.h,
        materials=build_materials(config, grid),
        solver=build_solver(config),
        subset_cap=config.solver.subset_cap,
        window=window,
        cache_cells=config.solver.cache_cells,
    )


def build_mc(config: ExperimentConfig, diagnostics: Optional[RunDiagnostics] = None) -> MCParams:
    mc = config.monte_carlo
    return MCParams(
        n_realizations=mc.n_realizations,
        seed=mc.seed,
        rho_trunc=config.truncation.rho,
        c0=config.truncation.c0,
        eps_trunc=config.truncation.eps,
        confidence=mc.confidence,
        workers=mc.workers,
        max_failure_rate=mc.max_failure_rate,
        diagnostics=diagnostics,
    )


def metadata(config: ExperimentConfig) -> Dict[str, object]:
    physics = config.physics
    return {
        "lambda": physics.intensity,
        "T": physics.T,
        "h": physics.h,
        "L": physics.L,
        "n": physics.n,
        "N": config.monte_carlo.n_realizations,
        "d": physics.d,
        "seed": config.monte_carlo.seed,
        "alpha": config.materials.alpha,
        "beta": config.materials.beta,
        "face_rule": config.solver.face_rule,
        "form": config.coefficient_form,
        "e": physics.e,
    }


@dataclass
class Experiment:
    """Everything an experiment function needs besides the config."""

    config: ExperimentConfig
    factory: ContextFactory
    mc: MCParams
    timer: StageTimer


def _coefficient_series(coefficients: Sequence[Estimate]) -> List[Dict[str, float]]:
    series = []
    for j, est in enumerate(coefficients):
        scale = math.factorial(j) ** 2
        series.append(
            {
                "j": j,
                "estimate": est.mean,
                "stderr": est.stderr,
                "scaled": abs(est.mean) / scale,
                "scaled_stderr": est.stderr / scale,
            }
        )
    return series


def _run_direct(exp: Experiment) -> ExperimentResult:
    p = exp.config.expansion.p
    with exp.timer.stage("direct"):
        est = direct_coefficient(exp.factory, p, exp.mc)
    rows = [ResultRow.from_estimate("direct", est, p=p)]
    checks: Dict[str, Verdict] = {}
    if exp.config.expansion.full_matrix:
        with exp.timer.stage("full_matrix"):
            matrix_rows, symmetric = _full_matrix(exp, p)
        rows += matrix_rows
        checks["symmetry"] = symmetric
    return ExperimentResult(rows, overall(checks).value, {k: v.value for k, v in checks.items()})


def _full_matrix(exp: Experiment, p: float):
    """Every entry of the homogenized matrix, and a symmetry check on paired samples."""
    d = exp.factory.grid.d
    seed = Seed(exp.mc.seed)

    def entries(ctx) -> List[float]:
        matrix = homogenized_matrix(ctx.coefficients(ctx.thinned(p, seed)), ctx.params)
        asymmetry = [matrix[i, j] - matrix[j, i] for i in range(d) for j in range(i + 1, d)]
        return list(matrix.ravel()) + asymmetry

    samples = run_realizations(exp.factory, exp.mc, entries)
    rows = []
    for i in range(d):
        for j in range(d):
            est = samples.estimate(i * d + j, exp.mc.z)
            rows.append(ResultRow.from_estimate("matrix_entry", est, j=i, k=j, p=p))
    verdict = Verdict.PASS
    for column in range(d * d, samples.samples.shape[1]):
        gap = samples.estimate(column, exp.mc.z)
        if not gap.within(0.0, 3.0, slack=1e-12):
            logger.warning("homogenized matrix asymmetry %.3g +- %.2g", gap.mean, gap.stderr)
            verdict = Verdict.FAIL
    return rows, verdict


def _run_cluster(exp: Experiment) -> ExperimentResult:
    expansion = exp.config.expansion
    form = CoefficientForm(exp.config.coefficient_form)
    coefficients = []
    with exp.timer.stage("coefficients"):
        for j in range(expansion.max_order + 1):
            coefficients.append(cluster_coefficient(exp.factory, j, exp.mc, form))
    rows = [ResultRow.from_estimate("cluster_coefficient", c, j=j) for j, c in enumerate(coefficients)]
    checks: Dict[str, Verdict] = {}
    fits: Dict[str, object] = {}
    if expansion.max_order >= 3:
        fit = gevrey_fit(coefficients)
        checks["gevrey"] = fit.verdict
        fits["gevrey"] = {
            "constant": fit.constant,
            "slope": fit.slope,
            "intercept": fit.intercept,
            "curvature": list(fit.curvature),
            "orders": list(fit.used_orders),
        }
    if exp.config.truncation.doubling_check and expansion.max_order >= 1:
        with exp.timer.stage("truncation_doubling"):
            check = truncation_doubling(exp.factory, expansion.max_order, exp.mc, form)
        checks["truncation_doubling"] = check.verdict
        rows.append(ResultRow.from_estimate("truncation_shift", check.shift, j=expansion.max_order))
    return ExperimentResult(
        rows,
        overall(checks).value,
        {k: v.value for k, v in checks.items()},
        fits,
        {"coefficients": _coefficient_series(coefficients)},
    )


def _run_taylor(exp: Experiment) -> ExperimentResult:
    expansion = exp.config.expansion
    with exp.timer.stage("taylor"):
        report = taylor_report(
            exp.factory,
            expansion.k,
            expansion.p_grid,
            exp.mc,
            CoefficientForm(exp.config.coefficient_form),
            expansion.with_bound,
        )
    rows = [
        ResultRow.from_estimate("cluster_coefficient", c, j=j) for j, c in enumerate(report.coefficients)
    ]
    expansion_series = []
    remainder_series = []
    bound_checks: Dict[str, Verdict] = {}
    for row in report.rows:
        rows.append(ResultRow.from_estimate("direct", row.direct, p=row.p))
        rows.append(ResultRow.from_estimate("remainder", row.remainder, k=report.k, p=row.p))
        rows.append(ResultRow("partial_sum", row.partial_sum, None, row.direct.n_samples, k=report.k, p=row.p))
        expansion_series.append(
            {
                "p": row.p,
                "direct": row.direct.mean,
                "direct_stderr": row.direct.stderr,
                "partial_sum": row.partial_sum,
            }
        )
        remainder_series.append(
            {
                "p": row.p,
                "remainder": row.remainder.mean,
                "stderr": row.remainder.stderr,
                "bound_estimate": row.bound_estimate,
                "bound_stderr": row.bound_stderr,
                "quality": row.quality,
            }
        )
        if row.bound_estimate is not None:
            bound_checks[f"p={row.p:g}"] = row.bound_verdict()
            if bound_checks[f"p={row.p:g}"] is not Verdict.PASS:
                logger.warning(
                    "remainder %.3g +- %.2g at p=%g above its bound %.3g +- %.2g",
                    row.remainder.mean,
                    row.remainder.stderr,
                    row.p,
                    row.bound_estimate,
                    row.bound_stderr or 0.0,
                )
    checks = {"remainder_slope": report.verdict}
    if expansion.with_bound:
        checks["remainder_bound"] = overall(bound_checks)
    fits = {"remainder_slope": report.slope, "expected_slope": report.k + 1}
    return ExperimentResult(
        rows,
        overall(checks).value,
        {k: v.value for k, v in checks.items()},
        fits,
        {
            "coefficients": _coefficient_series(report.coefficients),
            "expansion": expansion_series,
            "remainder": remainder_series,
        },
    )


def _run_s_table(exp: Experiment) -> ExperimentResult:
    with exp.timer.stage("s_table"):
        table = s_table(exp.factory, exp.config.expansion.max_order, exp.mc)
    fit = s_envelope_fit(table)
    rows = [ResultRow.from_estimate("S", est, j=j, k=k) for (j, k), est in sorted(table.items())]
    fits = {
        "envelope_constant": fit.constant,
        "margins": [{"j": j, "k": k, "margin": m} for (j, k), m in sorted(fit.margins.items())],
    }
    return ExperimentResult(rows, fit.verdict.value, {"envelope": fit.verdict.value}, fits)


def _run_moment(exp: Experiment) -> ExperimentResult:
    expansion = exp.config.expansion
    anchor = tuple(expansion.anchor) if expansion.anchor is not None else None
    functional = LocalFunctionalSpec(expansion.functional, expansion.kappa, anchor)
    rows = []
    series = []
    results = []
    with exp.timer.stage("moment_inequality"):
        for a in sorted(expansion.moment_a):
            result = moment_inequality_ratio(exp.factory, functional, a, expansion.moment_b, expansion.moment_c, exp.mc)
            rows.append(ResultRow.from_estimate("moment_lhs", result.lhs, j=a, k=expansion.moment_b))
            rows.append(ResultRow.from_estimate("moment_rhs", result.rhs, j=a, k=expansion.moment_b))
            rows.append(
                ResultRow("moment_ratio", result.ratio, result.ratio_stderr, result.lhs.n_samples, j=a, k=expansion.moment_b)
            )
            results.append(result)
            series.append(
                {
                    "a": a,
                    "ratio": result.ratio,
                    "ratio_stderr": result.ratio_stderr,
                    "constant_proxy": result.constant_proxy,
                }
            )
    verdict = geometric_growth(results)
    return ExperimentResult(rows, verdict.value, {"geometric_growth": verdict.value}, {}, {"moment": series})


def _oracle_verdict(est: Estimate, reference: float, tolerance: float) -> Verdict:
    """PASS within the relative tolerance; noise wider than it makes a miss INCONCLUSIVE."""
    allowed = tolerance * abs(reference)
    if abs(est.mean - reference) <= allowed:
        return Verdict.PASS
    if est.error_bar > allowed and est.within(reference, 3.0):
        logger.warning("oracle comparison below the noise floor: error bar %.3g", est.error_bar)
        return Verdict.INCONCLUSIVE
    return Verdict.FAIL


def _check_oracle_setting(config: ExperimentConfig) -> None:
    if config.physics.d != 1:
        raise ConfigError("the closed-form oracle exists only in d = 1", "physics.d")
    cfg = config.materials
    if cfg.A1 is not None or cfg.A2 is not None or cfg.background != "constant":
        raise ConfigError("the closed-form oracle needs A1 = alpha, A2 = beta", "materials")


def _run_oracle1d(exp: Experiment) -> ExperimentResult:
    config = exp.config
    _check_oracle_setting(config)
    alpha, beta = config.materials.alpha, config.materials.beta
    intensity, p = config.physics.intensity, config.expansion.p
    reference = homogenized_1d(p * intensity, alpha, beta)
    with exp.timer.stage("direct"):
        est = direct_coefficient(exp.factory, p, exp.mc)
    rows = [
        ResultRow.from_estimate("direct", est, p=p),
        ResultRow("oracle", reference, 0.0, 1, p=p),
    ]
    checks = {"oracle_value": _oracle_verdict(est, reference, config.expansion.oracle_tolerance)}
    logger.info("oracle1d: direct %.6g +- %.2g vs %.6g", est.mean, est.stderr, reference)

    orders = range(1, config.expansion.max_order + 1)
    if orders:
        expected = taylor_coefficients_1d(intensity, config.expansion.max_order, alpha, beta)
        form = CoefficientForm(config.coefficient_form)
        with exp.timer.stage("coefficients"):
            for j in orders:
                coefficient = cluster_coefficient(exp.factory, j, exp.mc, form)
                rows.append(ResultRow.from_estimate("cluster_coefficient", coefficient, j=j))
                rows.append(ResultRow("oracle_coefficient", expected[j], 0.0, 1, j=j))
                checks[f"oracle_coefficient_{j}"] = (
                    Verdict.PASS if coefficient.within(expected[j], 3.0, 1e-12) else Verdict.FAIL
                )
    return ExperimentResult(rows, overall(checks).value, {k: v.value for k, v in checks.items()})


def _run_locality(exp: Experiment) -> ExperimentResult:
    config = exp.config
    ctx = exp.factory.context(Seed(exp.mc.seed), 0)
    A: CoefficientField = ctx.coefficients(ctx.all_labels)
    site = config.locality.site
    if site is None:
        site = [math.floor(config.physics.L / 2)] * config.physics.d
    Ts = [config.physics.T, config.locality.T_factor * config.physics.T]
    profiles = []
    with exp.timer.stage("locality"):
        for T in Ts:
            params = SolverParams(
                T, ctx.params.e, ctx.params.tolerance, ctx.params.max_iterations, ctx.params.face_rule
            )
            profiles.append(locality_probe(A, params, site, ctx.materials))
    rows = []
    series = []
    for profile in profiles:
        rows.append(ResultRow(f"locality_rate@T={profile.T:g}", profile.rate, None, 1))
        rows.append(ResultRow(f"locality_peak@T={profile.T:g}", profile.peak, None, 1))
        for r, value in zip(profile.radii, profile.profile):
            series.append({"T": profile.T, "radius": float(r), "profile": float(value)})
    rates = [p.rate for p in profiles]
    fits: Dict[str, object] = {"rates": rates, "T": Ts}
    if any(r is None or r <= 0 for r in rates):
        logger.warning("locality: decay rate not resolved at every T")
        verdict = Verdict.INCONCLUSIVE
    else:
        ratio = rates[1] / rates[0]
        fits["rate_ratio"] = ratio
        close = abs(ratio - config.locality.expected_ratio) <= config.locality.ratio_tolerance
        verdict = Verdict.PASS if close else Verdict.FAIL
    return ExperimentResult(rows, verdict.value, {"locality_scaling": verdict.value}, fits, {"locality": series})


EXPERIMENTS: Dict[str, Callable[[Experiment], ExperimentResult]] = {
    "direct": _run_direct,
    "cluster": _run_cluster,
    "taylor": _run_taylor,
    "s_table": _run_s_table,
    "moment": _run_moment,
    "oracle1d": _run_oracle1d,
    "locality": _run_locality,
}


def _row_estimate(row: ResultRow) -> Estimate:
    # non-finite values come back from JSON as null
    mean = math.nan if row.estimate is None else row.estimate
    return Estimate(mean, row.stderr or 0.0, 0.0, row.n_samples, row.n_failed)


def _headline(result: ExperimentResult) -> Estimate:
    """The estimate a sweep tracks.

    The last direct value, else the highest-order coefficient, else the moment
    ratio of the smallest order a.
    """
    for quantity in ("direct", "cluster_coefficient"):
        chosen = [r for r in result.rows if r.quantity == quantity]
        if chosen:
            return _row_estimate(chosen[-1])
    ratios = [r for r in result.rows if r.quantity == "moment_ratio"]
    if ratios:
        return _row_estimate(ratios[0])
    raise LabError("experiment has no estimate a sweep can track")


def _write_fields(config: ExperimentConfig, factory: ContextFactory, out: Path) -> List[Path]:
    ctx = factory.context(Seed(config.monte_carlo.seed), 0)
    A = ctx.coefficients(ctx.all_labels)
    return [
        dump_cloud(ctx.cloud, out / "cloud.txt"),
        write_coefficients(out / "coefficients.field", A),
        write_corrector(out / "corrector.field", ctx.corrector(ctx.all_labels)),
    ]


def execute(config: ExperimentConfig, timer: Optional[StageTimer] = None, diagnostics=None):
    """Run the experiment named by `config.kind` without touching the filesystem."""
    if config.kind == "sweep":
        raise ConfigError("sweeps run through sweep(), not execute()", "kind")
    timer = timer if timer is not None else StageTimer()
    factory = build_factory(config)
    exp = Experiment(config, factory, build_mc(config, diagnostics), timer)
    logger.info("experiment %s (%s) started", config.run_id, config.kind)
    result = EXPERIMENTS[config.kind](exp)
    logger.info("experiment %s finished: %s", config.run_id, result.verdict)
    return result, factory


def _finish(
    out: Path,
    config: ExperimentConfig,
    written: List[Path],
    verdict: str,
    started: float,
    timer: StageTimer,
    warnings: List[str],
    diagnostics: RunDiagnostics,
) -> RunRecord:
    record = RunRecord(
        config_hash=config.run_id,
        artifact_version=artifact_version(),
        verdict=verdict,
        wall_time=time.perf_counter() - started,
        stage_timings=dict(timer.timings),
        warnings=warnings,
        manifest=manifest(written, out),
        cache=asdict(diagnostics.cache),
    )
    record.write(out / RECORD_FILE)
    return record


def run(config: ExperimentConfig, directory: Optional[Union[str, Path]] = None) -> RunRecord:
    """Execute one experiment and write its report, tables and run record.

    Files go to `<directory>/<run_id>/`, `directory` defaulting to the configured
    output directory. A sweep config is dispatched to `sweep`.
    """
    if config.kind == "sweep":
        return sweep(config, config.sweep.axis, config.sweep.values, directory)
    started = time.perf_counter()
    out = Path(directory if directory is not None else config.output.directory) / config.run_id
    timer = StageTimer()
    diagnostics = RunDiagnostics()
    with _collect_warnings() as collector:
        result, factory = execute(config, timer, diagnostics)
        meta = metadata(config)
        with timer.stage("write"):
            written = [
                write_text(out / CONFIG_FILE, dump_config(config)),
                write_json(out / REPORT_FILE, report_document(config.run_id, config.kind, meta, result)),
                write_results_csv(out / RESULTS_FILE, config.run_id, meta, result.rows),
                write_solver_log(out / SOLVER_LOG_FILE, diagnostics.solve_log),
            ]
            if config.output.write_fields:
                written += _write_fields(config, factory, out)
    return _finish(out, config, written, result.verdict, started, timer, collector.messages, diagnostics)


def sweep(
    config: ExperimentConfig,
    axis: Optional[str],
    values: Sequence[float],
    directory: Optional[Union[str, Path]] = None,
) -> RunRecord:
    """Repeat the base experiment per axis value and merge the results into one table.

    Each value gets its own subdirectory; the merged `sweep.csv` carries the axis
    and value columns. An N-sweep adds the stderr scaling check.
    """
    if axis not in ("T", "h", "L", "N", "n"):
        raise ConfigError(f"sweep axis must be one of T, h, L, N, n, got {axis!r}", "sweep.axis")
    if not values:
        raise ConfigError("sweep needs at least one value", "sweep.values")
    started = time.perf_counter()
    sweep_config = config.model_copy(
        update={"kind": "sweep", "sweep": config.sweep.model_copy(update={"axis": axis, "values": list(values)})}
    )
    base = config.model_copy(update={"kind": config.sweep.base_kind})
    out = Path(directory if directory is not None else config.output.directory) / sweep_config.run_id
    timer = StageTimer()
    diagnostics = RunDiagnostics()
    merged: List[List[object]] = []
    written: List[Path] = []
    point_verdicts: Dict[str, Verdict] = {}

    def evaluate(value: float) -> Estimate:
        point = with_axis(base, axis, value)
        record = run(point, out / f"{axis}={value:g}")
        written.extend(out / f"{axis}={value:g}" / point.run_id / name for name in record.manifest)
        report = json.loads((out / f"{axis}={value:g}" / point.run_id / REPORT_FILE).read_text("utf-8"))
        rows = [ResultRow(**entry) for entry in report["estimates"]]
        point_verdicts[f"{axis}={value:g}"] = Verdict(report["verdict"])
        for row in result_csv_rows(point.run_id, report["metadata"], rows):
            merged.append([axis, value] + row)
        return _headline(ExperimentResult(rows, report["verdict"]))

    with _collect_warnings() as collector:
        with timer.stage("sweep"):
            table = convergence_sweep(axis, values, evaluate)
        if config.sweep.base_kind == "moment":
            checks = {"stability": stability_check(table.estimates)}
        else:
            checks = {"convergence": table.verdict}
        if axis == "N":
            scaling = stderr_scaling([int(v) for v in values], table.estimates)
            checks["stderr_scaling"] = scaling.verdict
        rows = [
            ResultRow("sweep_point", est.mean, est.stderr, est.n_samples, est.n_failed)
            for est in table.estimates
        ]
        series = [
            {"axis": axis, "value": v, "estimate": e.mean, "stderr": e.stderr}
            for v, e in zip(table.values, table.estimates)
        ]
        checks_out = {k: v.value for k, v in checks.items()}
        checks_out.update({f"point_{k}": v.value for k, v in point_verdicts.items()})
        verdict = overall(checks)
        result = ExperimentResult(
            rows,
            verdict.value,
            checks_out,
            {"differences": list(table.differences)},
            {"sweep": series},
        )
        with timer.stage("write"):
            written += [
                write_text(out / CONFIG_FILE, dump_config(sweep_config)),
                write_json(
                    out / REPORT_FILE,
                    report_document(sweep_config.run_id, "sweep", metadata(sweep_config), result),
                ),
                write_text(out / SWEEP_FILE, csv_text(["axis", "value"] + CSV_COLUMNS, merged)),
            ]
    return _finish(out, sweep_config, written, verdict.value, started, timer, collector.messages, diagnostics)


PLOT_SOURCES = {
    "expansion_vs_p.csv": ("expansion", ["run_id", "p", "direct", "direct_stderr", "partial_sum"]),
    "coefficients_vs_j.csv": ("coefficients", ["run_id", "j", "estimate", "stderr", "scaled", "scaled_stderr"]),
    "remainder_vs_p.csv": ("remainder", ["run_id", "p", "remainder", "stderr", "bound_estimate", "bound_stderr", "quality"]),
    "locality_profile.csv": ("locality", ["run_id", "T", "radius", "profile"]),
}


@dataclass
class PlotManifest:
    """Plot files written with their checksums, and the inputs each file lacked."""

    written: Dict[str, str] = field(default_factory=dict)
    missing: Dict[str, str] = field(default_factory=dict)


def emit_plot_data(results_dir: Union[str, Path]) -> PlotManifest:
    """Collect the series of every report under `results_dir` into tidy plot CSVs.

    Nothing is rendered. A directory without reports yields an empty manifest.
    """
    root = Path(results_dir)
    if not root.is_dir():
        raise ConfigError(f"results directory {root} does not exist", "out")
    reports = sorted(p for p in root.rglob(REPORT_FILE) if PLOT_DIR not in p.parts)
    result = PlotManifest()
    if not reports:
        logger.info("no reports under %s", root)
        return result
    documents = []
    for path in reports:
        try:
            documents.append(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("skipping unreadable report %s: %s", path, e)
    out = root / PLOT_DIR
    written = []
    for name, (key, header) in PLOT_SOURCES.items():
        records = [
            dict(entry, run_id=doc["run_id"])
            for doc in documents
            for entry in doc.get("series", {}).get(key, [])
        ]
        if not records:
            result.missing[name] = f"no report carries a {key!r} series"
            logger.warning("plot file %s skipped: %s", name, result.missing[name])
            continue
        written.append(write_series_csv(out / name, header, records))
    result.written = manifest(written, out)
    return result
