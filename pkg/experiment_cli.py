# experiment_cli.py - Batch Experiment Driver
"""
Experiment CLI

Reads a KEY=value run manifest, dispatches one sweep point per
(profile, nu, k) to a worker pool, and writes

    <out>/<experiment>.csv            one row per result, sorted by (experiment, nu, k)
    <out>/<experiment>_summary.csv    log-log exponent fits with 95% half-widths
    <out>/series/*.csv                time series of evolution runs

Usage:
    python experiment_cli.py decay_rates --manifest manifests/decay_rates.env --workers 4

Exit codes: 0 success, 1 validation error or total failure, 2 invariant breach.
"""

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError as PydanticValidationError, field_validator, model_validator
from scipy.stats import linregress, t as student_t
from tqdm import tqdm

from base_flow import NAMED_PROFILES, BaseFlowTrajectory, lemma_A3_sweep, named_profile, validate_profile
from channel_grid import build_grid, sinh_kernel_norms, weighted_gradient_ratio
from config import get_settings
from exceptions import (DegenerateFit, EndpointCurvatureNonzero, InvariantBreach, ManifestError, ShearStabError,
                        ValidationError)
from linear_semigroup import ForcingSlots, ModeState, evolve_and_measure, fit_decay_rate, frozen_time_decompose
from nonlinear_boussinesq import threshold_point
from os_resolvent import ResolventProblem, decomposition_check, estimate_audit, rho_integral_check

logger = logging.getLogger(__name__)

EXPERIMENTS = ("resolvent_audit", "rho_identity", "decay_rates", "slab_decomposition", "threshold",
               "appendix_lemmas")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BREACH = 2


# --- manifest ----------------------------------------------------------------

class Manifest(BaseModel):
    experiment: str
    nu_list: List[float]
    k_list: List[int] = [1]
    N: Optional[int] = None
    K: int = 8
    seed: int = 20240601
    t_end_factor: Optional[float] = None
    epsilon: Optional[float] = None
    profiles: List[str] = ["couette"]
    c_u: float = 0.1
    c_theta: float = 0.1
    decomposition_draws: int = 50
    lambda_points: Optional[int] = None
    output_dir: str = "results"
    workers: int = 1

    @field_validator("nu_list", "k_list", "profiles", mode="before")
    @classmethod
    def split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("experiment")
    @classmethod
    def known_experiment(cls, value: str) -> str:
        if value not in EXPERIMENTS:
            raise ValueError(f"Unknown experiment '{value}'. Choose from {list(EXPERIMENTS)}")
        return value

    @field_validator("nu_list")
    @classmethod
    def viscosities_in_range(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("NU_LIST must name at least one viscosity")
        bad = [nu for nu in value if not 0.0 < nu <= 1.0]
        if bad:
            raise ValueError(f"Viscosities must lie in (0, 1], got {bad}")
        return value

    @field_validator("profiles")
    @classmethod
    def known_profiles(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in NAMED_PROFILES]
        if unknown:
            raise ValueError(f"Unknown profile {unknown}. Choose from {list(NAMED_PROFILES.keys())}")
        return value

    @model_validator(mode="after")
    def experiment_requirements(self) -> "Manifest":
        if self.experiment != "threshold" and (not self.k_list or 0 in self.k_list):
            raise ValueError("K_LIST must be nonempty and free of k = 0")
        if self.workers < 1:
            raise ValueError(f"WORKERS must be positive, got {self.workers}")
        if self.experiment == "decay_rates" and self.t_end_factor is not None:
            window_end = get_settings().rate_window[1]
            if self.t_end_factor < window_end:
                raise ValueError(f"T_END_FACTOR {self.t_end_factor} shorter than the fit window end {window_end}")
        if self.experiment == "threshold":
            # nonlinear runs need zero wall curvature
            grid = build_grid(2 * get_settings().min_grid_degree)
            for name in self.profiles:
                try:
                    validate_profile(grid, named_profile(name, grid), require_endpoint_flat=True)
                except EndpointCurvatureNonzero as e:
                    raise ValueError(f"Profile '{name}' cannot drive a threshold run: {e}") from e
        return self


def load_manifest(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Manifest:
    """Parse a dotenv-style manifest; overrides (already typed) win over file values."""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ManifestError(f"Manifest {path} not found")
        values = {key.lower(): value for key, value in dotenv_values(path).items() if value is not None}
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    values.setdefault("seed", get_settings().seed)
    # N and K keep upper-case field names
    if "n" in values:
        values["N"] = values.pop("n")
    if "k" in values:
        values["K"] = values.pop("k")
    try:
        return Manifest(**values)
    except PydanticValidationError as e:
        raise ManifestError(str(e)) from e


# --- fits --------------------------------------------------------------------

@dataclass
class ExponentFit:
    slope: float
    intercept: float
    ci_halfwidth: float
    n_points: int


def fit_exponent(points: Sequence[Tuple[float, float]]) -> ExponentFit:
    """OLS on (log x, log y); the half-width is t_{0.975, n-2} times the slope standard error."""
    points = list(points)
    if len(points) < 3:
        raise DegenerateFit(f"Need at least 3 points, got {len(points)}")
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise DegenerateFit("Exponent fits need strictly positive data")
    if len(np.unique(x)) < len(x):
        raise DegenerateFit("Abscissae must be distinct")

    result = linregress(np.log(x), np.log(y))
    halfwidth = student_t.ppf(0.975, len(x) - 2) * result.stderr
    return ExponentFit(slope=float(result.slope), intercept=float(result.intercept),
                       ci_halfwidth=float(halfwidth), n_points=len(x))


# (y column, x column, grouping columns) fitted per experiment
FIT_PLAN: Dict[str, List[Tuple[str, str, Tuple[str, ...]]]] = {
    "resolvent_audit": [("ratio", "nu", ("profile", "k", "estimate_id")),
                        ("ratio", "k", ("profile", "nu", "estimate_id"))],
    "rho_identity": [("value", "nu", ("k",)), ("value", "k", ("nu",))],
    "decay_rates": [("gamma", "nu", ("profile", "k"))],
    "slab_decomposition": [("weighted_sum", "nu", ("profile", "k"))],
    "threshold": [("sum_E", "nu", ("profile",)), ("sum_G", "nu", ("profile",))],
    "appendix_lemmas": [("kernel_max_norm", "k", ("nu",))],
}


# --- sweep points ------------------------------------------------------------

@dataclass(frozen=True)
class SweepTask:
    experiment: str
    index: int
    nu: float
    k: int
    profile: str


@dataclass
class PointResult:
    task: SweepTask
    rows: List[Dict[str, Any]] = field(default_factory=list)
    series: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    breaches: List[str] = field(default_factory=list)
    error: str = ""


def _random_forcing(grid, rng: np.random.Generator) -> np.ndarray:
    modes = np.arange(1, 5)
    amplitudes = (rng.standard_normal(4) + 1j * rng.standard_normal(4)) / modes
    return np.sin(np.pi * np.outer(grid.nodes, modes)) @ amplitudes


def _grid_for(manifest: Manifest, nu: float):
    return build_grid(manifest.N if manifest.N is not None else get_settings().grid_degree_for(nu))


def _resolvent_audit_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    settings = get_settings()
    result = PointResult(task=task)
    grid = _grid_for(manifest, task.nu)
    profile = validate_profile(grid, named_profile(task.profile, grid))
    lambdas = None
    if manifest.lambda_points:
        lambdas = np.linspace(task.k * profile.values[0], task.k * profile.values[-1], manifest.lambda_points)

    report = estimate_audit(grid, profile, task.nu, task.k, _random_forcing(grid, rng), lambdas=lambdas)
    for row in report.rows:
        result.rows.append(dict(row.as_dict(), profile=task.profile, failed_lambdas=len(report.failures),
                                coefficient_gap=report.max_coefficient_gap))

    worst = {"relative_error": 0.0, "boundary_max": 0.0, "coefficient_gap": 0.0, "condition": 0.0}
    failed = 0
    for _ in range(manifest.decomposition_draws):
        lam = rng.uniform(task.k * profile.values[0], task.k * profile.values[-1])
        problem = ResolventProblem(grid, task.nu, task.k, lam, profile, _random_forcing(grid, rng))
        try:
            check = decomposition_check(problem)
        except ShearStabError as e:
            failed += 1
            logger.warning(f"Decomposition draw failed at nu={task.nu}, k={task.k}: {e}")
            continue
        worst = {key: max(worst[key], check[key]) for key in worst}

    result.rows.append({"estimate_id": "decomposition", "nu": task.nu, "k": task.k, "profile": task.profile,
                        "lhs": worst["relative_error"], "ratio": worst["relative_error"],
                        "boundary_max": worst["boundary_max"], "coefficient_gap": worst["coefficient_gap"],
                        "condition": worst["condition"], "failed_draws": failed})
    if worst["relative_error"] > settings.decomposition_tolerance:
        result.breaches.append(f"decomposition error {worst['relative_error']:.2e} at nu={task.nu}, k={task.k}")
    if worst["boundary_max"] > settings.clamped_boundary_tolerance:
        result.breaches.append(f"clamped boundary value {worst['boundary_max']:.2e} at nu={task.nu}, k={task.k}")
    return result


def _rho_identity_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    value, ratio = rho_integral_check(task.nu, task.k)
    # same identity inside the wall layer
    _, ratio_ramp = rho_integral_check(task.nu, task.k, rho=0.5)
    return PointResult(task=task, rows=[{"nu": task.nu, "k": task.k, "value": value, "ratio": ratio,
                                         "ratio_ramp": ratio_ramp}])


def _decay_rates_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    grid = _grid_for(manifest, task.nu)
    profile = validate_profile(grid, named_profile(task.profile, grid))
    trajectory = BaseFlowTrajectory(grid, profile, task.nu)
    initial = ModeState.from_stream(grid, task.k, np.sin(np.pi * grid.nodes) ** 2)
    factor = manifest.t_end_factor or get_settings().rate_window[1]
    run = evolve_and_measure(grid, initial, trajectory, None, task.nu, factor * task.nu ** (-1.0 / 3.0),
                             epsilon=manifest.epsilon)

    gamma = fit_decay_rate(run.series["t"], run.series["norm_omega"], nu=task.nu)
    row = {"nu": task.nu, "k": task.k, "profile": task.profile, "gamma": gamma,
           "gamma_scaled": gamma / task.nu ** (1.0 / 3.0)}
    row.update({f"ratio_{name}": value for name, value in run.ratios.items()})
    name = f"decay_rates_{task.profile}_nu{task.nu:.3e}_k{task.k}"
    return PointResult(task=task, rows=[row], series={name: run.series})


def _slab_decomposition_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    settings = get_settings()
    grid = _grid_for(manifest, task.nu)
    profile = validate_profile(grid, named_profile(task.profile, grid))
    trajectory = BaseFlowTrajectory(grid, profile, task.nu)
    y = grid.nodes
    theta_in = (rng.standard_normal() + 1j * rng.standard_normal()) * np.sin(np.pi * y)
    forcing = ForcingSlots(g1=0.1 * (rng.standard_normal() + 1j * rng.standard_normal()) * np.sin(2 * np.pi * y),
                           g2=0.1 * rng.standard_normal() * y * (1.0 - y))
    n_slabs = max(4, int(round(manifest.t_end_factor or 4)))
    slabs = frozen_time_decompose(grid, trajectory, theta_in, forcing, task.nu, task.k, n_slabs=n_slabs,
                                  epsilon=manifest.epsilon)

    result = PointResult(task=task, rows=[{
        "nu": task.nu, "k": task.k, "profile": task.profile, "n_slabs": n_slabs,
        "reconstruction_error": slabs.reconstruction_error, "weighted_sum": slabs.weighted_sum,
        "bound_rhs": slabs.bound_rhs, "bound_ratio": slabs.bound_ratio,
    }])
    if slabs.reconstruction_error > settings.reconstruction_tolerance:
        result.breaches.append(f"slab reconstruction error {slabs.reconstruction_error:.2e} at nu={task.nu}")
    return result


def _threshold_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    outcome = threshold_point(task.nu, task.index, manifest.seed, manifest.K, manifest.c_u, manifest.c_theta,
                              manifest.t_end_factor, manifest.N, task.profile)
    result = PointResult(task=task, rows=[dict(outcome.as_dict(), profile=task.profile, k=0)])
    if outcome.series is not None:
        result.series[f"threshold_{task.profile}_nu{task.nu:.3e}"] = outcome.series
    return result


def _appendix_point(manifest: Manifest, task: SweepTask, rng: np.random.Generator) -> PointResult:
    settings = get_settings()
    grid = _grid_for(manifest, task.nu)
    rows, constant = sinh_kernel_norms(grid, [task.k])
    kernel = rows[0]

    worst_weighted = 0.0
    modes = np.arange(1, 7)
    for _ in range(settings.appendix_trials):
        amplitudes = (rng.standard_normal(6) + 1j * rng.standard_normal(6)) / modes ** 2
        omega = np.sin(np.pi * np.outer(grid.nodes, modes)) @ amplitudes
        worst_weighted = max(worst_weighted, weighted_gradient_ratio(grid, task.k, omega))

    profile = validate_profile(grid, named_profile(task.profile, grid))
    heat_ratios, heat_limit = lemma_A3_sweep(grid, profile, task.nu, 0.0, task.nu ** (-1.0 / 3.0))
    heat_ratio = float(np.max(heat_ratios))
    row = {"nu": task.nu, "k": task.k, "profile": task.profile,
           "kernel_max_norm": max(kernel[name] for name in ("sinh_1my", "sinh_y", "cosh_1my", "cosh_y")),
           "kernel_constant": constant, "weighted_gradient_ratio": worst_weighted, "heat_ratio": heat_ratio,
           "heat_ratio_limit": heat_limit}

    result = PointResult(task=task, rows=[row])
    where = f"nu={task.nu}, k={task.k}, profile={task.profile}"
    if constant > settings.kernel_constant_limit:
        result.breaches.append(f"kernel constant {constant:.3f} above {settings.kernel_constant_limit} at {where}")
    if worst_weighted > 1.0 + settings.weighted_gradient_slack:
        result.breaches.append(f"weighted gradient ratio {worst_weighted:.8f} above 1 at {where}")
    if heat_ratio > settings.heat_ratio_factor * heat_limit:
        result.breaches.append(f"heat ratio {heat_ratio:.3e} above {settings.heat_ratio_factor} x limit "
                               f"{heat_limit:.3e} at {where}")
    return result


POINT_RUNNERS: Dict[str, Callable[[Manifest, SweepTask, np.random.Generator], PointResult]] = {
    "resolvent_audit": _resolvent_audit_point,
    "rho_identity": _rho_identity_point,
    "decay_rates": _decay_rates_point,
    "slab_decomposition": _slab_decomposition_point,
    "threshold": _threshold_point,
    "appendix_lemmas": _appendix_point,
}


def run_point(manifest: Manifest, task: SweepTask) -> PointResult:
    """Run one sweep point in isolation; failures come back as data."""
    rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, task.index]))
    try:
        return POINT_RUNNERS[task.experiment](manifest, task, rng)
    except (ShearStabError, ValueError, np.linalg.LinAlgError) as e:
        return PointResult(task=task, error=f"{type(e).__name__}: {e}")


# --- runner ------------------------------------------------------------------

def _format(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.12e}"
    return str(value)


def write_csv(path: Path, rows: List[Dict[str, Any]], leading: Sequence[str] = ()) -> None:
    """Timestamp comment line, one header row, then the rows with fixed float formatting."""
    columns = list(leading) + sorted({key for row in rows for key in row} - set(leading))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(f"# generated_at={datetime.now(timezone.utc).isoformat()}\n")
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(column, "")) for column in columns])


@dataclass
class RunReport:
    exit_code: int
    stats: Dict[str, int]
    artifacts: List[Path]


class ExperimentRunner:
    """Dispatches the sweep of one manifest and persists its artifacts."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.output_dir = Path(manifest.output_dir)

    def tasks(self) -> List[SweepTask]:
        m = self.manifest
        ks = [0] if m.experiment == "threshold" else m.k_list
        profiles = [m.profiles[0]] if m.experiment == "rho_identity" else m.profiles
        tasks = []
        for profile in profiles:
            for nu in m.nu_list:
                for k in ks:
                    tasks.append(SweepTask(m.experiment, len(tasks), nu, k, profile))
        return tasks

    def _execute(self, tasks: List[SweepTask]) -> List[PointResult]:
        m = self.manifest
        if m.workers <= 1 or len(tasks) <= 1:
            return [run_point(m, task) for task in tqdm(tasks, desc=m.experiment, disable=len(tasks) < 2)]

        results = []
        with ProcessPoolExecutor(max_workers=m.workers) as pool:
            futures = [pool.submit(run_point, m, task) for task in tasks]
            for future in tqdm(as_completed(futures), total=len(futures), desc=m.experiment):
                results.append(future.result())
        return results

    def run(self) -> RunReport:
        m = self.manifest
        tasks = self.tasks()
        logger.info(f"Running {m.experiment} over {len(tasks)} points with {m.workers} worker(s)")

        stats = {"points": len(tasks), "failed": 0, "rows": 0, "breaches": 0}
        rows: List[Dict[str, Any]] = []
        series: Dict[str, Dict[str, np.ndarray]] = {}
        breaches: List[str] = []
        for result in self._execute(tasks):
            if result.error:
                stats["failed"] += 1
                logger.warning(f"Point nu={result.task.nu}, k={result.task.k} failed: {result.error}")
                rows.append({"nu": result.task.nu, "k": result.task.k, "profile": result.task.profile,
                             "error": result.error})
                continue
            for row in result.rows:
                rows.append(dict(row, error=row.get("error", "")))
            series.update(result.series)
            breaches.extend(result.breaches)

        for row in rows:
            row["experiment"] = m.experiment
        rows.sort(key=lambda row: (row["experiment"], row["nu"], row.get("k", 0),
                                   str(row.get("profile", "")), str(row.get("estimate_id", ""))))
        stats["rows"] = len(rows)
        stats["breaches"] = len(breaches)

        self.output_dir.mkdir(parents=True, exist_ok=True)
        artifacts = [self.output_dir / f"{m.experiment}.csv", self.output_dir / f"{m.experiment}_summary.csv"]
        write_csv(artifacts[0], rows, leading=("experiment", "nu", "k"))
        write_csv(artifacts[1], self.summarize(rows),
                  leading=("quantity", "slope", "intercept", "ci_halfwidth", "n_points"))
        if series:
            series_dir = self.output_dir / "series"
            series_dir.mkdir(exist_ok=True)
            for name in sorted(series):
                columns = series[name]
                length = len(next(iter(columns.values())))
                table = [{column: values[i] for column, values in columns.items()} for i in range(length)]
                path = series_dir / f"{name}.csv"
                write_csv(path, table, leading=("t",))
                artifacts.append(path)

        logger.info(f"Finished {m.experiment}. Stats: {stats}")
        if breaches:
            raise InvariantBreach("; ".join(breaches))

        exit_code = EXIT_VALIDATION if tasks and stats["failed"] == len(tasks) else EXIT_OK
        return RunReport(exit_code=exit_code, stats=stats, artifacts=artifacts)

    def summarize(self, rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Exponent fits of FIT_PLAN; groups with fewer than three usable points are skipped."""
        summary = []
        for y_name, x_name, group_names in FIT_PLAN[self.manifest.experiment]:
            groups: Dict[Tuple, List[Tuple[float, float]]] = {}
            for row in rows:
                if row.get("error") or y_name not in row or x_name not in row:
                    continue
                x, y = float(row[x_name]), float(row[y_name])
                if x > 0.0 and y > 0.0 and math.isfinite(y):
                    key = tuple(row.get(name, "") for name in group_names)
                    groups.setdefault(key, []).append((x, y))

            for key in sorted(groups, key=lambda item: tuple(str(v) for v in item)):
                label = ",".join(f"{name}={value}" for name, value in zip(group_names, key))
                try:
                    fit = fit_exponent(sorted(groups[key]))
                except DegenerateFit as e:
                    logger.debug(f"No fit for {y_name}~{x_name}[{label}]: {e}")
                    continue
                summary.append({"quantity": f"{y_name}~{x_name}[{label}]", "slope": fit.slope,
                                "intercept": fit.intercept, "ci_halfwidth": fit.ci_halfwidth,
                                "n_points": fit.n_points})
        return summary


def run(manifest: Manifest) -> RunReport:
    return ExperimentRunner(manifest).run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Shear flow stability experiments")
    subparsers = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sub = subparsers.add_parser(name, help=f"run the {name} sweep")
        sub.add_argument("--manifest", help="KEY=value manifest file")
        sub.add_argument("--out", help="output directory (overrides OUTPUT_DIR)")
        sub.add_argument("--workers", type=int, help="worker processes (overrides WORKERS)")
        sub.add_argument("--seed", type=int, help="base seed (overrides SEED)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level,
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    args = build_parser().parse_args(argv)

    try:
        manifest = load_manifest(args.manifest, {
            "experiment": args.experiment,
            "output_dir": args.out,
            "workers": args.workers,
            "seed": args.seed,
        })
    except ValidationError as e:
        logger.error(f"Invalid manifest: {e}")
        return EXIT_VALIDATION

    try:
        report = run(manifest)
    except InvariantBreach as e:
        logger.error(f"Invariant breach: {e}")
        return EXIT_BREACH
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
