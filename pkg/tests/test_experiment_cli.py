"""
test_experiment_cli.py - Manifests, Exponent Fits and End-to-End Sweeps
"""

import numpy as np
import pytest

from config import get_settings
from exceptions import DegenerateFit, InvariantBreach, ManifestError
from experiment_cli import (EXIT_BREACH, EXIT_OK, EXIT_VALIDATION, POINT_RUNNERS, ExperimentRunner, SweepTask,
                            _format, fit_exponent, load_manifest, main, run, run_point)
from report_figures import read_result_csv


def _write_manifest(path, **entries):
    lines = ["# test manifest"] + [f"{key}={value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _csv_body(path):
    return path.read_text(encoding="utf-8").splitlines()[1:]


class TestExponentFit:
    """Log-log least squares with confidence half-widths."""

    def test_exact_power_law(self):
        fit = fit_exponent([(1.0, 1.0), (2.0, 4.0), (4.0, 16.0), (8.0, 64.0)])
        assert abs(fit.slope - 2.0) < 1e-12
        assert abs(fit.intercept) < 1e-12
        assert fit.ci_halfwidth < 1e-10
        assert fit.n_points == 4

    def test_noisy_cube_root(self):
        rng = np.random.default_rng(3)
        x = np.logspace(-6, -2, 9)
        y = x ** (-1 / 3) * (1.0 + 0.01 * rng.standard_normal(x.size))
        fit = fit_exponent(list(zip(x, y)))
        assert abs(fit.slope + 1 / 3) < 0.02, f"slope {fit.slope:.4f}"
        assert fit.ci_halfwidth > 0.0

    @pytest.mark.parametrize("points", [
        [(1.0, 1.0), (2.0, 2.0)],
        [(1.0, 1.0), (2.0, -2.0), (3.0, 3.0)],
        [(1.0, 1.0), (1.0, 2.0), (3.0, 3.0)],
    ])
    def test_degenerate(self, points):
        with pytest.raises(DegenerateFit):
            fit_exponent(points)


class TestManifest:
    """Dotenv manifests validated into the run model."""

    def test_list_parsing(self, tmp_path):
        path = _write_manifest(tmp_path / "m.env", EXPERIMENT="decay_rates", NU_LIST="1e-2, 1e-3",
                               K_LIST="1,2", N=32, K=4, PROFILES="couette,convex_sine")
        manifest = load_manifest(path)
        assert manifest.nu_list == [1e-2, 1e-3]
        assert manifest.k_list == [1, 2]
        assert manifest.N == 32 and manifest.K == 4
        assert manifest.profiles == ["couette", "convex_sine"]
        assert manifest.seed == get_settings().seed

    def test_overrides_win(self, tmp_path):
        path = _write_manifest(tmp_path / "m.env", EXPERIMENT="rho_identity", NU_LIST="1e-2", SEED=1)
        manifest = load_manifest(path, {"seed": 9, "workers": None})
        assert manifest.seed == 9 and manifest.workers == 1

    def test_empty_viscosity_list(self, tmp_path):
        path = _write_manifest(tmp_path / "m.env", EXPERIMENT="rho_identity", NU_LIST="")
        with pytest.raises(ManifestError):
            load_manifest(path)

    @pytest.mark.parametrize("overrides", [
        {"experiment": "spectra", "nu_list": [1e-2]},
        {"experiment": "decay_rates", "nu_list": [1e-2], "k_list": [0]},
        {"experiment": "decay_rates", "nu_list": [2.0]},
        {"experiment": "decay_rates", "nu_list": [1e-2], "profiles": ["poiseuille"]},
        {"experiment": "decay_rates", "nu_list": [1e-2], "t_end_factor": 3.0},
        {"experiment": "rho_identity", "nu_list": [1e-2], "workers": 0},
        {"experiment": "threshold", "nu_list": [1e-2], "profiles": ["quadratic"]},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ManifestError):
            load_manifest(overrides=overrides)

    def test_threshold_allows_zero_mode(self):
        manifest = load_manifest(overrides={"experiment": "threshold", "nu_list": [1e-2], "k_list": [0]})
        assert manifest.k_list == [0]

    def test_threshold_accepts_flat_walls(self):
        manifest = load_manifest(overrides={"experiment": "threshold", "nu_list": [1e-2],
                                            "profiles": ["couette", "convex_sine"]})
        assert manifest.profiles == ["couette", "convex_sine"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(str(tmp_path / "absent.env"))


class TestRunner:
    """Task layout, point isolation and written artifacts."""

    def test_task_order(self):
        manifest = load_manifest(overrides={"experiment": "resolvent_audit", "nu_list": [1e-1, 1e-2],
                                            "k_list": [1, 2], "profiles": ["couette", "convex_sine"]})
        tasks = ExperimentRunner(manifest).tasks()
        assert len(tasks) == 8
        assert [t.index for t in tasks] == list(range(8))
        assert (tasks[0].profile, tasks[0].nu, tasks[0].k) == ("couette", 1e-1, 1)
        assert (tasks[1].profile, tasks[1].nu, tasks[1].k) == ("couette", 1e-1, 2)
        assert tasks[4].profile == "convex_sine"

    def test_special_task_layouts(self):
        threshold = load_manifest(overrides={"experiment": "threshold", "nu_list": [1e-2, 1e-3]})
        assert [t.k for t in ExperimentRunner(threshold).tasks()] == [0, 0]
        rho = load_manifest(overrides={"experiment": "rho_identity", "nu_list": [1e-2],
                                       "profiles": ["couette", "convex_sine"]})
        assert len(ExperimentRunner(rho).tasks()) == 1

    def test_failed_point_is_recorded(self):
        manifest = load_manifest(overrides={"experiment": "decay_rates", "nu_list": [1e-2], "N": 8})
        result = run_point(manifest, SweepTask("decay_rates", 0, 1e-2, 1, "couette"))
        assert result.error.startswith("InvalidGrid")
        assert not result.rows

    def test_plain_value_error_is_isolated(self, monkeypatch):
        def broken(manifest, task, rng):
            raise ValueError("Evolution time must be nonnegative")

        monkeypatch.setitem(POINT_RUNNERS, "rho_identity", broken)
        manifest = load_manifest(overrides={"experiment": "rho_identity", "nu_list": [1e-2]})
        result = run_point(manifest, SweepTask("rho_identity", 0, 1e-2, 1, "couette"))
        assert result.error.startswith("ValueError")
        assert not result.rows and not result.breaches

    def test_appendix_limits_hold(self, tmp_path):
        manifest = load_manifest(overrides={"experiment": "appendix_lemmas", "nu_list": [1e-2], "k_list": [1, 4],
                                            "profiles": ["convex_sine"], "N": 32, "output_dir": str(tmp_path)})
        assert run(manifest).exit_code == EXIT_OK
        rows = read_result_csv(tmp_path / "appendix_lemmas.csv")
        assert len(rows) == 2
        for row in rows:
            assert row["kernel_constant"] <= 2.0
            assert row["weighted_gradient_ratio"] <= 1.0 + 1e-6
            assert 0.0 < row["heat_ratio"] <= 3.0 * row["heat_ratio_limit"]

    def test_appendix_breach_is_raised(self, tmp_path, monkeypatch):
        monkeypatch.setattr(get_settings(), "kernel_constant_limit", 0.1)
        manifest = load_manifest(overrides={"experiment": "appendix_lemmas", "nu_list": [1e-2], "N": 32,
                                            "output_dir": str(tmp_path)})
        with pytest.raises(InvariantBreach, match="kernel constant"):
            run(manifest)
        assert (tmp_path / "appendix_lemmas.csv").exists()

    def test_format(self):
        assert _format(True) == "true"
        assert _format(3) == "3"
        assert _format(0.5) == "5.000000000000e-01"
        assert _format(float("nan")) == "nan"
        assert _format("couette") == "couette"

    def test_rho_identity_end_to_end(self, tmp_path):
        manifest = load_manifest(overrides={"experiment": "rho_identity", "nu_list": [1e-2, 1e-3, 1e-4, 1e-5],
                                            "output_dir": str(tmp_path)})
        report = run(manifest)
        assert report.exit_code == EXIT_OK
        assert report.stats["points"] == 4 and report.stats["failed"] == 0

        lines = (tmp_path / "rho_identity.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# generated_at=")
        assert lines[1].startswith("experiment,nu,k")
        rows = read_result_csv(tmp_path / "rho_identity.csv")
        assert [row["nu"] for row in rows] == [1e-5, 1e-4, 1e-3, 1e-2]

        summary = {row["quantity"]: row for row in read_result_csv(tmp_path / "rho_identity_summary.csv")}
        slope = summary["value~nu[k=1]"]["slope"]
        assert abs(slope + 1 / 6) < 1e-4, f"slope {slope:.6f}"

    def test_reruns_are_identical(self, tmp_path):
        bodies = []
        for name in ("a", "b"):
            manifest = load_manifest(overrides={"experiment": "slab_decomposition", "nu_list": [1e-2],
                                                "N": 32, "output_dir": str(tmp_path / name)})
            assert run(manifest).exit_code == EXIT_OK
            bodies.append(_csv_body(tmp_path / name / "slab_decomposition.csv"))
        assert bodies[0] == bodies[1]

    def test_decay_rates_sweep(self, tmp_path):
        manifest = load_manifest(overrides={"experiment": "decay_rates", "nu_list": [1e-2, 5e-3, 2e-3],
                                            "N": 32, "output_dir": str(tmp_path)})
        report = run(manifest)
        assert report.exit_code == EXIT_OK
        rows = read_result_csv(tmp_path / "decay_rates.csv")
        assert all(row["gamma"] > 0.0 for row in rows)
        summary = {row["quantity"] for row in read_result_csv(tmp_path / "decay_rates_summary.csv")}
        assert "gamma~nu[profile=couette,k=1]" in summary
        assert len(list((tmp_path / "series").glob("decay_rates_*.csv"))) == 3


class TestMain:
    """Exit codes of the command line."""

    def test_empty_list_exits_with_validation_code(self, tmp_path):
        path = _write_manifest(tmp_path / "m.env", NU_LIST="")
        out = tmp_path / "out"
        assert main(["rho_identity", "--manifest", path, "--out", str(out)]) == EXIT_VALIDATION
        assert not out.exists()

    def test_breach_exits_with_code_two(self, tmp_path, monkeypatch):
        monkeypatch.setattr(get_settings(), "reconstruction_tolerance", -1.0)
        path = _write_manifest(tmp_path / "m.env", NU_LIST="1e-2", N=32)
        out = tmp_path / "out"
        assert main(["slab_decomposition", "--manifest", path, "--out", str(out)]) == EXIT_BREACH
        assert (out / "slab_decomposition.csv").exists()

    def test_success(self, tmp_path):
        path = _write_manifest(tmp_path / "m.env", NU_LIST="1e-2,1e-3", K_LIST="1,2")
        out = tmp_path / "out"
        assert main(["rho_identity", "--manifest", path, "--out", str(out), "--workers", "1"]) == EXIT_OK
        assert (out / "rho_identity_summary.csv").exists()
