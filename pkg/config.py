# config.py - Numerical Configuration
"""
Configuration Management

Every numerical default used by the toolkit lives here so that a run can be
retuned through environment variables (prefix SHEARSTAB_) or a .env file
without touching the modules.
"""

from functools import lru_cache
from typing import Tuple

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Grid resolution (polynomial degree; node count is degree + 1)
    grid_degree_coarse: int = 128
    grid_degree_fine: int = 256
    fine_grid_below_nu: float = 1e-5
    min_grid_degree: int = 16

    # Profile admissibility
    curvature_tolerance: float = 1e-8
    endpoint_curvature_tolerance: float = 1e-8
    chop_tolerance: float = 1e-13

    # Resolvent
    epsilon0: float = 0.01
    shift_factor: float = 0.01
    shift_bound_factor: float = 0.1
    near_singular_threshold: float = 1e14
    lambda_uniform_points: int = 64
    lambda_refine_levels: int = 8
    lambda_outside_points: int = 16
    lambda_span_factor: float = 10.0
    rho_tail_tolerance: float = 1e-8
    rho_max_doublings: int = 60

    # Time stepping
    cfl_fraction: float = 0.25
    cfl_limit: float = 1.0
    nonlinear_cfl: float = 0.5
    ledger_epsilon: float = 0.0025
    blowup_factor: float = 1e6
    stability_factor: float = 10.0
    rate_window: Tuple[float, float] = (2.0, 10.0)
    threshold_horizon: float = 20.0

    # Invariant tolerances checked by the runner
    decomposition_tolerance: float = 1e-6
    clamped_boundary_tolerance: float = 1e-7
    reconstruction_tolerance: float = 1e-6
    kernel_constant_limit: float = 2.0
    weighted_gradient_slack: float = 1e-6
    heat_ratio_factor: float = 3.0
    appendix_trials: int = 200

    # Runner
    app_name: str = "Shear Stability Lab"
    output_dir: str = "results"
    workers: int = 1
    seed: int = 20240601
    log_level: str = "INFO"

    model_config = SettingsConfigDict(env_file=".env", env_prefix="SHEARSTAB_", extra="ignore")

    def grid_degree_for(self, nu: float) -> int:
        """Pick the grid degree that keeps enough nodes inside the nu^(1/3) layer."""
        return self.grid_degree_fine if nu < self.fine_grid_below_nu else self.grid_degree_coarse


@lru_cache()
def get_settings() -> Settings:
    return Settings()
