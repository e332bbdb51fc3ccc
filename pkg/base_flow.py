# base_flow.py - Monotone Shear Base Flow
"""
Base Flow

Builds, validates and evolves the shear profile U(t,y), which obeys the heat
equation dU/dt = nu d^2U/dy^2 with its wall values held fixed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import BarycentricInterpolator
from scipy.linalg import expm

from channel_grid import ChannelGrid, l2_norm, spectral_derivative
from config import get_settings
from exceptions import DivisionDegenerate, EndpointCurvatureNonzero, MixedConcavity, NotMonotone

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ShearProfile:
    """U on the grid with its first two derivatives and admissibility data."""

    values: np.ndarray
    dy: np.ndarray
    dy2: np.ndarray
    c0: float
    concavity_sign: int
    sobolev_h4: float
    time: float = 0.0

    @classmethod
    def from_values(cls, grid: ChannelGrid, values: np.ndarray, time: float = 0.0) -> "ShearProfile":
        """Derive the profile data without validating it."""
        values = np.asarray(values, dtype=float)
        derivatives = [values] + [spectral_derivative(grid, values, m).real for m in range(1, 5)]
        dy, dy2 = derivatives[1], derivatives[2]
        h4 = np.sqrt(sum(l2_norm(grid, d) ** 2 for d in derivatives))
        return cls(
            values=values,
            dy=dy,
            dy2=dy2,
            c0=float(np.min(dy)),
            concavity_sign=concavity_of(dy2),
            sobolev_h4=float(h4),
            time=time,
        )

    @property
    def wall_values(self) -> Tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def concavity_of(dy2: np.ndarray, tol: Optional[float] = None) -> int:
    """+1 convex, -1 concave, 0 flat or mixed (mixed is rejected by validate_profile)."""
    tol = get_settings().curvature_tolerance if tol is None else tol
    if np.all(np.abs(dy2) <= tol):
        return 0
    if np.all(dy2 >= -tol):
        return 1
    if np.all(dy2 <= tol):
        return -1
    return 0


def validate_profile(grid: ChannelGrid, samples: np.ndarray, require_endpoint_flat: bool = False,
                     require_strict_curvature: bool = False) -> ShearProfile:
    """Check monotonicity and one-signed curvature; the strict flag demands V''>0 or V''<0 inside."""
    settings = get_settings()
    profile = ShearProfile.from_values(grid, samples)
    tol = settings.curvature_tolerance

    if profile.c0 <= 0.0:
        raise NotMonotone(f"Minimum slope {profile.c0:.3e} is not positive")

    dy2 = profile.dy2
    if np.any(dy2 > tol) and np.any(dy2 < -tol):
        raise MixedConcavity(f"Curvature changes sign: range [{dy2.min():.3e}, {dy2.max():.3e}]")

    if require_strict_curvature:
        inner = dy2[grid.interior]
        if not (np.all(inner > 0.0) or np.all(inner < 0.0)):
            raise MixedConcavity("Curvature is not strictly one-signed in the interior")

    if require_endpoint_flat:
        wall_tol = settings.endpoint_curvature_tolerance
        worst = max(abs(dy2[0]), abs(dy2[-1]))
        if worst > wall_tol:
            raise EndpointCurvatureNonzero(f"Wall curvature {worst:.3e} exceeds {wall_tol:.1e}")

    logger.debug(f"Validated profile: c0={profile.c0:.4f}, concavity={profile.concavity_sign}")
    return profile


# --- heat evolution ----------------------------------------------------------

def _wall_lift(grid: ChannelGrid, values: np.ndarray) -> np.ndarray:
    return values[0] + (values[-1] - values[0]) * grid.nodes


def _heat_generator(grid: ChannelGrid) -> np.ndarray:
    return grid.D2[grid.interior, grid.interior]


def heat_evolve(grid: ChannelGrid, profile: ShearProfile, nu: float, t: float) -> ShearProfile:
    """U(t) from the exact exponential of the interior Dirichlet Laplacian."""
    if t < 0.0:
        raise ValueError(f"Evolution time must be nonnegative, got {t}")
    if t == 0.0:
        return profile

    lift = _wall_lift(grid, profile.values)
    deviation = profile.values - lift
    evolved = lift.copy()
    evolved[grid.interior] += expm(nu * t * _heat_generator(grid)) @ deviation[grid.interior]
    return ShearProfile.from_values(grid, evolved, time=profile.time + t)


def lemma_A3_check(grid: ChannelGrid, profile: ShearProfile, nu: float, t: float, s: float) -> float:
    """||U(t) - U(s)||_inf / (nu (t - s) ||U^in||_{H^4})."""
    if t == s:
        raise DivisionDegenerate("Times coincide; the ratio is undefined")
    if not 0.0 <= s < t:
        raise ValueError(f"Require 0 <= s < t, got s={s}, t={t}")

    later = heat_evolve(grid, profile, nu, t)
    earlier = heat_evolve(grid, profile, nu, s)
    change = float(np.max(np.abs(later.values - earlier.values)))
    return change / (nu * (t - s) * profile.sobolev_h4)


def lemma_A3_sweep(grid: ChannelGrid, profile: ShearProfile, nu: float, s: float, span: float,
                   points: int = 8) -> Tuple[np.ndarray, float]:
    """Ratios at t = s + span 2^-j, j < points, and their t -> s limit ||d_y^2 U(s)||_inf / ||U^in||_{H^4}."""
    if span <= 0.0 or points < 1:
        raise ValueError(f"Need a positive span and at least one point, got span={span}, points={points}")
    gaps = span * 0.5 ** np.arange(points)
    ratios = np.array([lemma_A3_check(grid, profile, nu, s + gap, s) for gap in gaps])
    limit = float(np.max(np.abs(heat_evolve(grid, profile, nu, s).dy2))) / profile.sobolev_h4
    return ratios, limit


class BaseFlowTrajectory:
    """U(t,y) sampled along increasing time lists with cached propagators."""

    def __init__(self, grid: ChannelGrid, initial: ShearProfile, nu: float):
        self.grid = grid
        self.initial = initial
        self.nu = nu
        self._lift = _wall_lift(grid, initial.values)
        self._deviation0 = initial.values - self._lift
        self._propagators: Dict[float, np.ndarray] = {}
        self.steady = not np.any(self._deviation0[grid.interior])

    def _propagator(self, tau: float) -> np.ndarray:
        key = round(tau, 12)
        if key not in self._propagators:
            self._propagators[key] = expm(self.nu * tau * _heat_generator(self.grid))
        return self._propagators[key]

    def sample(self, times: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        """Values and d^2U/dy^2 at each time (rows), times nondecreasing."""
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0.0) or (times.size and times[0] < 0.0):
            raise ValueError("Sample times must be nonnegative and nondecreasing")

        size = self.grid.size
        values = np.empty((times.size, size))
        curvature = np.empty((times.size, size))
        interior = self.grid.interior
        deviation = self._deviation0.copy()
        previous = 0.0
        for n, t in enumerate(times):
            if not self.steady and t > previous:
                deviation[interior] = self._propagator(t - previous) @ deviation[interior]
            previous = t
            values[n] = self._lift + deviation
            curvature[n] = self.grid.D2 @ deviation
        return values, curvature

    def profile_at(self, t: float) -> ShearProfile:
        return heat_evolve(self.grid, self.initial, self.nu, t)


# --- profile sources ---------------------------------------------------------

NAMED_PROFILES: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "couette": lambda y: y.copy(),
    "convex_sine": lambda y: y - 0.05 * np.sin(np.pi * y),
    "quadratic": lambda y: y + 0.1 * y ** 2,
}


def named_profile(name: str, grid: ChannelGrid) -> np.ndarray:
    if name not in NAMED_PROFILES:
        raise ValueError(f"Unknown profile '{name}'. Choose from {list(NAMED_PROFILES.keys())}")
    return NAMED_PROFILES[name](grid.nodes)


def load_profile(path: Union[str, Path], grid: ChannelGrid) -> np.ndarray:
    """Read a two-column (y, U) text file and resample it onto the grid."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"Profile file {path} needs two columns (y, U)")

    order = np.argsort(data[:, 0])
    y, u = data[order, 0], data[order, 1]
    if y[0] > 1e-12 or y[-1] < 1.0 - 1e-12:
        raise ValueError(f"Profile file {path} must cover [0, 1], got [{y[0]}, {y[-1]}]")

    logger.info(f"Loaded profile with {len(y)} samples from {path}")
    return BarycentricInterpolator(y, u)(grid.nodes)
