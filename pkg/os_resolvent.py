# os_resolvent.py - Orr-Sommerfeld Resolvent with Boundary-Layer Correctors
"""
Orr-Sommerfeld Resolvent

Solves, for one wavenumber k and spectral parameter lambda (a frequency),

    -nu (d_y^2 - k^2) w + i (k V - lambda) w - i k V'' phi + shift w = F,
    (d_y^2 - k^2) phi = w,

first with Navier-slip walls (w = phi = 0), then converts the result to the
clamped problem (phi = d_y phi = 0) with two homogeneous boundary-layer
correctors. The unknown vector is [w; phi] on the collocation nodes and
boundary conditions replace the wall rows of each block.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.linalg import LinAlgError, get_lapack_funcs, lu_factor, lu_solve

from base_flow import ShearProfile
from channel_grid import (ChannelGrid, RhoWeight, h1k_dual_norm, h1k_norm, hyperbolic_kernels, l1_norm, l2_norm,
                          rho_weight)
from config import get_settings
from exceptions import InvalidProblem, LayerTooWide, NearSingular, NonConvergentTail

logger = logging.getLogger(__name__)

NAVIER_SLIP = "navier_slip"
CLAMPED = "clamped"


def default_shift(nu: float) -> complex:
    """-eps0 nu^(1/3), the damping carried by the shifted corrector equations."""
    return complex(-get_settings().shift_factor * nu ** (1.0 / 3.0))


@dataclass(frozen=True, eq=False)
class ResolventProblem:
    grid: ChannelGrid
    nu: float
    k: int
    lam: float
    profile: ShearProfile
    forcing: np.ndarray
    shift: Optional[complex] = None
    require_strict_curvature: bool = False

    def __post_init__(self):
        if self.k == 0:
            raise InvalidProblem("Wavenumber must be nonzero")
        if not 0.0 < self.nu <= 1.0:
            raise InvalidProblem(f"Viscosity must lie in (0, 1], got {self.nu}")
        if np.shape(self.forcing) != self.grid.nodes.shape:
            raise InvalidProblem(f"Forcing of shape {np.shape(self.forcing)} does not match the grid")
        if self.shift is None:
            object.__setattr__(self, "shift", default_shift(self.nu))

        bound = get_settings().shift_bound_factor * (self.nu * self.k ** 2) ** (1.0 / 3.0)
        if abs(self.shift) > bound:
            raise InvalidProblem(f"|shift| = {abs(self.shift):.3e} exceeds {bound:.3e}")

        if self.require_strict_curvature:
            inner = self.profile.dy2[self.grid.interior]
            if not (np.all(inner > 0.0) or np.all(inner < 0.0)):
                raise InvalidProblem("Corrector estimates need V'' strictly one-signed")

    def with_forcing(self, forcing: np.ndarray) -> "ResolventProblem":
        return ResolventProblem(self.grid, self.nu, self.k, self.lam, self.profile, forcing,
                                self.shift, self.require_strict_curvature)

    def with_lambda(self, lam: float) -> "ResolventProblem":
        return ResolventProblem(self.grid, self.nu, self.k, lam, self.profile, self.forcing,
                                self.shift, self.require_strict_curvature)


@dataclass(frozen=True, eq=False)
class ResolventSolution:
    w_na: np.ndarray
    phi_na: np.ndarray
    w1: np.ndarray
    phi1: np.ndarray
    w2: np.ndarray
    phi2: np.ndarray
    c1: complex
    c2: complex
    w_total: np.ndarray
    phi_total: np.ndarray
    u: Tuple[np.ndarray, np.ndarray]
    quadrature_coefficients: Tuple[complex, complex] = (0j, 0j)
    condition: Dict[str, float] = field(default_factory=dict)


class OrrSommerfeldOperator:
    """Bordered block operator of one problem with cached factorizations."""

    def __init__(self, problem: ResolventProblem):
        self.problem = problem
        self.grid = problem.grid
        self._factors: Dict[str, tuple] = {}
        self.condition: Dict[str, float] = {}
        self._interior = self._interior_blocks()

    def _interior_blocks(self) -> np.ndarray:
        p = self.problem
        g = self.grid
        n = g.size
        eye = np.eye(n)
        helm = g.D2 - p.k ** 2 * eye
        V = p.profile.values
        M = np.zeros((2 * n, 2 * n), dtype=complex)
        M[:n, :n] = -p.nu * helm + np.diag(1j * (p.k * V - p.lam) + p.shift)
        M[:n, n:] = np.diag(-1j * p.k * p.profile.dy2)
        M[n:, :n] = -eye
        M[n:, n:] = helm
        return M

    def matrix(self, kind: str) -> np.ndarray:
        n = self.grid.size
        M = self._interior.copy()
        for row in (0, n - 1, n, 2 * n - 1):
            M[row, :] = 0.0
        M[n, n] = 1.0
        M[2 * n - 1, 2 * n - 1] = 1.0
        if kind == NAVIER_SLIP:
            M[0, 0] = 1.0
            M[n - 1, n - 1] = 1.0
        elif kind == CLAMPED:
            M[0, n:] = self.grid.D1[0]
            M[n - 1, n:] = self.grid.D1[-1]
        else:
            raise ValueError(f"Unknown boundary kind '{kind}'. Choose from {[NAVIER_SLIP, CLAMPED]}")
        return M

    def _factor(self, kind: str) -> tuple:
        if kind in self._factors:
            return self._factors[kind]

        M = self.matrix(kind)
        scale = 1.0 / np.max(np.abs(M), axis=1)
        scaled = scale[:, None] * M
        lu, piv = lu_factor(scaled, check_finite=False)

        gecon, lange = get_lapack_funcs(("gecon", "lange"), (scaled,))
        anorm = lange("1", scaled)
        rcond, _ = gecon(lu, anorm, norm="1")
        condition = np.inf if rcond == 0.0 else 1.0 / rcond
        self.condition[kind] = float(condition)

        threshold = get_settings().near_singular_threshold
        if condition > threshold:
            raise NearSingular(condition, threshold)

        self._factors[kind] = (lu, piv, scale)
        return self._factors[kind]

    def solve(self, kind: str, forcing: np.ndarray, left: complex = 0.0,
              right: complex = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Return (w, phi); left/right are the wall rows of the w block."""
        n = self.grid.size
        lu, piv, scale = self._factor(kind)
        b = np.zeros(2 * n, dtype=complex)
        b[:n] = forcing
        b[0] = left
        b[n - 1] = right
        x = lu_solve((lu, piv), scale * b, check_finite=False)
        return x[:n], x[n:]


def solve_navier_slip(problem: ResolventProblem,
                      operator: Optional[OrrSommerfeldOperator] = None) -> Tuple[np.ndarray, np.ndarray]:
    operator = operator or OrrSommerfeldOperator(problem)
    return operator.solve(NAVIER_SLIP, problem.forcing)


def solve_corrector(problem: ResolventProblem, which: int,
                    operator: Optional[OrrSommerfeldOperator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Corrector 1 has unit slope of phi at y=1, corrector 2 at y=0."""
    if which not in (1, 2):
        raise ValueError(f"Corrector index must be 1 or 2, got {which}")
    operator = operator or OrrSommerfeldOperator(problem)
    zero = np.zeros(problem.grid.size, dtype=complex)
    if which == 1:
        return operator.solve(CLAMPED, zero, left=0.0, right=1.0)
    return operator.solve(CLAMPED, zero, left=1.0, right=0.0)


def solve_monolithic(problem: ResolventProblem,
                     operator: Optional[OrrSommerfeldOperator] = None) -> Tuple[np.ndarray, np.ndarray]:
    operator = operator or OrrSommerfeldOperator(problem)
    return operator.solve(CLAMPED, problem.forcing)


def boundary_coefficients(grid: ChannelGrid, k: int, w_na: np.ndarray) -> Tuple[complex, complex]:
    """Quadrature of sinh(k(1-y))/sinh(k) and sinh(ky)/sinh(k) against w_na."""
    kernels = hyperbolic_kernels(grid, k)
    c1 = np.sum(grid.quad_weights * kernels["sinh_1my"] * w_na)
    c2 = np.sum(grid.quad_weights * kernels["sinh_y"] * w_na)
    return complex(c1), complex(c2)


def green_coefficients(grid: ChannelGrid, phi_na: np.ndarray) -> Tuple[complex, complex]:
    """The same two integrals through Green's identity: -phi_na'(0) and phi_na'(1)."""
    slope = grid.D1 @ phi_na
    return complex(-slope[0]), complex(slope[-1])


def assemble_clamped(problem: ResolventProblem,
                     operator: Optional[OrrSommerfeldOperator] = None) -> ResolventSolution:
    operator = operator or OrrSommerfeldOperator(problem)
    grid = problem.grid

    w_na, phi_na = solve_navier_slip(problem, operator)
    w1, phi1 = solve_corrector(problem, 1, operator)
    w2, phi2 = solve_corrector(problem, 2, operator)
    c1, c2 = green_coefficients(grid, phi_na)

    # w2 fixes the slope at y=0, w1 at y=1
    w_total = w_na + c1 * w2 - c2 * w1
    phi_total = phi_na + c1 * phi2 - c2 * phi1
    u = (grid.D1 @ phi_total, -1j * problem.k * phi_total)

    return ResolventSolution(
        w_na=w_na, phi_na=phi_na, w1=w1, phi1=phi1, w2=w2, phi2=phi2,
        c1=c1, c2=c2, w_total=w_total, phi_total=phi_total, u=u,
        quadrature_coefficients=boundary_coefficients(grid, problem.k, w_na),
        condition=dict(operator.condition),
    )


def operator_residual(problem: ResolventProblem, w: np.ndarray, phi: np.ndarray) -> float:
    """Relative L2 residual of both equations on interior nodes."""
    grid = problem.grid
    op = OrrSommerfeldOperator(problem)
    n = grid.size
    r = op._interior @ np.concatenate([w, phi])
    r[:n] -= problem.forcing
    r_w = r[:n].copy()
    r_phi = r[n:].copy()
    for part in (r_w, r_phi):
        part[0] = part[-1] = 0.0
    scale = l2_norm(grid, problem.forcing) or 1.0
    return float(np.sqrt(l2_norm(grid, r_w) ** 2 + l2_norm(grid, r_phi) ** 2) / scale)


def clamped_boundary_values(grid: ChannelGrid, phi: np.ndarray) -> float:
    slope = grid.D1 @ phi
    return float(max(abs(phi[0]), abs(phi[-1]), abs(slope[0]), abs(slope[-1])))


def decomposition_check(problem: ResolventProblem) -> Dict[str, float]:
    """Assembled clamped solution against one monolithic bordered solve."""
    operator = OrrSommerfeldOperator(problem)
    solution = assemble_clamped(problem, operator)
    w_mono, phi_mono = solve_monolithic(problem, operator)
    grid = problem.grid
    scale = l2_norm(grid, w_mono) + l2_norm(grid, phi_mono)
    error = l2_norm(grid, solution.w_total - w_mono) + l2_norm(grid, solution.phi_total - phi_mono)
    q1, q2 = solution.quadrature_coefficients
    return {
        "relative_error": error / scale if scale > 0.0 else error,
        "boundary_max": clamped_boundary_values(grid, solution.phi_total),
        "coefficient_gap": abs(q1 - solution.c1) + abs(q2 - solution.c2),
        "condition": max(solution.condition.values()),
    }


# --- the rho weight ----------------------------------------------------------

def rho_integrand(lam: float, nu: float, k: int, v0: float, rho: float) -> float:
    s = abs(lam - k * v0)
    return 1.0 / (s ** 1.5 * rho + (nu * k * k) ** 0.25 * s ** 0.75 / np.sqrt(rho))


def rho_integral_check(nu: float, k: int, rho: float = 1.0) -> Tuple[float, float]:
    """Integral of the weight identity over all lambda and its ratio to nu^(-1/6)|k|^(-1/3)."""
    settings = get_settings()
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"Weight value must lie in (0, 1], got {rho}")
    a = (nu * k * k) ** 0.25

    # s = r^4 turns the |s|^(-3/4) endpoint singularity into a smooth integrand
    def integrand(r: float) -> float:
        return 4.0 / (rho * r ** 3 + a / np.sqrt(rho))

    balance = (a / rho ** 1.5) ** (1.0 / 3.0)
    total = quad(integrand, 0.0, balance, limit=200)[0]
    upper = 8.0 * balance
    total += quad(integrand, balance, upper, limit=200)[0]

    for _ in range(settings.rho_max_doublings):
        tail_bound = 2.0 / (rho * upper ** 2)
        if tail_bound < settings.rho_tail_tolerance * total:
            break
        total += quad(integrand, upper, 2.0 * upper, limit=200)[0]
        upper *= 2.0
    else:
        raise NonConvergentTail(f"Tail still {tail_bound:.2e} after {settings.rho_max_doublings} doublings")

    value = 2.0 * total
    scaling = nu ** (-1.0 / 6.0) * abs(k) ** (-1.0 / 3.0)
    return float(value), float(value / scaling)


# --- estimate audit ----------------------------------------------------------

@dataclass
class AuditRow:
    estimate_id: str
    nu: float
    k: int
    lambda_at_sup: float
    lhs: float
    rhs: float
    ratio: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "estimate_id": self.estimate_id,
            "nu": self.nu,
            "k": self.k,
            "lambda_at_sup": self.lambda_at_sup,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "ratio": self.ratio,
        }


@dataclass
class AuditReport:
    rows: List[AuditRow]
    lambdas: np.ndarray
    failures: List[Tuple[float, str]]
    max_coefficient_gap: float


def spectral_parameter_grid(profile: ShearProfile, nu: float, k: int) -> np.ndarray:
    """Uniform points over k V([0,1]) plus points outside up to the decay span."""
    settings = get_settings()
    ends = sorted((k * profile.values[0], k * profile.values[-1]))
    uniform = np.linspace(ends[0], ends[1], settings.lambda_uniform_points)
    layer = (nu * k * k) ** (1.0 / 3.0)
    span = settings.lambda_span_factor * layer * abs(k) * float(np.max(np.abs(profile.dy)))
    per_side = settings.lambda_outside_points // 2
    offsets = np.linspace(span / per_side, span, per_side)
    return np.sort(np.concatenate([ends[0] - offsets[::-1], uniform, ends[1] + offsets]))


def _weighted(grid: ChannelGrid, weight: np.ndarray, f: np.ndarray) -> float:
    mask = weight > 0.0
    return float(np.sqrt(np.sum(grid.quad_weights[mask] * weight[mask] * np.abs(f[mask]) ** 2)))


def _audit_terms(problem: ResolventProblem, rho: Optional[RhoWeight],
                 forcing_norms: Dict[str, float]) -> Tuple[Dict[str, Dict[str, float]], float]:
    """Left-hand terms and right-hand sides of the six estimates at one lambda."""
    grid, nu, k, lam = problem.grid, problem.nu, problem.k, problem.lam
    ak = abs(k)
    operator = OrrSommerfeldOperator(problem)
    sol = assemble_clamped(problem, operator)
    V = problem.profile.values

    w = sol.w_na
    u_norm = h1k_norm(grid, k, sol.phi_na)
    w_norm = l2_norm(grid, w)
    dw_norm = h1k_norm(grid, k, w)

    estimates: Dict[str, Dict[str, float]] = {
        "wL2": {
            "u": nu ** (1 / 6) * ak ** (4 / 3) * u_norm,
            "w": nu ** (1 / 3) * ak ** (2 / 3) * w_norm,
            "dw": nu ** (2 / 3) * ak ** (1 / 3) * dw_norm,
            "rhs": forcing_norms["L2"],
        },
        "wH1": {
            "w": nu ** (1 / 6) * ak ** (4 / 3) * w_norm,
            "w_l1": nu ** (1 / 12) * ak ** (5 / 3) * l1_norm(grid, w),
            "critical": ak * l2_norm(grid, (k * V - lam) * w),
            "rhs": forcing_norms["H1k"],
        },
        "wH-1": {
            "u": nu ** 0.5 * ak * u_norm,
            "w": nu ** (2 / 3) * ak ** (1 / 3) * w_norm,
            "dw": nu * dw_norm,
            "rhs": forcing_norms["H1k_dual"],
        },
    }

    if rho is not None:
        near0 = 1.0 + abs(lam - k * V[0])
        near1 = 1.0 + abs(lam - k * V[-1])
        c1, c2 = abs(sol.c1), abs(sol.c2)
        # walls carry rho = 0 and drop out of the rho^(-1/2) quadrature
        inv_rho = np.zeros_like(rho.values)
        inside = rho.values > 0.0
        inv_rho[inside] = rho.values[inside] ** -0.5
        rho_terms = {
            "wall0": near0 ** 0.75 * c1 * _weighted(grid, rho.values, sol.w2),
            "wall1": near1 ** 0.75 * c2 * _weighted(grid, rho.values, sol.w1),
            "wall0_layer": nu ** 0.125 * ak ** 0.25 * near0 ** 0.375 * c1 * _weighted(grid, inv_rho, sol.w2),
            "wall1_layer": nu ** 0.125 * ak ** 0.25 * near1 ** 0.375 * c2 * _weighted(grid, inv_rho, sol.w1),
        }
        estimates["c1rho_FL2"] = dict(rho_terms, rhs=nu ** (-1 / 3) * ak ** (-2 / 3) * forcing_norms["L2"])
        estimates["c1rho_H-1"] = dict(rho_terms, rhs=nu ** (-2 / 3) * ak ** (-1 / 3) * forcing_norms["H1k_dual"])
        estimates["c1_FH1"] = {
            "wall0": near0 ** 0.75 * c1 * l2_norm(grid, sol.w2),
            "wall1": near1 ** 0.75 * c2 * l2_norm(grid, sol.w1),
            "rhs": nu ** (-1 / 3) * ak ** (-5 / 3) * forcing_norms["H1k"],
        }

    estimates["gain_wNa"] = {"w": w_norm, "rhs": forcing_norms["L2"]}

    q1, q2 = sol.quadrature_coefficients
    gap = abs(q1 - sol.c1) + abs(q2 - sol.c2)
    return estimates, gap


def _ratio(lhs: float, rhs: float) -> float:
    if lhs == 0.0:
        return 0.0
    return lhs / rhs if rhs > 0.0 else np.inf


def estimate_audit(grid: ChannelGrid, profile: ShearProfile, nu: float, k: int, forcing: np.ndarray,
                   shift: Optional[complex] = None, lambdas: Optional[Sequence[float]] = None,
                   refine: bool = True) -> AuditReport:
    """Sup over the lambda sweep of every estimate's LHS/RHS, with the individual terms."""
    settings = get_settings()
    base = ResolventProblem(grid, nu, k, 0.0, profile, np.asarray(forcing, dtype=complex), shift)
    forcing_norms = {
        "L2": l2_norm(grid, base.forcing),
        "H1k": h1k_norm(grid, k, base.forcing),
        "H1k_dual": h1k_dual_norm(grid, k, base.forcing),
    }
    try:
        rho = rho_weight(nu, k, grid)
    except LayerTooWide as e:
        logger.warning(f"Skipping corrector estimates at nu={nu}, k={k}: {e}")
        rho = None

    best: Dict[str, Tuple[float, float, float, float]] = {}
    failures: List[Tuple[float, str]] = []
    evaluated: List[float] = []
    max_gap = 0.0

    def evaluate(lam: float) -> Optional[float]:
        nonlocal max_gap
        try:
            estimates, gap = _audit_terms(base.with_lambda(lam), rho, forcing_norms)
        except (NearSingular, LinAlgError) as e:
            logger.warning(f"Solve failed at nu={nu}, k={k}, lambda={lam:.6g}: {e}")
            failures.append((lam, str(e)))
            return None
        evaluated.append(lam)
        max_gap = max(max_gap, gap)
        for estimate_id, terms in estimates.items():
            rhs = terms["rhs"]
            parts = {name: value for name, value in terms.items() if name != "rhs"}
            candidates = {estimate_id: sum(parts.values())}
            if len(parts) > 1:
                candidates.update({f"{estimate_id}:{name}": value for name, value in parts.items()})
            for key, lhs in candidates.items():
                ratio = _ratio(lhs, rhs)
                if key not in best or ratio > best[key][3]:
                    best[key] = (lam, lhs, rhs, ratio)
        gain = estimates["gain_wNa"]
        return _ratio(gain["w"], gain["rhs"])

    sweep = spectral_parameter_grid(profile, nu, k) if lambdas is None else np.asarray(lambdas, dtype=float)
    logger.debug(f"Auditing nu={nu}, k={k} over {len(sweep)} spectral parameters")
    gains = {lam: evaluate(lam) for lam in sweep}

    if refine and any(g is not None for g in gains.values()):
        center = max((lam for lam, g in gains.items() if g is not None), key=lambda lam: gains[lam])
        center_gain = gains[center]
        layer = (nu * k * k) ** (1.0 / 3.0)
        for level in range(settings.lambda_refine_levels):
            h = layer * 16.0 * 2.0 ** (-level)
            for lam in (center - h, center + h):
                gain = evaluate(lam)
                if gain is not None and gain > center_gain:
                    center, center_gain = lam, gain

    rows = [
        AuditRow(estimate_id=key, nu=nu, k=k, lambda_at_sup=float(lam), lhs=float(lhs), rhs=float(rhs),
                 ratio=float(ratio))
        for key, (lam, lhs, rhs, ratio) in sorted(best.items())
    ]
    return AuditReport(rows=rows, lambdas=np.array(sorted(evaluated)), failures=failures,
                       max_coefficient_gap=float(max_gap))
