# nonlinear_boussinesq.py - Perturbation Boussinesq Solver
"""
Nonlinear Boussinesq

Pseudo-spectral evolution of the full perturbation system around U(t,y):
Fourier modes |k| <= K in x, Chebyshev collocation in y. Quadratic terms are
exact direct convolutions over the retained modes, so there is no aliasing.
Only k >= 0 is stored; mode -k is the conjugate of mode k.

Sign conventions: omega = d_y u1 - d_x u2, u = (d_y psi, -d_x psi),
buoyancy enters the vorticity equation as -ik theta_k.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from base_flow import BaseFlowTrajectory, ShearProfile, named_profile, validate_profile
from channel_grid import ChannelGrid, build_grid, l2_norm
from config import get_settings
from exceptions import BlowupDetected, CFLViolation, ShearStabError
from linear_semigroup import ModePropagator, linear_tendency, slab_time_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PerturbationField:
    """Rows 0..K hold modes k = 0..K; row 0 of omega/theta mirrors the real zero-mode slots."""

    K: int
    t: float
    omega: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    u1_zero: np.ndarray
    theta_zero: np.ndarray

    @classmethod
    def create(cls, grid: ChannelGrid, K: int, t: float, omega: np.ndarray, theta: np.ndarray, psi: np.ndarray,
               u1_zero: np.ndarray, theta_zero: np.ndarray) -> "PerturbationField":
        omega = np.array(omega, dtype=complex)
        theta = np.array(theta, dtype=complex)
        psi = np.array(psi, dtype=complex)
        u1_zero = np.real(np.asarray(u1_zero)).astype(float)
        theta_zero = np.real(np.asarray(theta_zero)).astype(float)
        omega[0] = grid.D1 @ u1_zero
        theta[0] = theta_zero
        psi[0] = 0.0
        return cls(K=K, t=t, omega=omega, theta=theta, psi=psi, u1_zero=u1_zero, theta_zero=theta_zero)

    @classmethod
    def zero(cls, grid: ChannelGrid, K: int, t: float = 0.0) -> "PerturbationField":
        modes = np.zeros((K + 1, grid.size), dtype=complex)
        return cls.create(grid, K, t, modes, modes, modes, np.zeros(grid.size), np.zeros(grid.size))

    @classmethod
    def from_stream(cls, grid: ChannelGrid, K: int, psi: np.ndarray, theta: np.ndarray,
                    u1_zero: Optional[np.ndarray] = None, theta_zero: Optional[np.ndarray] = None,
                    t: float = 0.0) -> "PerturbationField":
        """Build from clamped psi_k (rows k = 0..K, row 0 ignored) and Dirichlet theta_k."""
        psi = np.array(psi, dtype=complex)
        ks = np.arange(K + 1)[:, None]
        omega = psi @ grid.D2.T - ks ** 2 * psi
        u1_zero = np.zeros(grid.size) if u1_zero is None else u1_zero
        theta_zero = np.zeros(grid.size) if theta_zero is None else theta_zero
        return cls.create(grid, K, t, omega, theta, psi, u1_zero, theta_zero)

    def mode(self, k: int) -> Dict[str, np.ndarray]:
        if abs(k) > self.K:
            raise ValueError(f"Mode {k} outside the retained range |k| <= {self.K}")
        pick = (lambda a: a[k]) if k >= 0 else (lambda a: np.conj(a[-k]))
        return {"omega": pick(self.omega), "theta": pick(self.theta), "psi": pick(self.psi)}

    def velocity(self, grid: ChannelGrid):
        ks = np.arange(self.K + 1)[:, None]
        u1 = self.psi @ grid.D1.T
        u1[0] = self.u1_zero
        u2 = -1j * ks * self.psi
        return u1, u2

    def total_norm(self, grid: ChannelGrid) -> float:
        """(sum over all k of ||omega_k||^2 + ||theta_k||^2)^(1/2)."""
        total = 0.0
        for k in range(self.K + 1):
            weight = 1.0 if k == 0 else 2.0
            total += weight * (l2_norm(grid, self.omega[k]) ** 2 + l2_norm(grid, self.theta[k]) ** 2)
        return math.sqrt(total)


def full_modes(half: np.ndarray) -> np.ndarray:
    """Rows k = 0..K to rows k = -K..K (index k + K) using the reality condition."""
    K = half.shape[0] - 1
    out = np.empty((2 * K + 1,) + half.shape[1:], dtype=complex)
    out[K:] = half
    out[:K] = np.conj(half[:0:-1])
    return out


def reality_defect(field: PerturbationField) -> float:
    """Largest violation of omega_{-k} = conj(omega_k) on the assembled full arrays."""
    defect = 0.0
    for values in (field.omega, field.theta):
        full = full_modes(values)
        defect = max(defect, float(np.max(np.abs(full[::-1] - np.conj(full)))))
    return defect


def velocity_bound(grid: ChannelGrid, field: PerturbationField) -> float:
    """Upper bound of max |u| in physical space from the mode magnitudes."""
    u1, u2 = field.velocity(grid)
    magnitude = np.sqrt(np.abs(u1) ** 2 + np.abs(u2) ** 2)
    return float(np.max(magnitude[0] + 2.0 * magnitude[1:].sum(axis=0)))


# --- nonlinear terms ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NonlinearSources:
    f11: np.ndarray
    f12: np.ndarray
    f21: np.ndarray
    f22: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    omega: np.ndarray
    theta: np.ndarray
    u1_zero: np.ndarray
    theta_zero: np.ndarray

    @classmethod
    def zeros(cls, K: int, size: int) -> "NonlinearSources":
        z = np.zeros((K + 1, size), dtype=complex)
        return cls(f11=z, f12=z, f21=z, f22=z, g1=z, g2=z, omega=z, theta=z,
                   u1_zero=np.zeros(size), theta_zero=np.zeros(size))


def _convolve(a: np.ndarray, b: np.ndarray, k: int, K: int, weighted: bool = False) -> np.ndarray:
    """sum_l a_l b_{k-l} over retained l and k-l, optionally weighted by (k-l)."""
    l = np.arange(k - K, K + 1)
    m = k - l
    terms = a[l + K] * b[m + K]
    if weighted:
        terms = terms * m[:, None]
    return terms.sum(axis=0)


def nonlinear_tendency(grid: ChannelGrid, field: PerturbationField) -> NonlinearSources:
    """Convolution forcings of every retained mode k >= 0 and the sources they produce."""
    K = field.K
    D1T = grid.D1.T
    u1, u2 = field.velocity(grid)
    U1, U2 = full_modes(u1), full_modes(u2)
    dU1, dU2 = full_modes(u1 @ D1T), full_modes(u2 @ D1T)
    T = full_modes(field.theta)

    shape = (K + 1, grid.size)
    f11, f12, f21, f22, g1, g2 = (np.empty(shape, dtype=complex) for _ in range(6))
    for k in range(K + 1):
        f11[k] = 1j * _convolve(U1, U1, k, K, weighted=True)
        f12[k] = 1j * _convolve(U1, U2, k, K, weighted=True)
        f21[k] = _convolve(U2, dU1, k, K)
        f22[k] = _convolve(U2, dU2, k, K)
        g1[k] = _convolve(T, U1, k, K)
        g2[k] = _convolve(T, U2, k, K)

    ks = np.arange(K + 1)[:, None]
    omega = -(f11 + f21) @ D1T + 1j * ks * (f12 + f22)
    theta = -1j * ks * g1 - g2 @ D1T
    return NonlinearSources(
        f11=f11, f12=f12, f21=f21, f22=f22, g1=g1, g2=g2,
        omega=omega, theta=theta,
        u1_zero=-(f11[0] + f21[0]).real,
        theta_zero=theta[0].real,
    )


def to_physical(modes_full: np.ndarray, M: int) -> np.ndarray:
    """Values at x_j = 2 pi j / M of sum_k f_k e^{ikx}; rows of the result are x_j."""
    K = (modes_full.shape[0] - 1) // 2
    if M < 2 * K + 1:
        raise ValueError(f"Need at least {2 * K + 1} points in x, got {M}")
    spectrum = np.zeros((M,) + modes_full.shape[1:], dtype=complex)
    for index, k in enumerate(range(-K, K + 1)):
        spectrum[k % M] = modes_full[index]
    return M * np.fft.ifft(spectrum, axis=0)


def zero_mode_consistency(grid: ChannelGrid, field: PerturbationField, M: Optional[int] = None) -> float:
    """Max gap between x-means of physical products and the k=0 convolutions."""
    K = field.K
    M = 3 * K + 1 if M is None else M
    sources = nonlinear_tendency(grid, field)
    u1, u2 = field.velocity(grid)
    ks = np.arange(-K, K + 1)[:, None]
    U1, U2 = full_modes(u1), full_modes(u2)

    u1_x = to_physical(U1, M)
    u2_x = to_physical(U2, M)
    checks = {
        "f11": (u1_x * to_physical(1j * ks * U1, M), sources.f11[0]),
        "f21": (u2_x * to_physical(full_modes(u1 @ grid.D1.T), M), sources.f21[0]),
        "g2": (u2_x * to_physical(full_modes(field.theta), M), sources.g2[0]),
    }
    gap = 0.0
    for name, (product, convolution) in checks.items():
        gap = max(gap, float(np.max(np.abs(product.mean(axis=0) - convolution))))
    return gap


def zero_mode_mass_residual(grid: ChannelGrid, before: PerturbationField, after: PerturbationField,
                            nu: float, dt: float) -> float:
    """|delta int theta_0 - dt nu [d_y theta_0]_0^1| with the flux averaged over the step."""
    mass = np.sum(grid.quad_weights * (after.theta_zero - before.theta_zero))
    flux = 0.0
    for state in (before, after):
        slope = grid.D1 @ state.theta_zero
        flux += 0.5 * (slope[-1] - slope[0])
    return float(abs(mass - dt * nu * flux))


# --- stepping ----------------------------------------------------------------

def build_propagators(grid: ChannelGrid, K: int, nu: float, dt: float,
                      reference: np.ndarray) -> Dict[int, ModePropagator]:
    return {k: ModePropagator(grid, k, nu, dt, reference) for k in range(K + 1)}


def _field_tendency(grid: ChannelGrid, field: PerturbationField, velocity: np.ndarray, curvature: np.ndarray,
                    propagators: Dict[int, ModePropagator], include_nonlinear: bool):
    K = field.K
    sources = nonlinear_tendency(grid, field) if include_nonlinear else NonlinearSources.zeros(K, grid.size)
    e_omega = np.zeros((K + 1, grid.size), dtype=complex)
    e_theta = np.zeros((K + 1, grid.size), dtype=complex)
    for k in range(1, K + 1):
        e_omega[k], e_theta[k] = linear_tendency(
            k, field.omega[k], field.psi[k], field.theta[k], velocity, curvature,
            propagators[k].reference, sources.omega[k], sources.theta[k], buoyancy=True)
    return e_omega, e_theta, sources.u1_zero, sources.theta_zero


def _apply(grid: ChannelGrid, field: PerturbationField, tendency, propagators: Dict[int, ModePropagator],
           t_new: float) -> PerturbationField:
    e_omega, e_theta, e_u1, e_theta0 = tendency
    omega = np.zeros_like(field.omega)
    theta = np.zeros_like(field.theta)
    psi = np.zeros_like(field.psi)
    for k in range(1, field.K + 1):
        omega[k], psi[k] = propagators[k].advance_vorticity(field.omega[k], e_omega[k])
        theta[k] = propagators[k].advance_dirichlet(field.theta[k], e_theta[k])
    zero = propagators[0]
    u1_zero = zero.advance_dirichlet(field.u1_zero.astype(complex), e_u1.astype(complex)).real
    theta_zero = zero.advance_dirichlet(field.theta_zero.astype(complex), e_theta0.astype(complex)).real
    return PerturbationField.create(grid, field.K, t_new, omega, theta, psi, u1_zero, theta_zero)


def check_nonlinear_cfl(grid: ChannelGrid, field: PerturbationField, base_sup: float, dt: float) -> None:
    limit = get_settings().nonlinear_cfl
    number = field.K * dt * (base_sup + velocity_bound(grid, field))
    if number > limit:
        raise CFLViolation(f"K*dt*(|U| + |u|) = {number:.3f} exceeds {limit}")


def nonlinear_step(grid: ChannelGrid, field: PerturbationField, base: ShearProfile, nu: float, dt: float,
                   propagators: Optional[Dict[int, ModePropagator]] = None, include_nonlinear: bool = True,
                   initial_total: Optional[float] = None) -> PerturbationField:
    """Advance every mode one step; base is U at the step midpoint."""
    check_nonlinear_cfl(grid, field, base.sup_norm, dt)
    if propagators is None:
        propagators = build_propagators(grid, field.K, nu, dt, base.values)
    return _heun_field(grid, field, base.values, base.dy2, propagators, dt, include_nonlinear, initial_total)


def _heun_field(grid, field, velocity, curvature, propagators, dt, include_nonlinear, initial_total):
    t_new = field.t + dt
    e0 = _field_tendency(grid, field, velocity, curvature, propagators, include_nonlinear)
    predicted = _apply(grid, field, e0, propagators, t_new)
    e1 = _field_tendency(grid, predicted, velocity, curvature, propagators, include_nonlinear)
    average = tuple(0.5 * (a + b) for a, b in zip(e0, e1))
    updated = _apply(grid, field, average, propagators, t_new)

    if initial_total:
        total = updated.total_norm(grid)
        limit = get_settings().blowup_factor * initial_total
        if not np.isfinite(total) or total > limit:
            raise BlowupDetected(f"Perturbation norm {total:.3e} exceeds {limit:.3e} at t={t_new:.3f}")
    return updated


# --- functionals -------------------------------------------------------------

@dataclass
class StabilityFunctionals:
    K: int
    nu: float
    epsilon0: float
    u_l2l2: np.ndarray = None
    omega_l2l2: np.ndarray = None
    theta_l2l2: np.ndarray = None
    u_sup: np.ndarray = None
    omega_parabola_sup: np.ndarray = None
    theta_sup: np.ndarray = None
    omega_zero_sup: float = 0.0
    theta_zero_sup: float = 0.0
    omega_zero_in_sq: Optional[float] = None
    zero_forcing_l2l2: float = 0.0
    samples: int = 0
    _previous: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)
    _t_previous: float = field(default=0.0, repr=False)

    def __post_init__(self):
        for name in ("u_l2l2", "omega_l2l2", "theta_l2l2", "u_sup", "omega_parabola_sup", "theta_sup"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.K + 1))

    def update(self, grid: ChannelGrid, state: PerturbationField) -> None:
        e = math.exp(self.epsilon0 * self.nu ** (1.0 / 3.0) * state.t)
        u1, u2 = state.velocity(grid)
        weight = np.sqrt(grid.parabola())
        modes = range(self.K + 1)
        theta_norm = np.array([l2_norm(grid, state.theta[k]) for k in modes])
        # f21_0 = sum_l u2_l d_y u1_{-l}, real, and u2_0 = 0
        f21_zero = 2.0 * np.real(np.sum(u2[1:] * np.conj(u1[1:] @ grid.D1.T), axis=0))
        current = {
            "u": e ** 2 * np.array([l2_norm(grid, u1[k]) ** 2 + l2_norm(grid, u2[k]) ** 2 for k in modes]),
            "omega": e ** 2 * np.array([l2_norm(grid, state.omega[k]) ** 2 for k in modes]),
            "theta": e ** 2 * theta_norm ** 2,
            "zero_forcing": l2_norm(grid, f21_zero) ** 2,
        }

        if self._previous is not None:
            half = 0.5 * (state.t - self._t_previous)
            self.u_l2l2 += half * (self._previous["u"] + current["u"])
            self.omega_l2l2 += half * (self._previous["omega"] + current["omega"])
            self.theta_l2l2 += half * (self._previous["theta"] + current["theta"])
            self.zero_forcing_l2l2 += half * (self._previous["zero_forcing"] + current["zero_forcing"])
        self._previous = current
        self._t_previous = state.t

        u_inf = np.max(np.sqrt(np.abs(u1) ** 2 + np.abs(u2) ** 2), axis=1)
        parabola = np.array([l2_norm(grid, weight * state.omega[k]) for k in modes])
        self.u_sup = np.maximum(self.u_sup, e * u_inf)
        self.omega_parabola_sup = np.maximum(self.omega_parabola_sup, e * parabola)
        self.theta_sup = np.maximum(self.theta_sup, e * theta_norm)
        omega_zero = l2_norm(grid, state.omega[0])
        self.omega_zero_sup = max(self.omega_zero_sup, omega_zero)
        self.theta_zero_sup = max(self.theta_zero_sup, l2_norm(grid, state.theta_zero))
        if self.omega_zero_in_sq is None:
            self.omega_zero_in_sq = omega_zero ** 2
        self.samples += 1

    def _velocity_terms(self, linf_power: float) -> np.ndarray:
        ks = np.arange(self.K + 1, dtype=float)
        E = (ks * np.sqrt(self.u_l2l2) + ks ** linf_power * self.u_sup + self.omega_parabola_sup
             + self.nu ** 0.25 * np.sqrt(ks) * np.sqrt(self.omega_l2l2))
        E[0] = self.omega_zero_sup
        return E

    @property
    def E(self) -> np.ndarray:
        """Velocity functional per k >= 0 with the |k|^(1/2) weighted L-infinity term."""
        return self._velocity_terms(0.5)

    @property
    def E_plain(self) -> np.ndarray:
        return self._velocity_terms(0.0)

    @property
    def G(self) -> np.ndarray:
        ks = np.arange(self.K + 1, dtype=float)
        G = ks ** (1.0 / 3.0) * self.theta_sup + self.nu ** (1.0 / 6.0) * ks ** (2.0 / 3.0) * np.sqrt(self.theta_l2l2)
        G[0] = self.theta_zero_sup
        return G

    @staticmethod
    def _sum_over_k(values: np.ndarray) -> float:
        return float(values[0] + 2.0 * values[1:].sum())

    @property
    def sum_E(self) -> float:
        return self._sum_over_k(self.E)

    @property
    def sum_E_plain(self) -> float:
        return self._sum_over_k(self.E_plain)

    @property
    def sum_G(self) -> float:
        return self._sum_over_k(self.G)

    @property
    def zero_mode_ratio(self) -> float:
        """E_0^2 against nu^-1 ||f21_0||^2_{L2L2} + ||omega_0^in||^2."""
        rhs = self.zero_forcing_l2l2 / self.nu + (self.omega_zero_in_sq or 0.0)
        if self.omega_zero_sup == 0.0:
            return 0.0
        return self.omega_zero_sup ** 2 / rhs if rhs > 0.0 else math.inf


def compute_functionals(grid: ChannelGrid, trajectory: Iterable[PerturbationField], nu: float,
                        epsilon0: Optional[float] = None) -> StabilityFunctionals:
    """Accumulate E_k and G_k over a time-ordered sequence of fields."""
    epsilon0 = get_settings().epsilon0 if epsilon0 is None else epsilon0
    functionals = None
    for state in trajectory:
        if functionals is None:
            functionals = StabilityFunctionals(K=state.K, nu=nu, epsilon0=epsilon0)
        functionals.update(grid, state)
    if functionals is None:
        raise ValueError("Trajectory is empty")
    return functionals


# --- initial data ------------------------------------------------------------

def velocity_h2_norm(grid: ChannelGrid, field: PerturbationField) -> float:
    """||u||_{H^2} summed over all Fourier modes."""
    u1, u2 = field.velocity(grid)
    total = 0.0
    for k in range(field.K + 1):
        weight = 1.0 if k == 0 else 2.0
        for component in (u1[k], u2[k]):
            derivatives = [component, grid.D1 @ component, grid.D2 @ component]
            for dx_order in range(3):
                for dy_order in range(3 - dx_order):
                    total += weight * k ** (2 * dx_order) * l2_norm(grid, derivatives[dy_order]) ** 2
    return math.sqrt(total)


def temperature_bracket_norm(grid: ChannelGrid, field: PerturbationField) -> float:
    """(sum over k of (1 + k^2) ||theta_k||^2)^(1/2)."""
    total = sum((1.0 if k == 0 else 2.0) * (1 + k ** 2) * l2_norm(grid, field.theta[k]) ** 2
                for k in range(field.K + 1))
    return math.sqrt(total)


def random_initial_field(grid: ChannelGrid, K: int, nu: float, c_u: float, c_theta: float,
                         rng: np.random.Generator) -> PerturbationField:
    """psi_k = c_k sin^2(pi y), theta_k = d_k sin(pi y) for k = 1..K, rescaled to the threshold sizes."""
    y = grid.nodes
    shape_psi = np.sin(np.pi * y) ** 2
    shape_theta = np.sin(np.pi * y)
    c = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    d = rng.standard_normal(K) + 1j * rng.standard_normal(K)

    psi = np.zeros((K + 1, grid.size), dtype=complex)
    theta = np.zeros((K + 1, grid.size), dtype=complex)
    psi[1:] = c[:, None] * shape_psi
    theta[1:] = d[:, None] * shape_theta
    field = PerturbationField.from_stream(grid, K, psi, theta)

    h2 = velocity_h2_norm(grid, field)
    bracket = temperature_bracket_norm(grid, field)
    psi *= c_u * nu ** 0.5 / h2 if h2 > 0.0 else 0.0
    theta *= c_theta * nu ** (5.0 / 6.0) / bracket if bracket > 0.0 else 0.0
    return PerturbationField.from_stream(grid, K, psi, theta)


# --- runs --------------------------------------------------------------------

@dataclass
class PerturbationRun:
    functionals: StabilityFunctionals
    series: Dict[str, np.ndarray]
    final_field: PerturbationField
    dt: float


def run_perturbation(grid: ChannelGrid, field: PerturbationField, trajectory: BaseFlowTrajectory, nu: float,
                     t_end: float, dt: Optional[float] = None, include_nonlinear: bool = True,
                     epsilon0: Optional[float] = None, record_every: int = 1) -> PerturbationRun:
    """Evolve to t_end refreshing the reference profile at every slab boundary t_j = j nu^(-1/3)."""
    settings = get_settings()
    epsilon0 = settings.epsilon0 if epsilon0 is None else epsilon0
    K = field.K
    sup_U = float(np.max(np.abs(trajectory.initial.values)))
    dt, per_slab, n_steps = slab_time_grid(nu, K, sup_U + velocity_bound(grid, field), t_end, dt)
    n_slabs = math.ceil(n_steps / per_slab)
    U_mid, curvature_mid = trajectory.sample((np.arange(n_steps) + 0.5) * dt)
    slab_ends, _ = trajectory.sample((np.arange(n_slabs) + 1) * nu ** (-1.0 / 3.0))

    functionals = StabilityFunctionals(K=K, nu=nu, epsilon0=epsilon0)
    functionals.update(grid, field)
    initial_total = field.total_norm(grid)
    series: Dict[str, List[float]] = {name: [] for name in ("t", "energy", "norm_omega", "norm_theta", "max_u")}

    def record(state: PerturbationField) -> None:
        u1, u2 = state.velocity(grid)
        energy = sum((1.0 if k == 0 else 2.0) * (l2_norm(grid, u1[k]) ** 2 + l2_norm(grid, u2[k]) ** 2)
                     for k in range(K + 1))
        omega_sq = sum((1.0 if k == 0 else 2.0) * l2_norm(grid, state.omega[k]) ** 2 for k in range(K + 1))
        series["t"].append(state.t)
        series["energy"].append(energy)
        series["norm_omega"].append(math.sqrt(omega_sq))
        series["norm_theta"].append(temperature_bracket_norm(grid, state))
        series["max_u"].append(velocity_bound(grid, state))

    record(field)
    state = field
    propagators = None
    current_slab = -1
    for n in range(n_steps):
        slab = n // per_slab
        if slab != current_slab:
            propagators = build_propagators(grid, K, nu, dt, slab_ends[slab])
            current_slab = slab
        velocity = U_mid[n]
        check_nonlinear_cfl(grid, state, float(np.max(np.abs(velocity))), dt)
        state = _heun_field(grid, state, velocity, curvature_mid[n], propagators, dt, include_nonlinear,
                            initial_total)
        state = replace(state, t=(n + 1) * dt)
        functionals.update(grid, state)
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            record(state)

    logger.debug(f"Perturbation run K={K}, nu={nu}: {n_steps} steps, sum_E={functionals.sum_E:.3e}")
    return PerturbationRun(
        functionals=functionals,
        series={name: np.asarray(values) for name, values in series.items()},
        final_field=state,
        dt=dt,
    )


@dataclass
class ThresholdOutcome:
    nu: float
    K: int
    c_u: float
    c_theta: float
    sum_E: float = 0.0
    sum_E_plain: float = 0.0
    sum_G: float = 0.0
    sum_E_linear: float = 0.0
    ratio_E: float = 0.0
    ratio_G: float = 0.0
    zero_mode_ratio: float = 0.0
    stayed_stable: bool = False
    error: str = ""
    series: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def as_dict(self) -> Dict[str, object]:
        return {
            "nu": self.nu, "K": self.K, "c_u": self.c_u, "c_theta": self.c_theta,
            "sum_E": self.sum_E, "sum_E_plain": self.sum_E_plain, "sum_G": self.sum_G,
            "sum_E_linear": self.sum_E_linear, "ratio_E": self.ratio_E, "ratio_G": self.ratio_G,
            "zero_mode_ratio": self.zero_mode_ratio, "stayed_stable": self.stayed_stable, "error": self.error,
        }


def threshold_point(nu: float, index: int, seed: int, K: int, c_u: float, c_theta: float,
                    t_end_factor: Optional[float] = None, N: Optional[int] = None, profile: str = "couette",
                    dt: Optional[float] = None) -> ThresholdOutcome:
    """One sweep point: nonlinear run plus its linear companion from the same initial data."""
    settings = get_settings()
    t_end_factor = settings.threshold_horizon if t_end_factor is None else t_end_factor
    outcome = ThresholdOutcome(nu=nu, K=K, c_u=c_u, c_theta=c_theta)
    grid = build_grid(N if N is not None else settings.grid_degree_for(nu))
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    initial = random_initial_field(grid, K, nu, c_u, c_theta, rng)
    base = validate_profile(grid, named_profile(profile, grid), require_endpoint_flat=True)
    trajectory = BaseFlowTrajectory(grid, base, nu)
    t_end = t_end_factor * nu ** (-1.0 / 3.0)

    linear = run_perturbation(grid, initial, trajectory, nu, t_end, dt=dt, include_nonlinear=False,
                              record_every=50)
    outcome.sum_E_linear = linear.functionals.sum_E
    try:
        run = run_perturbation(grid, initial, trajectory, nu, t_end, dt=linear.dt, record_every=50)
    except ShearStabError as exc:
        outcome.error = f"{type(exc).__name__}: {exc}"
        logger.warning(f"Threshold run at nu={nu} stopped: {outcome.error}")
        return outcome

    f = run.functionals
    outcome.sum_E = f.sum_E
    outcome.sum_E_plain = f.sum_E_plain
    outcome.sum_G = f.sum_G
    outcome.ratio_E = f.sum_E / nu ** 0.5
    outcome.ratio_G = f.sum_G / nu ** (5.0 / 6.0)
    outcome.zero_mode_ratio = f.zero_mode_ratio
    outcome.stayed_stable = f.sum_E <= settings.stability_factor * outcome.sum_E_linear
    outcome.series = run.series
    return outcome


def threshold_experiment(nu_list: Sequence[float], c_u: float, c_theta: float, seed: int, K: int,
                         t_end_factor: Optional[float] = None, N: Optional[int] = None,
                         profile: str = "couette") -> List[ThresholdOutcome]:
    """Serial sweep; a failed point is recorded and the sweep continues."""
    outcomes = []
    for index, nu in enumerate(nu_list):
        try:
            outcomes.append(threshold_point(nu, index, seed, K, c_u, c_theta, t_end_factor, N, profile))
        except ShearStabError as exc:
            logger.warning(f"Threshold point nu={nu} failed: {exc}")
            outcomes.append(ThresholdOutcome(nu=nu, K=K, c_u=c_u, c_theta=c_theta,
                                             error=f"{type(exc).__name__}: {exc}"))
    return outcomes
