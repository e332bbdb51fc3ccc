"""
test_linear_semigroup.py - Single-Mode Evolution, Decay Rates and Slab Decomposition
"""

import numpy as np
import pytest

from base_flow import BaseFlowTrajectory, ShearProfile, named_profile
from channel_grid import l2_norm
from exceptions import CFLViolation, DegenerateFit, NonDecaying
from linear_semigroup import (ForcingSlots, ModePropagator, ModeState, evolve_and_measure, fit_decay_rate,
                              frozen_time_decompose, mode_state_residuals, slab_time_grid, step)


def _bump(grid):
    """Clamped stream function with nonzero slope of its vorticity"""
    y = grid.nodes
    return y ** 2 * (1.0 - y) ** 2 * (1.0 + 0.5j * y)


def _state(grid, k=1, scale=1.0):
    theta = scale * np.sin(np.pi * grid.nodes)
    return ModeState.from_stream(grid, k, scale * _bump(grid), theta)


def _advance(grid, state, base, nu, dt, steps, buoyancy=False, forcings=None):
    propagator = ModePropagator(grid, state.k, nu, dt, base.values)
    for _ in range(steps):
        state = step(grid, state, base, forcings, nu, dt, propagator=propagator, buoyancy=buoyancy)
    return state


class TestStep:
    """One Crank-Nicolson/Heun step and its structural properties."""

    def test_zero_state_stays_zero(self, grid32, convex_sine):
        state = step(grid32, ModeState.zero(grid32, 2), convex_sine, None, 1e-2, 0.1)
        assert not np.any(state.omega) and not np.any(state.theta) and not np.any(state.psi)
        assert abs(state.t - 0.1) < 1e-15

    def test_cfl_violation(self, grid32, convex_sine):
        with pytest.raises(CFLViolation):
            step(grid32, _state(grid32), convex_sine, None, 1e-2, 2.0)

    def test_nonpositive_step(self, grid32, convex_sine):
        with pytest.raises(ValueError):
            step(grid32, _state(grid32), convex_sine, None, 1e-2, 0.0)

    def test_walls_stay_clamped(self, grid32, convex_sine):
        state = _advance(grid32, _state(grid32), convex_sine, 1e-2, 0.1, 20, buoyancy=True)
        residuals = mode_state_residuals(grid32, state)
        assert residuals["clamped"] < 1e-7, f"Clamped defect: {residuals['clamped']:.2e}"
        assert residuals["temperature_wall"] < 1e-14
        assert residuals["stream_relation"] < 1e-8

    def test_superposition(self, grid32, convex_sine):
        a, b = 0.7, -1.3 + 0.2j
        s1 = _state(grid32)
        s2 = ModeState.from_stream(grid32, 1, grid32.nodes ** 2 * (1 - grid32.nodes) ** 2,
                                   grid32.nodes * (1 - grid32.nodes))
        combined = ModeState.from_stream(grid32, 1, a * s1.psi + b * s2.psi, a * s1.theta + b * s2.theta)
        left = _advance(grid32, combined, convex_sine, 1e-2, 0.1, 5, buoyancy=True)
        r1 = _advance(grid32, s1, convex_sine, 1e-2, 0.1, 5, buoyancy=True)
        r2 = _advance(grid32, s2, convex_sine, 1e-2, 0.1, 5, buoyancy=True)
        err = l2_norm(grid32, left.omega - a * r1.omega - b * r2.omega) / l2_norm(grid32, left.omega)
        assert err < 1e-8, f"Superposition error: {err:.2e}"

    def test_conjugate_mode(self, grid32, convex_sine):
        state = _state(grid32, k=2)
        plus = _advance(grid32, state, convex_sine, 1e-2, 0.1, 5, buoyancy=True)
        minus = _advance(grid32, state.conjugate(grid32), convex_sine, 1e-2, 0.1, 5, buoyancy=True)
        err = l2_norm(grid32, minus.omega - np.conj(plus.omega)) / l2_norm(grid32, plus.omega)
        assert err < 1e-10, f"Conjugation error: {err:.2e}"
        assert minus.k == -2

    def test_second_order_in_time(self, grid32, convex_sine):
        """Halving dt cuts the self-convergence error by about four"""
        finals = [_advance(grid32, _state(grid32), convex_sine, 1e-2, 1.0 / n, n, buoyancy=True).omega
                  for n in (20, 40, 80)]
        e1 = l2_norm(grid32, finals[0] - finals[1])
        e2 = l2_norm(grid32, finals[1] - finals[2])
        assert e1 / e2 > 3.0, f"Convergence ratio {e1 / e2:.2f}"

    def test_forcing_enters_as_source(self, grid32, couette):
        slots = ForcingSlots(g1=np.sin(np.pi * grid32.nodes))
        state = step(grid32, ModeState.zero(grid32, 1), couette, slots, 1e-2, 0.1)
        assert l2_norm(grid32, state.theta) > 0.0
        assert not np.any(state.omega)

    def test_duhamel_superposition(self, grid32, convex_sine):
        """Frozen temperature fed through f3 = ik theta: homogeneous part plus the carried forced part"""
        nu, dt, k = 1e-2, 0.1, 1
        frozen = ForcingSlots(f3=1j * k * np.sin(np.pi * grid32.nodes))

        def first_half(t):
            return frozen if t < 0.5 else ForcingSlots()

        full = _advance(grid32, _state(grid32), convex_sine, nu, dt, 10, forcings=first_half)
        homogeneous = _advance(grid32, _state(grid32), convex_sine, nu, dt, 10)
        driven = _advance(grid32, ModeState.zero(grid32, k), convex_sine, nu, dt, 5, forcings=frozen)
        carried = _advance(grid32, driven, convex_sine, nu, dt, 5)

        assert l2_norm(grid32, carried.omega) > 0.0
        assert not np.any(carried.theta)
        err = l2_norm(grid32, full.omega - homogeneous.omega - carried.omega) / l2_norm(grid32, full.omega)
        assert err < 1e-10, f"Duhamel defect: {err:.2e}"
        assert np.array_equal(full.theta, homogeneous.theta)


class TestTimeGrid:
    """Step sizes that tile nu^(-1/3) exactly."""

    @pytest.mark.parametrize("nu", [1e-2, 1e-3, 1e-4])
    def test_slab_is_integer_number_of_steps(self, nu):
        dt, per_slab, total = slab_time_grid(nu, 1, 1.0, 10 * nu ** (-1 / 3))
        assert abs(per_slab * dt - nu ** (-1 / 3)) < 1e-12 * nu ** (-1 / 3)
        assert dt <= 0.25 + 1e-12
        assert total == 10 * per_slab


class TestLedgerAndDecay:
    """Space-time norms and fitted decay rates."""

    def test_unweighted_ledger_is_trapezoid_of_series(self, grid32, convex_sine):
        nu = 1e-2
        trajectory = BaseFlowTrajectory(grid32, convex_sine, nu)
        result = evolve_and_measure(grid32, _state(grid32), trajectory, None, nu, nu ** (-1 / 3), epsilon=0.0)
        series = result.series
        expected = np.trapz(series["norm_omega"] ** 2, series["t"])
        assert abs(result.ledger.omega_l2l2 - expected) < 1e-10 * expected
        assert np.array_equal(series["weighted_omega"], series["norm_omega"])
        assert set(result.ratios) == {"low_frequency", "lemma_forcing", "theta", "rho_vorticity",
                                      "inviscid_damping", "parabola_vorticity"}

    def test_temperature_decays_under_couette(self, grid32, couette):
        nu = 1e-2
        trajectory = BaseFlowTrajectory(grid32, couette, nu)
        result = evolve_and_measure(grid32, _state(grid32), trajectory, None, nu, 2 * nu ** (-1 / 3))
        norms = result.series["norm_theta"]
        assert np.all(np.diff(norms) <= 1e-10 * norms[0])
        assert norms[-1] < norms[0]

    def test_fit_recovers_synthetic_rate(self):
        t = np.linspace(0.0, 10.0, 50)
        gamma = fit_decay_rate(t, 3.0 * np.exp(-0.37 * t))
        assert abs(gamma - 0.37) < 1e-6

    def test_fit_rejects_growth(self):
        t = np.linspace(0.0, 10.0, 50)
        with pytest.raises(NonDecaying):
            fit_decay_rate(t, np.exp(0.1 * t))

    def test_fit_needs_three_points(self):
        with pytest.raises(DegenerateFit):
            fit_decay_rate(np.array([0.0, 1.0]), np.array([1.0, 0.5]))

    def test_couette_rate_scales_with_cube_root(self, grid48):
        nu = 1e-3
        profile = ShearProfile.from_values(grid48, named_profile("couette", grid48))
        trajectory = BaseFlowTrajectory(grid48, profile, nu)
        result = evolve_and_measure(grid48, _state(grid48), trajectory, None, nu, 10 * nu ** (-1 / 3))
        gamma = fit_decay_rate(result.series["t"], result.series["norm_omega"], nu=nu)
        scaled = gamma / nu ** (1 / 3)
        assert 0.05 <= scaled <= 5.0, f"gamma / nu^(1/3) = {scaled:.3f}"


class TestSlabDecomposition:
    """Frozen-time slabs summing back to the direct evolution."""

    def test_reconstruction(self, grid32, convex_sine):
        nu = 1e-2
        trajectory = BaseFlowTrajectory(grid32, convex_sine, nu)
        theta_in = np.sin(np.pi * grid32.nodes) + 0.2j * np.sin(2 * np.pi * grid32.nodes)
        result = frozen_time_decompose(grid32, trajectory, theta_in, None, nu, 1)
        assert result.reconstruction_error < 1e-6, f"Reconstruction error: {result.reconstruction_error:.2e}"
        assert len(result.H) == 4 and np.all(result.H >= 0.0)
        assert len(result.slab_times) == 5
        assert np.isfinite(result.bound_ratio)

    def test_steady_flow_needs_one_slab(self, grid32, couette):
        nu = 1e-2
        trajectory = BaseFlowTrajectory(grid32, couette, nu)
        theta_in = np.sin(np.pi * grid32.nodes).astype(complex)
        result = frozen_time_decompose(grid32, trajectory, theta_in, None, nu, 1)
        assert not np.any(result.slab_states[1:])
        err = l2_norm(grid32, result.slab_states[0] - result.theta_direct)
        assert err < 1e-14

    def test_too_few_slabs(self, grid32, couette):
        trajectory = BaseFlowTrajectory(grid32, couette, 1e-2)
        with pytest.raises(ValueError):
            frozen_time_decompose(grid32, trajectory, np.zeros(grid32.size), None, 1e-2, 1, n_slabs=3)
