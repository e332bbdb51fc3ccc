"""
test_channel_grid.py - Collocation Grid, Spectral Derivatives and Norms
"""

import numpy as np
import pytest

from channel_grid import (NormKind, NormTag, build_grid, chebyshev_coefficients, h1k_dual_norm, h1k_norm,
                          helmholtz_solve, hyperbolic_kernels, inner, l2_norm, norm, sinh_kernel_norms,
                          spectral_derivative, weighted_gradient_ratio)
from exceptions import InvalidGrid


class TestGrid:
    """Nodes, derivative matrices and quadrature on [0,1]."""

    @pytest.mark.parametrize("N", [16, 32, 64])
    def test_walls_are_exact(self, N):
        grid = build_grid(N)
        assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 1.0
        assert grid.size == N + 1
        assert np.all(np.diff(grid.nodes) > 0.0)

    def test_too_coarse_grid_rejected(self):
        with pytest.raises(InvalidGrid):
            build_grid(8)

    @pytest.mark.parametrize("N", [16, 32])
    def test_first_derivative_of_polynomial(self, N):
        """D1 is exact on polynomials of degree <= N"""
        grid = build_grid(N)
        y = grid.nodes
        err = np.max(np.abs(grid.D1 @ y ** 5 - 5 * y ** 4))
        assert err < 1e-10, f"D1 error: {err:.2e}"

    @pytest.mark.parametrize("N", [16, 32])
    def test_second_derivative_of_polynomial(self, N):
        grid = build_grid(N)
        y = grid.nodes
        err = np.max(np.abs(grid.D2 @ y ** 4 - 12 * y ** 2))
        assert err < 1e-7, f"D2 error: {err:.2e}"

    @pytest.mark.parametrize("N", [16, 32, 64])
    def test_quadrature(self, N):
        """Weights integrate constants and y^5 exactly"""
        grid = build_grid(N)
        assert abs(grid.quad_weights.sum() - 1.0) < 1e-14
        err = abs(np.sum(grid.quad_weights * grid.nodes ** 5) - 1.0 / 6.0)
        assert err < 1e-13, f"Quadrature error: {err:.2e}"


class TestSpectralRepresentation:
    """Chebyshev coefficients and chopped derivatives."""

    def test_coefficients_of_chebyshev_polynomial(self, grid32):
        a = chebyshev_coefficients(grid32, np.cos(3 * np.arccos(grid32.x)))
        expected = np.zeros(grid32.size)
        expected[3] = 1.0
        err = np.max(np.abs(a - expected))
        assert err < 1e-13, f"Coefficient error: {err:.2e}"

    def test_complex_coefficients_split(self, grid32):
        f = grid32.nodes ** 2
        a = chebyshev_coefficients(grid32, (1 + 2j) * f)
        b = chebyshev_coefficients(grid32, f)
        assert np.max(np.abs(a - (1 + 2j) * b)) < 1e-14

    @pytest.mark.parametrize("order, tol", [(0, 1e-12), (1, 1e-10), (2, 1e-8), (4, 1e-4)])
    def test_derivatives_of_sine(self, grid32, order, tol):
        y = grid32.nodes
        exact = np.pi ** order * np.sin(np.pi * y + order * np.pi / 2)
        got = spectral_derivative(grid32, np.sin(np.pi * y), order).real
        err = np.max(np.abs(got - exact)) / np.pi ** order
        assert err < tol, f"order {order} derivative error: {err:.2e}"


class TestHelmholtz:
    """Dirichlet solves of (d_y^2 - k^2) psi = f."""

    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_manufactured_solution(self, grid32, k):
        y = grid32.nodes
        psi = np.sin(np.pi * y)
        got = helmholtz_solve(grid32, k, -(np.pi ** 2 + k ** 2) * psi)
        err = np.max(np.abs(got - psi))
        assert err < 1e-10, f"Helmholtz error: {err:.2e}"

    def test_second_mode(self, grid32):
        y = grid32.nodes
        got = helmholtz_solve(grid32, 2, -(4 * np.pi ** 2 + 4) * np.sin(2 * np.pi * y))
        err = np.max(np.abs(got - np.sin(2 * np.pi * y)))
        assert err < 1e-9, f"Helmholtz error: {err:.2e}"

    def test_linearity(self, grid32):
        rng = np.random.default_rng(0)
        f = rng.standard_normal(grid32.size) + 1j * rng.standard_normal(grid32.size)
        g = rng.standard_normal(grid32.size)
        a, b = 2.0 - 1.0j, 0.3
        lhs = helmholtz_solve(grid32, 3, a * f + b * g)
        rhs = a * helmholtz_solve(grid32, 3, f) + b * helmholtz_solve(grid32, 3, g)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_wall_values(self, grid32):
        got = helmholtz_solve(grid32, 2, np.zeros(grid32.size), left=1.0, right=-2.0)
        assert abs(got[0] - 1.0) < 1e-14 and abs(got[-1] + 2.0) < 1e-14


class TestNorms:
    """Closed-form values of every norm on sin(pi y)."""

    def test_l2(self, grid32):
        f = np.sin(np.pi * grid32.nodes)
        assert abs(l2_norm(grid32, f) - np.sqrt(0.5)) < 1e-12
        assert abs(inner(grid32, f, 1j * f) + 0.5j) < 1e-12

    @pytest.mark.parametrize("k", [1, 4])
    def test_h1k(self, grid32, k):
        f = np.sin(np.pi * grid32.nodes)
        expected = np.sqrt((np.pi ** 2 + k ** 2) / 2.0)
        assert abs(h1k_norm(grid32, k, f) - expected) < 1e-10

    @pytest.mark.parametrize("k", [1, 4])
    def test_dual_norm(self, grid32, k):
        f = (np.pi ** 2 + k ** 2) * np.sin(np.pi * grid32.nodes)
        expected = np.sqrt((np.pi ** 2 + k ** 2) / 2.0)
        err = abs(h1k_dual_norm(grid32, k, f) - expected)
        assert err < 1e-10, f"Dual norm error: {err:.2e}"

    @pytest.mark.parametrize("k", [1, 3])
    def test_duality_sandwich(self, grid32, k):
        """|<f, g>| <= ||f||_{H^-1_k} ||g||_{H^1_k} for g vanishing at the walls"""
        rng = np.random.default_rng(k)
        y = grid32.nodes
        modes = np.arange(1, 6)
        sines = np.sin(np.pi * np.outer(y, modes))
        cosines = np.cos(np.pi * np.outer(y, modes))
        for _ in range(100):
            f = cosines @ (rng.standard_normal(5) + 1j * rng.standard_normal(5))
            g = sines @ (rng.standard_normal(5) + 1j * rng.standard_normal(5))
            bound = h1k_dual_norm(grid32, k, f) * h1k_norm(grid32, k, g)
            assert abs(inner(grid32, f, g)) <= bound * (1.0 + 1e-8)

    def test_dispatch_and_shape_check(self, grid32):
        f = np.sin(np.pi * grid32.nodes)
        assert norm(grid32, NormKind(NormTag.L2), f) == l2_norm(grid32, f)
        weighted = norm(grid32, NormKind(NormTag.PARABOLA), f)
        assert 0.0 < weighted < l2_norm(grid32, f)
        rho = norm(grid32, NormKind(NormTag.RHO, k=1, nu=1e-3), f)
        assert 0.0 < rho <= l2_norm(grid32, f)
        with pytest.raises(ValueError):
            norm(grid32, NormKind(NormTag.L2), np.ones(5))


class TestAppendixKernels:
    """Hyperbolic kernels and the weighted gradient ratio."""

    def test_kernels_do_not_overflow(self, grid64):
        kernels = hyperbolic_kernels(grid64, 500)
        for name, values in kernels.items():
            assert np.all(np.isfinite(values)), name
        assert abs(kernels["sinh_y"][-1] - 1.0) < 1e-12
        assert abs(kernels["sinh_1my"][0] - 1.0) < 1e-12

    def test_kernel_constant(self, grid64):
        """||kernel|| <= C |k|^(-1/2) with C <= 2 over k = 1..32"""
        rows, constant = sinh_kernel_norms(grid64, range(1, 33))
        assert len(rows) == 32
        assert constant < 2.0, f"Fitted constant {constant:.3f}"

    def test_weighted_gradient_ratio(self, grid32):
        y = grid32.nodes
        assert weighted_gradient_ratio(grid32, 2, np.zeros(grid32.size)) == 0.0
        ratio = weighted_gradient_ratio(grid32, 2, np.sin(np.pi * y) + 0.3j * np.sin(2 * np.pi * y))
        assert np.isfinite(ratio) and ratio > 0.0

    def test_weighted_gradient_inequality(self, grid64):
        """200 random vorticities over k = 1..32 never exceed the weighted bound"""
        rng = np.random.default_rng(2024)
        modes = np.arange(1, 7)
        profiles = np.sin(np.pi * np.outer(grid64.nodes, modes))
        worst = 0.0
        for _ in range(200):
            k = int(rng.integers(1, 33))
            amplitudes = (rng.standard_normal(6) + 1j * rng.standard_normal(6)) / modes ** 2
            worst = max(worst, weighted_gradient_ratio(grid64, k, profiles @ amplitudes))
        assert worst <= 1.0 + 1e-6, f"Worst weighted ratio {worst:.8f}"


class TestSolveCache:
    """Helmholtz factorizations depend on (N, k) only."""

    def test_grids_of_equal_degree_share_solves(self):
        first, second = build_grid(32), build_grid(32)
        rhs = np.sin(np.pi * first.nodes)
        assert np.array_equal(helmholtz_solve(first, 3, rhs), helmholtz_solve(second, 3, rhs))

    def test_grid_carries_no_cache(self, grid32):
        assert "_factorizations" not in vars(grid32)
