# channel_grid.py - Chebyshev Collocation on the Channel
"""
Discretization of the wall-normal interval [0,1].

Chebyshev-Gauss-Lobatto nodes mapped to [0,1], collocation derivative
matrices, Clenshaw-Curtis weights, Dirichlet Helmholtz solves and every
norm the estimates are stated in.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy.fft import dct
from scipy.linalg import lu_factor, lu_solve

from config import get_settings
from exceptions import InvalidGrid, LayerTooWide

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """Collocation grid of polynomial degree N (N+1 nodes, both walls included)."""

    N: int
    nodes: np.ndarray
    x: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    quad_weights: np.ndarray

    @property
    def size(self) -> int:
        return self.N + 1

    @property
    def interior(self) -> slice:
        return slice(1, self.N)

    def parabola(self) -> np.ndarray:
        """1 - (2y-1)^2, the squared wall weight of the vorticity sup-norm."""
        return 4.0 * self.nodes * (1.0 - self.nodes)


def chebyshev_matrix(N: int) -> Tuple[np.ndarray, np.ndarray]:
    """Differentiation matrix on x_j = cos(pi j / N), j = 0..N."""
    j = np.arange(N + 1)
    x = np.cos(np.pi * j / N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c = c * (-1.0) ** j
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    np.fill_diagonal(D, 0.0)
    # negative-sum diagonal keeps D @ 1 at round-off
    np.fill_diagonal(D, -D.sum(axis=1))
    return x, D


def clenshaw_curtis_weights(N: int) -> np.ndarray:
    """Clenshaw-Curtis weights on [-1,1] for the points cos(pi j / N)."""
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    inner = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N ** 2 - 1)
        for m in range(1, N // 2):
            v -= 2.0 * np.cos(2 * m * theta[inner]) / (4 * m ** 2 - 1)
        v -= np.cos(N * theta[inner]) / (N ** 2 - 1)
    else:
        w[0] = w[N] = 1.0 / N ** 2
        for m in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * m * theta[inner]) / (4 * m ** 2 - 1)
    w[inner] = 2.0 * v / N
    return w


def build_grid(N: int) -> ChannelGrid:
    """Build the degree-N grid; y_0 = 0 and y_N = 1 exactly."""
    min_degree = get_settings().min_grid_degree
    if N < min_degree:
        raise InvalidGrid(f"Grid degree {N} below minimum {min_degree}; boundary layers would be unresolved")

    x, Dx = chebyshev_matrix(N)
    nodes = 0.5 * (1.0 - x)
    nodes[0], nodes[-1] = 0.0, 1.0
    D1 = -2.0 * Dx
    D2 = D1 @ D1
    weights = 0.5 * clenshaw_curtis_weights(N)

    logger.debug(f"Built Chebyshev grid of degree {N}")
    return ChannelGrid(N=N, nodes=nodes, x=x, D1=D1, D2=D2, quad_weights=weights)


def grid_for_viscosity(nu: float) -> ChannelGrid:
    return build_grid(get_settings().grid_degree_for(nu))


# --- spectral representation -------------------------------------------------

def chebyshev_coefficients(grid: ChannelGrid, f: np.ndarray) -> np.ndarray:
    """Coefficients a_n of f = sum a_n T_n(x) interpolating the nodal values."""
    f = np.asarray(f)
    if np.iscomplexobj(f):
        return chebyshev_coefficients(grid, f.real) + 1j * chebyshev_coefficients(grid, f.imag)
    a = dct(f, type=1) / grid.N
    a[0] *= 0.5
    a[-1] *= 0.5
    return a


def chop(coefficients: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """Drop the tail of coefficients below tol relative to the largest one."""
    tol = get_settings().chop_tolerance if tol is None else tol
    scale = np.max(np.abs(coefficients))
    if scale == 0.0:
        return np.zeros_like(coefficients)
    significant = np.nonzero(np.abs(coefficients) > tol * scale)[0]
    chopped = np.zeros_like(coefficients)
    last = significant[-1] + 1
    chopped[:last] = coefficients[:last]
    return chopped


def spectral_derivative(grid: ChannelGrid, f: np.ndarray, order: int = 1) -> np.ndarray:
    """d^order f / dy^order from the chopped Chebyshev series."""
    a = chop(chebyshev_coefficients(grid, f))
    if order == 0:
        return cheb.chebval(grid.x, a)
    da = cheb.chebder(a, m=order, scl=-2.0)
    return cheb.chebval(grid.x, da)


# --- elliptic solves ---------------------------------------------------------

@lru_cache(maxsize=128)
def _dirichlet_helmholtz_lu(N: int, k_sq: float) -> tuple:
    """LU of the bordered Helmholtz matrix; the grid is a function of N alone."""
    _, Dx = chebyshev_matrix(N)
    D1 = -2.0 * Dx
    A = D1 @ D1 - k_sq * np.eye(N + 1)
    A[0, :] = 0.0
    A[-1, :] = 0.0
    A[0, 0] = 1.0
    A[-1, -1] = 1.0
    return lu_factor(A)


def helmholtz_solve(grid: ChannelGrid, k: float, rhs: np.ndarray,
                    left: complex = 0.0, right: complex = 0.0) -> np.ndarray:
    """Solve (d^2/dy^2 - k^2) psi = rhs with psi(0)=left, psi(1)=right."""
    b = np.array(rhs, dtype=complex)
    b[0] = left
    b[-1] = right
    return lu_solve(_dirichlet_helmholtz_lu(grid.N, float(k) ** 2), b)


# --- the rho weight ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RhoWeight:
    values: np.ndarray
    layer_width: float


def rho_weight(nu: float, k: int, grid: ChannelGrid) -> RhoWeight:
    """Piecewise-linear weight: 0 at the walls, 1 beyond nu^(1/3)|k|^(-1/3)."""
    width = nu ** (1.0 / 3.0) * abs(k) ** (-1.0 / 3.0)
    if width >= 0.5:
        raise LayerTooWide(f"Wall layer width {width:.3f} is not below 1/2")
    y = grid.nodes
    values = np.clip(np.minimum(y, 1.0 - y) / width, 0.0, 1.0)
    return RhoWeight(values=values, layer_width=width)


# --- norms -------------------------------------------------------------------

class NormTag(str, Enum):
    L2 = "L2"
    H1K = "H1k"
    H1K_DUAL = "H1k_dual"
    PARABOLA = "weighted_parabola"
    RHO = "weighted_rho"


@dataclass(frozen=True)
class NormKind:
    tag: NormTag
    k: int = 0
    nu: float = 1.0


def inner(grid: ChannelGrid, f: np.ndarray, g: np.ndarray) -> complex:
    """<f, g> = integral of f * conj(g)."""
    return complex(np.sum(grid.quad_weights * f * np.conj(g)))


def l2_norm(grid: ChannelGrid, f: np.ndarray) -> float:
    return float(np.sqrt(np.sum(grid.quad_weights * np.abs(f) ** 2)))


def l1_norm(grid: ChannelGrid, f: np.ndarray) -> float:
    return float(np.sum(grid.quad_weights * np.abs(f)))


def h1k_norm(grid: ChannelGrid, k: float, f: np.ndarray) -> float:
    """||(d_y, k) f||."""
    df = grid.D1 @ f
    return float(np.sqrt(l2_norm(grid, df) ** 2 + k ** 2 * l2_norm(grid, f) ** 2))


def h1k_dual_norm(grid: ChannelGrid, k: float, f: np.ndarray) -> float:
    """<(-d_y^2 + k^2)^{-1} f, f>^{1/2} with Dirichlet conditions."""
    phi = -helmholtz_solve(grid, k, f)
    value = np.real(inner(grid, phi, f))
    return float(np.sqrt(max(value, 0.0)))


def norm(grid: ChannelGrid, kind: NormKind, f: np.ndarray) -> float:
    f = np.asarray(f)
    if f.shape != grid.nodes.shape:
        raise ValueError(f"Field of shape {f.shape} does not match grid of {grid.size} nodes")

    if kind.tag == NormTag.L2:
        return l2_norm(grid, f)
    if kind.tag == NormTag.H1K:
        return h1k_norm(grid, kind.k, f)
    if kind.tag == NormTag.H1K_DUAL:
        return h1k_dual_norm(grid, kind.k, f)
    if kind.tag == NormTag.PARABOLA:
        return l2_norm(grid, np.sqrt(grid.parabola()) * f)
    if kind.tag == NormTag.RHO:
        rho = rho_weight(kind.nu, kind.k, grid)
        return l2_norm(grid, np.sqrt(rho.values) * f)
    raise ValueError(f"Unknown norm '{kind.tag}'. Choose from {[t.value for t in NormTag]}")


# --- appendix kernels --------------------------------------------------------

def hyperbolic_kernels(grid: ChannelGrid, k: float) -> Dict[str, np.ndarray]:
    """sinh/cosh(k s)/sinh(k) for s = 1-y and s = y, in overflow-free form."""
    k = abs(k)
    y = grid.nodes
    denom = 1.0 - np.exp(-2.0 * k)

    def sinh_ratio(s):
        return (np.exp(k * (s - 1.0)) - np.exp(-k * (s + 1.0))) / denom

    def cosh_ratio(s):
        return (np.exp(k * (s - 1.0)) + np.exp(-k * (s + 1.0))) / denom

    return {
        "sinh_1my": sinh_ratio(1.0 - y),
        "sinh_y": sinh_ratio(y),
        "cosh_1my": cosh_ratio(1.0 - y),
        "cosh_y": cosh_ratio(y),
    }


def sinh_kernel_norms(grid: ChannelGrid, ks: Iterable[int]) -> Tuple[List[Dict[str, float]], float]:
    """L2 norms of the four kernels and the single constant C with norm <= C |k|^{-1/2}."""
    rows = []
    fitted = 0.0
    for k in ks:
        row = {"k": float(k)}
        for name, kernel in hyperbolic_kernels(grid, k).items():
            row[name] = l2_norm(grid, kernel)
        row["constant"] = max(row[name] for name in ("sinh_1my", "sinh_y", "cosh_1my", "cosh_y")) * np.sqrt(abs(k))
        fitted = max(fitted, row["constant"])
        rows.append(row)
    return rows, float(fitted)


def weighted_gradient_ratio(grid: ChannelGrid, k: float, omega: np.ndarray) -> float:
    """||sqrt(w) d_y u||^2 / ||sqrt(w) omega||^2 with w = 1-(2y-1)^2 and psi Dirichlet."""
    psi = helmholtz_solve(grid, k, omega)
    u1 = grid.D1 @ psi
    u2 = -1j * k * psi
    w = grid.parabola()
    lhs = np.sum(grid.quad_weights * w * (np.abs(grid.D1 @ u1) ** 2 + np.abs(grid.D1 @ u2) ** 2))
    rhs = np.sum(grid.quad_weights * w * np.abs(omega) ** 2)
    if rhs == 0.0:
        return 0.0
    return float(lhs / rhs)
