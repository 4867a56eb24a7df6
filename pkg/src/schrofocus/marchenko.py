"""One-dimensional inverse scattering via the Marchenko integral equation.

Convention (operator -d^2/dx^2 + V, waves incident from the left): the
unknown K(x, tau) = Omega(-tau; x) lives on tau <= x and solves

    K(x, tau) + Gamma(tau + x) + int_{-inf}^{x} Gamma(tau + s) K(x, s) ds = 0,

with V(x) = 2 d/dx K(x, x).  The kernel is

    Gamma(tau) = (1/2 pi) int L(k) exp(-i k tau) dk + sum_n c_n exp(kappa_n tau),

where L is the left reflection coefficient (psi ~ e^{ikx} + L e^{-ikx} as
x -> -inf).  Gamma must decay as tau -> -inf; it may grow on the right.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline


class BoundStateError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class MarchenkoKernel:
    tau: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        vals = np.asarray(self.values)
        if np.iscomplexobj(vals):
            if np.abs(vals.imag).max() > 1e-8 * max(1.0, np.abs(vals).max()):
                raise ValueError("Marchenko kernel must be real")
            vals = vals.real
        d = np.diff(tau)
        if tau.size < 2 or np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise ValueError("kernel grid must be uniform and increasing")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "values", vals.astype(float))

    @property
    def spacing(self) -> float:
        return float(self.tau[1] - self.tau[0])

    def decays_left(self, tol: float = 1e-10) -> bool:
        return abs(self.values[0]) < tol

    def __call__(self, tau) -> np.ndarray:
        return np.interp(tau, self.tau, self.values, left=0.0, right=np.nan)


@dataclass(frozen=True)
class CausalKernel:
    """``omega[i, j] = K(x_i, x_j)`` for ``j <= i``; exactly zero above the diagonal."""

    x: np.ndarray
    omega: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.omega).copy()


def sum_grid(x: np.ndarray) -> np.ndarray:
    """Uniform grid holding every pairwise sum x_i + x_j."""
    h = x[1] - x[0]
    return 2 * x[0] + h * np.arange(2 * x.size - 1)


def solve_marchenko(kernel: Union[MarchenkoKernel, Callable], x_grid: np.ndarray) -> CausalKernel:
    """Nystrom solve with trapezoid weights; the lower limit is ``x_grid[0]``.

    For each x_i the unknowns are K(x_i, x_j), j <= i, so causality holds by
    construction.
    """
    x = np.asarray(x_grid, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two grid points")
    h = x[1] - x[0]
    if isinstance(kernel, MarchenkoKernel):
        if not kernel.decays_left():
            raise ValueError("kernel does not decay at the left edge of its grid")
    G = np.asarray(kernel(sum_grid(x)), dtype=float)
    if not np.all(np.isfinite(G)):
        raise ValueError("kernel grid does not cover all pairwise sums of x_grid")
    n = x.size
    if np.abs(G).max() * h > 1e10:
        # identity part of the system is then resolved to < 6 digits
        warnings.warn("kernel magnitude exceeds 1e10; the Nystrom system loses precision", RuntimeWarning)
    omega = np.zeros((n, n))
    for i in range(n):
        m = i + 1
        # Gamma(x_j + x_l) sits at index j + l of the sum grid
        idx = np.arange(m)
        A = G[idx[:, None] + idx[None, :]]
        w = np.full(m, h)
        w[0] = w[-1] = 0.5 * h
        if m == 1:
            w[0] = 0.0
        system = np.eye(m) + A * w[None, :]
        rhs = -G[idx + i]
        try:
            lu = sla.lu_factor(system, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystemError(f"singular Marchenko system at x={x[i]:.4g}") from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * np.abs(system).max()):
            cond = np.linalg.cond(system)
            raise SingularSystemError(f"singular Marchenko system at x={x[i]:.4g} (cond ~ {cond:.2e})")
        omega[i, :m] = sla.lu_solve(lu, rhs, check_finite=False)
    return CausalKernel(x, omega)


def potential_from_kernel(omega: CausalKernel) -> np.ndarray:
    """V(x) = 2 d/dx K(x, x); central differences, second-order one-sided at the ends."""
    if omega.x.size < 3:
        raise ValueError("need at least 3 samples to differentiate the diagonal")
    return 2.0 * np.gradient(omega.diagonal, omega.x, edge_order=2)


def soliton_kernel(kappa: float = 1.0, x0: float = 0.0) -> Callable:
    """Separable one-bound-state kernel c exp(kappa tau), c = 2 kappa exp(-2 kappa x0)."""
    c = 2.0 * kappa * np.exp(-2.0 * kappa * x0)
    return lambda tau: c * np.exp(kappa * np.asarray(tau, dtype=float))


def soliton_potential(x, kappa: float = 1.0, x0: float = 0.0) -> np.ndarray:
    return -2.0 * kappa**2 / np.cosh(kappa * (np.asarray(x) - x0)) ** 2


def soliton_diagonal(x, kappa: float = 1.0, x0: float = 0.0) -> np.ndarray:
    """Closed-form K(x, x) for the soliton kernel."""
    w = np.exp(2.0 * kappa * (np.asarray(x) - x0))
    return -2.0 * kappa * w / (1.0 + w)


def count_bound_states(V: np.ndarray, x: np.ndarray, pad: int = 4) -> int:
    """Negative eigenvalues of -d^2/dx^2 + V on a zero-padded Dirichlet box."""
    h = x[1] - x[0]
    n = V.size
    Vp = np.concatenate([np.zeros(pad * n), V, np.zeros(pad * n)])
    N = Vp.size
    H = sp.diags([np.full(N - 1, -1.0 / h**2), 2.0 / h**2 + Vp, np.full(N - 1, -1.0 / h**2)], [-1, 0, 1])
    if Vp.min() >= 0:
        return 0
    # count via the inertia of H: eigenvalues below zero
    vals = spla.eigsh(H.tocsc(), k=min(8, N - 2), sigma=Vp.min() - 1.0, which="LM", return_eigenvectors=False)
    return int(np.sum(vals < 0))


def _transfer_constant(V, x, k):
    """Exact propagation through piecewise-constant cells centred on the samples."""
    h = x[1] - x[0]
    q = np.sqrt((k[:, None] ** 2 - V[None, :]).astype(complex))
    d = -h  # integrate right to left
    qd = q * d
    cos = np.cos(qd)
    sinc = np.where(np.abs(q) > 1e-14, np.sin(qd) / np.where(np.abs(q) > 1e-14, q, 1.0), d)
    return [(cos[:, j], sinc[:, j], -q[:, j] ** 2 * sinc[:, j]) for j in range(V.size - 1, -1, -1)], \
        x[0] - 0.5 * h, x[-1] + 0.5 * h


def _magnus_steps(V, x, k, substeps):
    """Fourth-order Magnus steps over a cubic-spline interpolant of the samples."""
    spline = CubicSpline(x, V)
    edges = np.linspace(x[0], x[-1], (x.size - 1) * substeps + 1)
    h = edges[1] - edges[0]
    g = 0.5 / np.sqrt(3.0)
    steps = []
    for right, left in zip(edges[:0:-1], edges[-2::-1]):
        mid = 0.5 * (left + right)
        # backward step: Gauss points in the order they are traversed
        v1, v2 = spline(mid + g * h), spline(mid - g * h)
        d = -h
        a1 = v1 - k**2
        a2 = v2 - k**2
        # A(x) = [[0, 1], [a, 0]]; Omega = d/2 (A1 + A2) + sqrt(3) d^2 / 12 [A2, A1]
        s = 0.5 * d
        c = np.sqrt(3.0) * d**2 / 12.0
        om11 = c * (a1 - a2)
        om12 = np.full_like(a1, 2 * s)
        om21 = s * (a1 + a2)
        steps.append((om11, om12, om21))
    return steps, x[0], x[-1]


def reflection_coefficient(V: np.ndarray, x: np.ndarray, k: np.ndarray, method: str = "constant",
                           substeps: int = 4, check_bound_states: bool = True):
    """Left reflection (and transmission) coefficients of sampled ``V`` on grid ``x``.

    ``method="constant"`` treats each sample as a constant cell and
    propagates exactly (suited to steps); ``method="magnus"`` integrates a
    cubic-spline interpolant with a fourth-order Magnus scheme (suited to
    smooth potentials).  V is taken as zero outside the sampled cells.
    Returns ``(L, T)``.
    """
    V = np.asarray(V, dtype=float)
    x = np.asarray(x, dtype=float)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k <= 0):
        raise ValueError("wavenumbers must be positive")
    if check_bound_states:
        nb = count_bound_states(V, x)
        if nb:
            raise BoundStateError(f"potential supports {nb} bound state(s)")
    psi = np.exp(1j * k * 0)  # normalised so that psi = e^{ik(x - x_right)} on the right
    dpsi = 1j * k * psi
    if method == "constant":
        steps, x_left, x_right = _transfer_constant(V, x, k)
        for cos, sinc, m21 in steps:
            psi, dpsi = cos * psi + sinc * dpsi, m21 * psi + cos * dpsi
    elif method == "magnus":
        steps, x_left, x_right = _magnus_steps(V, x, k, substeps)
        for om11, om12, om21 in steps:
            # exp of a traceless 2x2: cosh(w) I + sinh(w)/w Omega, w^2 = om11^2 + om12 om21
            w = np.sqrt((om11**2 + om12 * om21).astype(complex))
            small = np.abs(w) < 1e-12
            ch = np.cosh(w)
            sh = np.where(small, 1.0, np.sinh(w) / np.where(small, 1.0, w))
            psi, dpsi = (ch + sh * om11) * psi + sh * om12 * dpsi, sh * om21 * psi + (ch - sh * om11) * dpsi
    else:
        raise ValueError(f"unknown method {method!r}")
    # on the left psi = A e^{ik(x - x_l)} + B e^{-ik(x - x_l)}
    A = 0.5 * (psi + dpsi / (1j * k))
    B = 0.5 * (psi - dpsi / (1j * k))
    L = (B / A) * np.exp(2j * k * x_left)
    T = np.exp(1j * k * (x_left - x_right)) / A
    return L, T


def born_reflection(V: np.ndarray, x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """First Born approximation L(k) = (1 / 2ik) int V(x) e^{2ikx} dx."""
    h = x[1] - x[0]
    k = np.atleast_1d(k)
    return (h * np.exp(2j * np.outer(k, x)) @ V) / (2j * k)


def kernel_from_reflection(L: np.ndarray, k: np.ndarray, tau: np.ndarray) -> MarchenkoKernel:
    """Gamma(tau) = (1/pi) Re int_0^inf L(k) e^{-ik tau} dk by the trapezoid rule on ``k``.

    ``k`` should start at (or very near) zero and extend until L is negligible.
    """
    k = np.asarray(k, dtype=float)
    w = np.gradient(k)
    w[0] = 0.5 * (k[1] - k[0]) + k[0]
    w[-1] = 0.5 * (k[-1] - k[-2])
    phase = np.exp(-1j * np.outer(tau, k))
    values = np.real(phase @ (w * L)) / np.pi
    return MarchenkoKernel(tau, values)
