"""Low-lying eigenpairs of the Hamiltonian and truncated spectral propagation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .hamiltonian import HamiltonianMatrix
from .model import GridMaze

# below this many free cells the dense path is cheap enough for any k
DENSE_LIMIT = 900


class EigensolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class SpectralSolution:
    """Eigenpairs ``(E_n, phi_n)`` sorted by energy; ``vectors`` has shape ``(n_free, k)``."""

    energies: np.ndarray
    vectors: np.ndarray
    maze: GridMaze
    full: bool

    @property
    def k(self) -> int:
        return self.energies.size

    def truncate(self, k: int) -> "SpectralSolution":
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate {self.k} modes to {k}")
        return SpectralSolution(self.energies[:k], self.vectors[:, :k], self.maze, self.full and k == self.k)

    def mode(self, n: int) -> np.ndarray:
        """Eigenvector ``n`` (0-based) embedded in the full grid."""
        return self.maze.to_grid(self.vectors[:, n])


def _fix_gauge(energies: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    vectors = vectors.copy()
    scale = max(1.0, float(np.abs(energies).max()))
    i = 0
    while i < energies.size:
        j = i + 1
        while j < energies.size and energies[j] - energies[j - 1] <= 1e-10 * scale:
            j += 1
        if j - i > 1:
            vectors[:, i:j] = _canonical_basis(vectors[:, i:j])
        i = j
    for n in range(vectors.shape[1]):
        v = vectors[:, n]
        first = np.flatnonzero(np.abs(v) > 1e-8 * np.abs(v).max())[0]
        if v[first] < 0:
            vectors[:, n] = -v
    return vectors


def _canonical_basis(block: np.ndarray) -> np.ndarray:
    """Basis of span(block) that depends only on the subspace.

    Greedy pivoting on the projector columns: each new vector is the
    projection of the unit vector with the largest remaining weight.
    """
    rest = block.copy()
    out = np.empty_like(block)
    for d in range(block.shape[1]):
        weights = np.einsum("ij,ij->i", rest, rest)
        p = int(np.argmax(weights))
        v = rest @ rest[p]
        v /= np.linalg.norm(v)
        out[:, d] = v
        rest = rest - np.outer(v, v @ rest)
    return out


def eigensolve(H: HamiltonianMatrix, k: Union[int, str] = "all", method: str = "auto") -> SpectralSolution:
    """The ``k`` smallest eigenpairs of ``H`` (``k="all"`` for the full spectrum).

    ``method`` is ``"dense"`` (LAPACK), ``"sparse"`` (shift-invert Lanczos)
    or ``"auto"``.  Eigenvectors are orthonormal with the first significant
    component positive.
    """
    n = H.n
    full = k == "all"
    k = n if full else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if method == "auto":
        method = "dense" if (full or n <= DENSE_LIMIT or k > n // 4) else "sparse"
    if method == "dense":
        subset = None if k == n else (0, k - 1)
        energies, vectors = sla.eigh(H.dense(), subset_by_index=subset)
    elif method == "sparse":
        if k >= n - 1:
            raise ValueError("sparse path needs k < n - 1; use method='dense'")
        # Gershgorin lower bound keeps the shift strictly below the spectrum
        A = H.matrix
        off = abs(A).sum(axis=1).A1 - np.abs(A.diagonal())
        sigma = float((A.diagonal() - off).min()) - 1.0
        v0 = np.ones(n) / np.sqrt(n)
        try:
            energies, vectors = spla.eigsh(H.matrix.tocsc(), k=k, sigma=sigma, which="LM", v0=v0, tol=0.0)
        except spla.ArpackNoConvergence as exc:
            raise EigensolverError(f"ARPACK did not converge: {exc}") from exc
        order = np.argsort(energies)
        energies, vectors = energies[order], vectors[:, order]
        # one Rayleigh-Ritz pass restores orthonormality to working precision
        q, _ = np.linalg.qr(vectors)
        energies, w = np.linalg.eigh(q.T @ (H.matrix @ q))
        vectors = q @ w
    else:
        raise ValueError(f"unknown method {method!r}")
    vectors = _fix_gauge(energies, vectors)
    resid = np.linalg.norm(H.matrix @ vectors - vectors * energies, axis=0)
    bound = 1e-8 * np.maximum(1.0, np.abs(energies))
    if np.any(resid > bound):
        raise EigensolverError(f"eigenpair residuals up to {resid.max():.3e} exceed tolerance", resid)
    return SpectralSolution(energies, vectors, H.maze, full)


def project(psi0: np.ndarray, sol: SpectralSolution) -> Tuple[np.ndarray, float]:
    """Coefficients ``c_n = <phi_n, psi0>`` and the captured norm ``sum |c_n|^2``."""
    psi0 = np.asarray(psi0)
    if psi0.shape != sol.maze.shape:
        raise ValueError("wavefunction and spectral solution live on different grids")
    c = sol.vectors.T @ sol.maze.to_vector(psi0)
    return c, float(np.sum(np.abs(c) ** 2))


def propagate_coefficients(c: np.ndarray, energies: np.ndarray, t: float, hbar: float, t0: float = 0.0) -> np.ndarray:
    return c * np.exp(-1j * energies * (t - t0) / hbar)


def evolve(c: np.ndarray, sol: SpectralSolution, t: float, hbar: float, t0: float = 0.0) -> np.ndarray:
    """psi(t) = sum_n c_n exp(-i E_n (t - t0) / hbar) phi_n, as a complex grid."""
    if t < t0:
        raise ValueError("evolution runs forward from t0 only")
    ct = propagate_coefficients(np.asarray(c, dtype=complex), sol.energies, t, hbar, t0)
    return sol.maze.to_grid(sol.vectors @ ct)


def expected_energy(psi: np.ndarray, H: HamiltonianMatrix) -> float:
    v = H.maze.to_vector(psi)
    return float(np.real(np.vdot(v, H.matrix @ v)))
