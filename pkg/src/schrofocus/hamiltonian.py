"""Finite-difference Hamiltonian on the free cells of a maze."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import GridMaze, PhysicalParams


class UnsupportedProblemError(ValueError):
    """Problem lies outside what the spectral solver handles (drift, non-diagonal noise)."""


def _axis_laplacian(maze: GridMaze, axis: int) -> sp.csr_matrix:
    """Second difference along one array axis (0 = rows/x2, 1 = cols/x1).

    Walls and the grid exterior are Dirichlet zero: every free cell carries
    the full -2/h^2 diagonal, and only free-free neighbour pairs couple.
    """
    n = maze.n_free
    h = maze.spacing[1 - axis]
    if not np.isfinite(h):
        return sp.csr_matrix((n, n))
    idx = maze.free_index
    a = idx[:-1, :] if axis == 0 else idx[:, :-1]
    b = idx[1:, :] if axis == 0 else idx[:, 1:]
    pair = (a >= 0) & (b >= 0)
    i, j = a[pair], b[pair]
    w = 1.0 / h**2
    rows = np.concatenate([np.arange(n), i, j])
    cols = np.concatenate([np.arange(n), j, i])
    vals = np.concatenate([np.full(n, -2.0 * w), np.full(i.size, w), np.full(i.size, w)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_laplacian(maze: GridMaze) -> sp.csr_matrix:
    """5-point Laplacian over free cells with Dirichlet walls (negative semidefinite)."""
    if maze.n_free == 0:
        raise ValueError("maze has no free cells")
    return (_axis_laplacian(maze, 0) + _axis_laplacian(maze, 1)).tocsr()


@dataclass(frozen=True)
class HamiltonianMatrix:
    matrix: sp.csr_matrix
    maze: GridMaze
    params: PhysicalParams
    V: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def kinetic_operator(maze: GridMaze, params: PhysicalParams) -> sp.csr_matrix:
    """-(hbar/2) (nu_11 d^2/dx1^2 + nu_22 d^2/dx2^2) on free cells."""
    if params.has_drift():
        raise UnsupportedProblemError("drift b must vanish for the spectral solver")
    nu = params.noise_cov
    if params.dim != 2 or nu[0, 1] != 0 or nu[1, 0] != 0:
        raise UnsupportedProblemError("only diagonal 2x2 noise covariance is supported")
    lap_x1 = _axis_laplacian(maze, 1)
    lap_x2 = _axis_laplacian(maze, 0)
    return (-0.5 * params.hbar * (nu[0, 0] * lap_x1 + nu[1, 1] * lap_x2)).tocsr()


def build_hamiltonian(V: np.ndarray, maze: GridMaze, params: PhysicalParams) -> HamiltonianMatrix:
    """H = -(hbar/2) Tr(nu Laplacian) + diag(V); ``V`` is a full-grid array."""
    V = np.asarray(V, dtype=float)
    if V.shape != maze.shape:
        raise ValueError(f"potential has shape {V.shape}, maze is {maze.shape}")
    H = kinetic_operator(maze, params) + sp.diags(maze.to_vector(V))
    V = maze.mask(V)
    V.flags.writeable = False
    return HamiltonianMatrix(H.tocsr(), maze, params, V)
