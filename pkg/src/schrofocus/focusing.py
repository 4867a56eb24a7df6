"""Focusing metric, its gradient with respect to the potential, and gradient descent.

The metric is

    F(V) = sum_j [Re psi(t_f, j; V) - target_j]^2,

with psi evolved from psi0 = sqrt(mu0) in the ``k`` lowest eigenmodes of
H[V].  Because psi0 and the eigenvectors are real,

    Re psi(t_f) = sum_n c_n cos(E_n T / hbar) phi_n,   c_n = <phi_n, psi0>.

The gradient uses first-order eigen-perturbation theory,
dE_n/dV_j = phi_n(j)^2 and dphi_n/dV_j = sum_{m != n} phi_m(j) phi_n(j) / (E_n - E_m) phi_m.
The sum over m either runs over the full dense spectrum (``method="full"``)
or is replaced by the equivalent reduced resolvent applied through one
sparse bordered solve per retained mode (``method="sternheimer"``).

With ``normalization="area"`` the sum is divided by the cell area, which is
the same sum taken over fields normalised as continuum densities
(int |psi|^2 dx = 1).  With ``step="functional"`` the descent step uses
the L2 functional derivative dF/dV_j / (h1 h2) rather than the plain partial
derivative; together with ``normalization="area"`` the learning rate is then
a continuum quantity that carries over between resolutions.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hamiltonian import build_hamiltonian
from .model import ControlProblem, GridMaze
from .spectral import DENSE_LIMIT, eigensolve

log = logging.getLogger(__name__)


class NearDegenerateSpectrumError(ArithmeticError):
    def __init__(self, n, m, gap):
        super().__init__(f"eigenvalues {n} and {m} are separated by {gap:.3e}, below the degeneracy gap")
        self.pair = (n, m)
        self.gap = gap


class FocusingError(RuntimeError):
    """Optimisation hit a non-finite metric or gradient; carries the last good state."""

    def __init__(self, message, checkpoint=None, iteration=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


@dataclass
class FocusingConfig:
    learning_rate: float = 0.02
    max_iters: int = 5000
    window: int = 20
    rel_tol: float = 1e-4
    k: int = 15
    degeneracy_gap: float = 1e-8
    gradient_method: str = "auto"
    checkpoint_every: int = 0
    normalization: str = "vector"
    grad_tol: float = 1e-10
    step: str = "partial"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.rel_tol < 0 or self.grad_tol < 0:
            raise ValueError("rel_tol and grad_tol must be nonnegative")
        if not self.degeneracy_gap > 0:
            raise ValueError("degeneracy_gap must be positive")
        if self.max_iters < 1 or self.window < 1 or self.k < 1:
            raise ValueError("max_iters, window and k must be positive")
        metric_weight(None, self.normalization)
        if self.step not in ("partial", "functional"):
            raise ValueError(f"unknown step {self.step!r}")


@dataclass
class LearningCurve:
    metric: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    wall_time: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.metric)

    def append(self, F, gnorm, stamp):
        self.metric.append(float(F))
        self.grad_norm.append(float(gnorm))
        self.wall_time.append(float(stamp))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,metric,grad_norm\n")
            for i, (F, g) in enumerate(zip(self.metric, self.grad_norm)):
                fh.write(f"{i},{F!r},{g!r}\n")

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(list(data[:, 1]), list(data[:, 2]), [0.0] * len(data))


def quadratic_init(maze: GridMaze, scale: float = 1.0) -> np.ndarray:
    """V0(x) = scale * |x - x_start|^2 on free cells."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    X1, X2 = maze.coordinates()
    s = maze.cell_position(maze.start)
    return maze.mask(scale * ((X1 - s[0]) ** 2 + (X2 - s[1]) ** 2))


def metric_weight(maze: Optional[GridMaze], normalization: str) -> float:
    """Overall factor applied to the squared-residual sum."""
    if normalization == "vector":
        return 1.0
    if normalization == "area":
        if maze is None:
            return 1.0
        return 1.0 / float(np.prod([h for h in maze.spacing if np.isfinite(h)]))
    raise ValueError(f"unknown normalization {normalization!r}")


def _resolve_method(method: str, n: int) -> str:
    if method == "auto":
        return "full" if n <= DENSE_LIMIT else "sternheimer"
    if method not in ("full", "sternheimer"):
        raise ValueError(f"unknown gradient method {method!r}")
    return method


def _check_gaps(E: np.ndarray, k: int, gap: float) -> None:
    d = np.diff(E[: min(k + 1, E.size)])
    if d.size and d.min() < gap:
        n = int(np.argmin(d))
        raise NearDegenerateSpectrumError(n, n + 1, float(d[n]))


def _final_real_part(V, problem: ControlProblem, k: int, modes: int):
    maze = problem.maze
    if k > maze.n_free:
        raise ValueError(f"k={k} exceeds the {maze.n_free} free cells")
    H = build_hamiltonian(V, maze, problem.params)
    sol = eigensolve(H, "all" if modes >= maze.n_free else modes)
    E, phi = sol.energies, sol.vectors
    psi0 = maze.to_vector(problem.initial_wavefunction())
    c = phi[:, :k].T @ psi0
    theta = E[:k] * problem.horizon / problem.params.hbar
    re_psi = phi[:, :k] @ (c * np.cos(theta))
    return H, E, phi, psi0, c, theta, re_psi


def focusing_metric(V: np.ndarray, problem: ControlProblem, k: int = 15, normalization: str = "vector") -> float:
    """Sum over free cells of the squared gap between Re psi(t_f) and the target."""
    w = metric_weight(problem.maze, normalization)
    *_, re_psi = _final_real_part(V, problem, k, k)
    r = re_psi - problem.maze.to_vector(problem.target)
    return float(w * (r @ r))


def metric_and_gradient(V: np.ndarray, problem: ControlProblem, k: int = 15,
                        degeneracy_gap: float = 1e-8, method: str = "auto", normalization: str = "vector"):
    """``(F, dF/dV)``; the gradient is a full-grid array, zero on walls."""
    maze = problem.maze
    w = metric_weight(maze, normalization)
    method = _resolve_method(method, maze.n_free)
    modes = maze.n_free if method == "full" else min(k + 1, maze.n_free)
    H, E, phi, psi0, c, theta, re_psi = _final_real_part(V, problem, k, modes)
    _check_gaps(E, k, degeneracy_gap)
    r = re_psi - maze.to_vector(problem.target)
    F = float(w * (r @ r))
    phik = phi[:, :k]
    rho = phik.T @ r
    T = problem.horizon / problem.params.hbar
    alpha = -T * np.sin(theta) * c * rho
    grad = (phik**2) @ alpha
    cos = np.cos(theta)
    if method == "full":
        c_all = phi.T @ psi0
        rho_all = phi.T @ r
        diff = E[:k][None, :] - E[:, None]
        np.fill_diagonal(diff[:k, :k], np.inf)
        M = cos[None, :] * (c_all[:, None] * rho[None, :] + c[None, :] * rho_all[:, None]) / diff
        beta = phi @ M
    else:
        beta = np.empty_like(phik)
        A = H.matrix.tocsc()
        n = A.shape[0]
        for i in range(k):
            g = cos[i] * (rho[i] * psi0 + c[i] * r)
            p = phik[:, i]
            g = g - p * (p @ g)
            bordered = sp.bmat([[A - E[i] * sp.identity(n, format="csc"), p[:, None]], [p[None, :], None]],
                               format="csc")
            y = spla.spsolve(bordered, np.concatenate([-g, [0.0]]))
            beta[:, i] = y[:n]
    grad = 2.0 * w * (grad + np.einsum("jn,jn->j", phik, beta))
    return F, maze.to_grid(grad)


def metric_gradient(V: np.ndarray, problem: ControlProblem, k: int = 15,
                    degeneracy_gap: float = 1e-8, method: str = "auto", normalization: str = "vector") -> np.ndarray:
    return metric_and_gradient(V, problem, k, degeneracy_gap, method, normalization)[1]


def write_checkpoint(directory, V: np.ndarray, iteration: int, metric: float, config_hash: Optional[str]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"checkpoint_{iteration:06d}"
    np.ascontiguousarray(V, dtype="<f8").tofile(stem.with_suffix(".bin"))
    meta = {"iteration": iteration, "metric": metric, "config_hash": config_hash,
            "shape": list(V.shape), "dtype": "float64-le"}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return stem.with_suffix(".bin")


def read_checkpoint(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    V = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
    return V, meta


def optimize(V0: np.ndarray, problem: ControlProblem, cfg: FocusingConfig = None,
             checkpoint_dir=None, config_hash: Optional[str] = None):
    """Plain gradient descent V <- V - lr * dF/dV.

    ``cfg.step="functional"`` divides the step by the cell area.

    Stops when F fails to improve by a relative ``rel_tol`` over the last
    ``window`` iterations, when F vanishes or the gradient norm drops to
    ``grad_tol``, or after
    ``max_iters`` evaluations.  Returns the best potential seen and the
    learning curve.
    """
    cfg = FocusingConfig() if cfg is None else cfg
    maze = problem.maze
    V = maze.mask(np.asarray(V0, dtype=float))
    best_V, best_F = V.copy(), np.inf
    curve = LearningCurve()
    scale = metric_weight(maze, "area") if cfg.step == "functional" else 1.0
    start = time.perf_counter()
    for it in range(cfg.max_iters):
        F, g = metric_and_gradient(V, problem, cfg.k, cfg.degeneracy_gap, cfg.gradient_method,
                                   cfg.normalization)
        gnorm = float(np.linalg.norm(g))
        if not (np.isfinite(F) and np.isfinite(gnorm)):
            raise FocusingError(f"non-finite metric or gradient at iteration {it}", best_V, it)
        curve.append(F, gnorm, time.perf_counter() - start)
        if F < best_F:
            best_V, best_F = V.copy(), F
        if cfg.checkpoint_every and checkpoint_dir is not None and it % cfg.checkpoint_every == 0:
            write_checkpoint(checkpoint_dir, V, it, F, config_hash)
        if it % 100 == 0:
            log.info("iter %d  F=%.6e  |grad|=%.3e", it, F, gnorm)
        if F == 0.0 or gnorm <= cfg.grad_tol:
            break
        if it >= cfg.window:
            ref = curve.metric[it - cfg.window]
            if ref - F <= cfg.rel_tol * ref:
                break
        V = V - (cfg.learning_rate * scale) * g
    return best_V, curve
