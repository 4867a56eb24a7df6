"""Control fields implied by a wavefunction psi = exp(R - i S / lambda).

Spatial derivatives are central differences on the maze grid with psi held
at zero on walls and outside the grid.  Phase gradients come from the
logarithmic derivative grad(psi)/psi, so no phase unwrapping is needed.
Cells with |psi|^2 below ``RELIABLE_FLOOR`` are flagged unreliable and all
derived quantities there are set to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .hamiltonian import UnsupportedProblemError, build_hamiltonian
from .model import ControlProblem, GridMaze, PhysicalParams
from .spectral import SpectralSolution, eigensolve, project, propagate_coefficients

LOG_FLOOR = 1e-30
RELIABLE_FLOOR = 1e-12


def _shift(f: np.ndarray, axis: int, step: int) -> np.ndarray:
    """f at the neighbour ``step`` cells along the last-two ``axis`` (0 rows, 1 cols), zero outside."""
    out = np.zeros_like(f)
    ax = f.ndim - 2 + axis
    n = f.shape[ax]
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    if step > 0:
        src[ax], dst[ax] = slice(step, n), slice(0, n - step)
    else:
        src[ax], dst[ax] = slice(0, n + step), slice(-step, n)
    out[tuple(dst)] = f[tuple(src)]
    return out


def gradient(f: np.ndarray, maze: GridMaze) -> np.ndarray:
    """Central-difference gradient ``(d/dx1, d/dx2)`` stacked on a leading axis.

    ``f`` must already vanish on walls.  x2 grows towards row 0.
    """
    h1, h2 = maze.spacing
    g1 = (_shift(f, 1, 1) - _shift(f, 1, -1)) / (2 * h1) if np.isfinite(h1) else np.zeros_like(f)
    g2 = (_shift(f, 0, -1) - _shift(f, 0, 1)) / (2 * h2) if np.isfinite(h2) else np.zeros_like(f)
    return maze.mask(np.stack([g1, g2], axis=-3))


def second_differences(f: np.ndarray, maze: GridMaze) -> np.ndarray:
    """Compact 3-point second differences ``(d2/dx1^2, d2/dx2^2)``, Dirichlet walls."""
    h1, h2 = maze.spacing
    d1 = (_shift(f, 1, 1) - 2 * f + _shift(f, 1, -1)) / h1**2 if np.isfinite(h1) else np.zeros_like(f)
    d2 = (_shift(f, 0, 1) - 2 * f + _shift(f, 0, -1)) / h2**2 if np.isfinite(h2) else np.zeros_like(f)
    return maze.mask(np.stack([d1, d2], axis=-3))


def divergence(F: np.ndarray, maze: GridMaze) -> np.ndarray:
    g = gradient(F[..., 0, :, :], maze)[..., 0, :, :] + gradient(F[..., 1, :, :], maze)[..., 1, :, :]
    return maze.mask(g)


def reliable_mask(psi: np.ndarray, maze: GridMaze) -> np.ndarray:
    return (np.abs(psi) ** 2 >= RELIABLE_FLOOR) & maze.free


def log_derivatives(psi: np.ndarray, maze: GridMaze):
    """``(grad psi / psi, per-axis d2 log psi, mask)``; zero on unreliable cells."""
    psi = maze.mask(np.asarray(psi, dtype=complex))
    ok = reliable_mask(psi, maze)
    safe = np.where(ok, psi, 1.0)
    L = np.where(ok, gradient(psi, maze) / safe, 0.0)
    D2 = np.where(ok, second_differences(psi, maze) / safe - L**2, 0.0)
    return L, D2, ok


def extract_R(psi: np.ndarray, maze: Optional[GridMaze] = None) -> Tuple[np.ndarray, np.ndarray]:
    """R = 1/2 log(|psi|^2 + floor) and the reliable-cell mask."""
    rho = np.abs(psi) ** 2
    R = 0.5 * np.log(rho + LOG_FLOOR)
    ok = rho >= RELIABLE_FLOOR
    if maze is not None:
        ok &= maze.free
    return R, ok


def phase_S(psi: np.ndarray, lam: float) -> np.ndarray:
    """S = -lambda arg(psi), on the principal branch."""
    return -lam * np.angle(psi)


def grad_R(psi: np.ndarray, maze: GridMaze) -> np.ndarray:
    return np.real(log_derivatives(psi, maze)[0])


def grad_S(psi: np.ndarray, maze: GridMaze, lam: float) -> np.ndarray:
    """grad S = -lambda Im(grad psi / psi)."""
    return -lam * np.imag(log_derivatives(psi, maze)[0])


def optimal_action(psi: np.ndarray, maze: GridMaze, params: PhysicalParams):
    """Control action reproducing the density flow of |psi|^2.

    C a = -m^-1 grad S + nu grad R, i.e. the forward drift of the diffusion
    whose density is |psi|^2 under noise covariance nu.  Returns the action
    and the reliable mask.
    """
    if params.has_drift():
        raise UnsupportedProblemError("optimal_action assumes zero drift b")
    L, _, ok = log_derivatives(psi, maze)
    gS = -params.lam * np.imag(L)
    gR = np.real(L)
    drift = -np.einsum("ab,b...->a...", params.mass_inv, gS) + np.einsum("ab,b...->a...", params.noise_cov, gR)
    C = params.control_proj
    if not np.array_equal(C, np.eye(params.dim)):
        drift = np.einsum("ab,b...->a...", np.linalg.pinv(C), drift)
    return np.where(ok, drift, 0.0), ok


def bohm_potential(R: np.ndarray, maze: GridMaze, params: PhysicalParams, form: str = "amplitude") -> np.ndarray:
    """B = -(lambda^2 / 2m) [Laplacian R + |grad R|^2].

    ``form="amplitude"`` evaluates the equivalent e^-R Laplacian(e^R) with the
    Dirichlet 5-point stencil, matching the Hamiltonian discretisation.
    ``form="log"`` differentiates R directly (central differences inside,
    second-order one-sided at the rectangle edges); walls are ignored, so R
    must be meaningful on the whole grid.
    """
    m = params.scalar_mass
    pref = -(params.lam**2) / (2.0 * m)
    R = np.asarray(R, dtype=float)
    if form == "amplitude":
        A = maze.mask(np.exp(R))
        lap = second_differences(A, maze).sum(axis=-3)
        return maze.mask(pref * lap / np.exp(R))
    if form == "log":
        total = np.zeros_like(R)
        for axis, h in ((1, maze.spacing[0]), (0, maze.spacing[1])):
            if np.isfinite(h) and R.shape[axis] >= 4:
                total += _d2_edge(R, h, axis) + np.gradient(R, h, axis=axis, edge_order=2) ** 2
        return maze.mask(pref * total)
    raise ValueError(f"unknown form {form!r}")


def _d2_edge(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
    out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def probability_current(psi: np.ndarray, maze: GridMaze, lam: float) -> np.ndarray:
    """j = exp(2R) grad S."""
    R, _ = extract_R(psi, maze)
    return maze.mask(np.exp(2 * R) * grad_S(psi, maze, lam))


def cost_to_go(R: np.ndarray, S: np.ndarray, lam: float):
    """``(J, z, zhat)`` with z = exp(R - S/lambda) = exp(-J/lambda) and zhat = exp(R + S/lambda)."""
    J = S - lam * R
    return J, np.exp(R - S / lam), np.exp(R + S / lam)


@dataclass(frozen=True)
class ControlSolution:
    """Control fields on a snapshot grid.  Per-snapshot arrays lead with the time axis;
    vector fields carry the component axis next, ordered (x1, x2)."""

    problem: ControlProblem
    V: np.ndarray
    spectral: SpectralSolution
    coefficients: np.ndarray
    times: np.ndarray
    psi: np.ndarray
    R: np.ndarray
    S: np.ndarray
    reliable: np.ndarray
    mu: np.ndarray
    grad_R: np.ndarray
    grad_S: np.ndarray
    lap_R: np.ndarray
    lap_S_axes: np.ndarray
    dR_dt: np.ndarray
    dS_dt: np.ndarray
    action: np.ndarray
    current: np.ndarray
    bohm: np.ndarray

    @property
    def maze(self) -> GridMaze:
        return self.problem.maze

    @property
    def n_snap(self) -> int:
        return self.times.size

    @property
    def captured_norm(self) -> float:
        return float(np.sum(np.abs(self.coefficients) ** 2))

    def snapshot_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))


def _wavefunction(c, sol, t, hbar, t0):
    return sol.maze.to_grid(sol.vectors @ propagate_coefficients(c, sol.energies, t, hbar, t0))


def build_control_solution(problem: ControlProblem, V: np.ndarray, k: int = 15, n_snap: int = 9,
                           spectral: Optional[SpectralSolution] = None, psi0: Optional[np.ndarray] = None,
                           times: Optional[np.ndarray] = None) -> ControlSolution:
    """Evolve psi0 in the ``k`` lowest modes of H[V] and derive all control fields.

    Time derivatives of R and S use the truncated expansion at t +/- dt with
    dt = 1e-3 (t_f - t0); the S difference takes the branch nearest the
    midpoint phase via arg(psi(t+dt) conj(psi(t-dt))).
    """
    maze, params = problem.maze, problem.params
    lam, hbar = params.lam, params.hbar
    if spectral is None:
        spectral = eigensolve(build_hamiltonian(V, maze, params), k)
    psi0 = problem.initial_wavefunction() if psi0 is None else psi0
    c, _ = project(psi0, spectral)
    c = c.astype(complex)
    times = np.linspace(problem.t0, problem.tf, n_snap) if times is None else np.asarray(times, dtype=float)
    dt = 1e-3 * problem.horizon
    fields = {name: [] for name in ("psi", "R", "S", "reliable", "mu", "grad_R", "grad_S", "lap_R",
                                    "lap_S_axes", "dR_dt", "dS_dt", "action", "current", "bohm")}
    for t in times:
        psi = _wavefunction(c, spectral, t, hbar, problem.t0)
        plus = _wavefunction(c, spectral, t + dt, hbar, problem.t0)
        minus = _wavefunction(c, spectral, t - dt, hbar, problem.t0)
        L, D2, ok = log_derivatives(psi, maze)
        R, _ = extract_R(psi, maze)
        ok_t = ok & reliable_mask(plus, maze) & reliable_mask(minus, maze)
        dR = np.where(ok_t, (np.log(np.abs(np.where(ok_t, plus, 1))) - np.log(np.abs(np.where(ok_t, minus, 1)))) / (2 * dt), 0.0)
        dS = np.where(ok_t, -lam * np.angle(plus * np.conj(minus)) / (2 * dt), 0.0)
        action, _ = optimal_action(psi, maze, params)
        fields["psi"].append(psi)
        fields["R"].append(R)
        fields["S"].append(maze.mask(phase_S(psi, lam)))
        fields["reliable"].append(ok)
        fields["mu"].append(np.abs(psi) ** 2)
        fields["grad_R"].append(np.real(L))
        fields["grad_S"].append(-lam * np.imag(L))
        fields["lap_R"].append(np.real(D2).sum(axis=0))
        fields["lap_S_axes"].append(-lam * np.imag(D2))
        fields["dR_dt"].append(dR)
        fields["dS_dt"].append(dS)
        fields["action"].append(action)
        fields["current"].append(probability_current(psi, maze, lam))
        fields["bohm"].append(np.where(ok, bohm_potential(R, maze, params), 0.0))
    arrays = {name: np.array(v) for name, v in fields.items()}
    for a in arrays.values():
        a.flags.writeable = False
    V = maze.mask(np.asarray(V, dtype=float))
    return ControlSolution(problem=problem, V=V, spectral=spectral, coefficients=c, times=times, **arrays)


def recover_state_cost(solution: ControlSolution, params: Optional[PhysicalParams] = None):
    """Invert the potential/cost relation V = q~ - 2 dS/dt - nu |grad S|^2 - 2 b.grad S.

    Returns ``(q_tilde, q)`` per snapshot with q = q~ - B.  Unreliable cells are zero.
    """
    params = solution.problem.params if params is None else params
    if solution.n_snap < 3:
        raise ValueError("state-cost recovery needs at least 3 snapshots")
    if params.has_drift():
        raise UnsupportedProblemError("drift b must vanish")
    gS = solution.grad_S
    quad = np.einsum("tamn,ab,tbmn->tmn", gS, params.noise_cov, gS)
    q_tilde = solution.V[None] + 2.0 * solution.dS_dt + quad
    q_tilde = np.where(solution.reliable, q_tilde, 0.0)
    q = np.where(solution.reliable, q_tilde - solution.bohm, 0.0)
    return q_tilde, q


def schrodinger_state_cost(solution: ControlSolution, params: Optional[PhysicalParams] = None) -> np.ndarray:
    """The cost q~ = -(lambda/hbar) V - B for which the two-bracket sum vanishes
    identically along a Schroedinger evolution in this sign convention."""
    params = solution.problem.params if params is None else params
    q_tilde = -(params.lam / params.hbar) * solution.V[None] - solution.bohm
    return np.where(solution.reliable, q_tilde, 0.0)


def _weighted_rms(r: np.ndarray, mu: np.ndarray, ok: np.ndarray) -> float:
    w = np.where(ok, mu, 0.0)
    return float(np.sqrt(np.sum(w * r**2) / np.sum(w)))


def hjb_residual(solution: ControlSolution, q_tilde: np.ndarray, params: Optional[PhysicalParams] = None):
    """Residuals of the two brackets of the transformed linear HJB equation.

    ``hjb``:  dS/dt - 1/2 grad S^T C m^-1 C^T grad S + 1/2 Tr(nu Lap S) + q~
    ``continuity``:  dR/dt - v . grad R,  v = m^-1 grad S  (as printed)
    ``sum``:  -hjb / lambda + continuity
    ``continuity_standard``:  d mu/dt + div(mu u),  u = -m^-1 grad S

    Returns a dict of per-snapshot field arrays plus ``*_norm`` entries with
    the density-weighted RMS over reliable cells.
    """
    params = solution.problem.params if params is None else params
    if params.has_drift():
        raise UnsupportedProblemError("drift b must vanish")
    maze = solution.maze
    C, minv, nu = params.control_proj, params.mass_inv, params.noise_cov
    gS, gR = solution.grad_S, solution.grad_R
    kin = np.einsum("tamn,ab,tbmn->tmn", gS, C @ minv @ C.T, gS)
    diff = np.einsum("aa,tamn->tmn", nu * np.eye(params.dim), solution.lap_S_axes)
    hjb = solution.dS_dt - 0.5 * kin + 0.5 * diff + np.asarray(q_tilde)
    v = np.einsum("ab,tbmn->tamn", minv, gS)
    cont = solution.dR_dt - np.einsum("tamn,tamn->tmn", v, gR)
    total = -hjb / params.lam + cont
    mu = solution.mu
    flux = -mu[:, None] * v
    standard = 2.0 * mu * solution.dR_dt + divergence(flux, maze)
    ok = solution.reliable
    out = {"hjb": np.where(ok, hjb, 0.0), "continuity": np.where(ok, cont, 0.0),
           "sum": np.where(ok, total, 0.0), "continuity_standard": np.where(ok, standard, 0.0)}
    for name in list(out):
        out[name + "_norm"] = np.array([_weighted_rms(out[name][t], mu[t], ok[t]) for t in range(solution.n_snap)])
    return out
