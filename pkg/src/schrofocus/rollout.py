"""Euler-Maruyama ensembles of the controlled diffusion, with absorbing walls."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .model import ControlProblem, GridMaze

BLOCK_SIZE = 4096


@dataclass(frozen=True)
class RolloutEnsemble:
    """Paths recorded every ``record_every`` steps.

    ``positions`` has shape ``(n_paths, n_records, 2)`` in (x1, x2); entries
    after a path terminates are NaN.  ``termination_time`` is NaN for
    survivors.
    """

    record_times: np.ndarray
    positions: np.ndarray
    terminated: np.ndarray
    termination_time: np.ndarray
    dt: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    @property
    def survived(self) -> np.ndarray:
        return ~self.terminated

    @property
    def final_positions(self) -> np.ndarray:
        return self.positions[:, -1]


def interpolate(field: np.ndarray, maze: GridMaze, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``field[..., ny, nx]`` at positions.

    Wall corners get zero weight and the remaining weights are renormalised,
    which extrapolates the free-cell values at constant order towards walls.
    """
    x1a, _, _, x2b = maze.extent
    h1, h2 = maze.spacing
    ny, nx = maze.shape
    if nx > 1:
        fc = (x1 - x1a) / h1
        c0 = np.clip(np.floor(fc).astype(np.int64), 0, nx - 2)
        wc = np.clip(fc - c0, 0.0, 1.0)
        cols, wcols = (c0, c0 + 1), (1.0 - wc, wc)
    else:
        cols, wcols = (np.zeros(x1.shape, np.int64),), (np.ones(x1.shape),)
    if ny > 1:
        fr = (x2b - x2) / h2
        r0 = np.clip(np.floor(fr).astype(np.int64), 0, ny - 2)
        wr = np.clip(fr - r0, 0.0, 1.0)
        rows, wrows = (r0, r0 + 1), (1.0 - wr, wr)
    else:
        rows, wrows = (np.zeros(x2.shape, np.int64),), (np.ones(x2.shape),)
    free = maze.free
    acc = np.zeros(field.shape[:-2] + x1.shape)
    wsum = np.zeros(x1.shape)
    for r, a in zip(rows, wrows):
        for c, b in zip(cols, wcols):
            w = a * b * free[r, c]
            acc += w * field[..., r, c]
            wsum += w
    return acc / np.where(wsum > 0, wsum, 1.0)


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


def _sample_initial(rng, density: np.ndarray, maze: GridMaze, n: int) -> np.ndarray:
    p = density.ravel() / density.sum()
    flat = rng.choice(p.size, size=n, p=p)
    rows, cols = np.unravel_index(flat, maze.shape)
    h1, h2 = maze.spacing
    x1 = maze.x1[cols].astype(float)
    x2 = maze.x2[rows].astype(float)
    # uniform within the cell, kept inside the extent
    x1a, x1b, x2a, x2b = maze.extent
    if np.isfinite(h1):
        x1 = np.clip(x1 + h1 * (rng.random(n) - 0.5), x1a, x1b)
    if np.isfinite(h2):
        x2 = np.clip(x2 + h2 * (rng.random(n) - 0.5), x2a, x2b)
    return np.stack([x1, x2], axis=1)


def simulate(solution, problem: ControlProblem, n_paths: int, dt: float, seed: int = 0,
             record_every: Optional[int] = None, noise_cov: Optional[np.ndarray] = None,
             drift_field: Optional[np.ndarray] = None, drift_times: Optional[np.ndarray] = None,
             initial_density: Optional[np.ndarray] = None) -> RolloutEnsemble:
    """Simulate x_{k+1} = x_k + a(t_k, x_k) dt + sqrt(dt) N(0, nu).

    The drift is ``solution.action`` (nearest snapshot in time, bilinear in
    space) unless ``drift_field``/``drift_times`` are given; ``solution=None``
    with no drift field gives the uncontrolled diffusion.  A path terminates
    when its position leaves the extent or its nearest cell is a wall.

    Paths are simulated in fixed blocks of ``BLOCK_SIZE``, each with its own
    stream from ``SeedSequence(seed, spawn_key=(block,))``, so results depend
    only on ``(seed, path index)``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    maze, params = problem.maze, problem.params
    T = problem.horizon
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError(f"dt={dt} does not divide the horizon {T}")
    if drift_field is None and solution is not None:
        drift_field, drift_times = solution.action, solution.times
    if drift_field is not None:
        drift_field = np.asarray(drift_field, dtype=float)
        drift_times = np.asarray(drift_times, dtype=float)
    record_every = max(1, n_steps // 100) if record_every is None else int(record_every)
    rec_steps = np.arange(0, n_steps + 1, record_every)
    if rec_steps[-1] != n_steps:
        rec_steps = np.append(rec_steps, n_steps)
    cov = params.noise_cov if noise_cov is None else np.asarray(noise_cov, dtype=float)
    L = _noise_factor(cov) * np.sqrt(dt)
    density = problem.initial_density if initial_density is None else initial_density

    positions = np.full((n_paths, rec_steps.size, 2), np.nan)
    terminated = np.zeros(n_paths, dtype=bool)
    t_term = np.full(n_paths, np.nan)
    for block, lo in enumerate(range(0, n_paths, BLOCK_SIZE)):
        hi = min(lo + BLOCK_SIZE, n_paths)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
        x = _sample_initial(rng, density, maze, BLOCK_SIZE)[: hi - lo]
        alive = np.ones(hi - lo, dtype=bool)
        dead_at = np.full(hi - lo, np.nan)
        rec = 0
        if rec_steps[0] == 0:
            positions[lo:hi, 0] = x
            rec = 1
        for step in range(n_steps):
            t = problem.t0 + step * dt
            z = rng.standard_normal((BLOCK_SIZE, 2))[: hi - lo]
            idx = np.flatnonzero(alive)
            xa = x[idx]
            move = z[idx] @ L.T
            if drift_field is not None:
                s = int(np.argmin(np.abs(drift_times - t)))
                a = interpolate(drift_field[s], maze, xa[:, 0], xa[:, 1])
                move += a.T * dt
            xa = xa + move
            row, col, inside = maze.locate(xa[:, 0], xa[:, 1])
            hit = ~inside | maze.wall[row, col]
            x[idx] = xa
            if hit.any():
                gone = idx[hit]
                alive[gone] = False
                dead_at[gone] = t + dt
            if rec < rec_steps.size and step + 1 == rec_steps[rec]:
                positions[lo + np.flatnonzero(alive), rec] = x[alive]
                rec += 1
        terminated[lo:hi] = ~alive
        t_term[lo:hi] = dead_at
    record_times = problem.t0 + rec_steps * dt
    out = (record_times, positions, terminated, t_term)
    for a in out:
        a.flags.writeable = False
    return RolloutEnsemble(*out, dt=float(dt), seed=int(seed))


def empirical_density(positions: np.ndarray, maze: GridMaze) -> np.ndarray:
    """Normalised nearest-cell histogram of the finite entries of ``positions[..., 2]``."""
    pts = positions.reshape(-1, 2)
    pts = pts[np.isfinite(pts).all(axis=1)]
    hist = np.zeros(maze.shape)
    if pts.size:
        row, col, _ = maze.locate(pts[:, 0], pts[:, 1])
        np.add.at(hist, (row, col), 1.0)
        hist /= hist.sum()
    return hist


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_used: int
    n_terminated: int

    @property
    def defined(self) -> bool:
        return self.n_used > 0

    @property
    def termination_rate(self) -> float:
        return self.n_terminated / (self.n_used + self.n_terminated) if self.n_used + self.n_terminated else 0.0


def _snapshots(field, times, maze):
    f = np.asarray(field, dtype=float)
    if f.ndim == 0:
        return np.broadcast_to(f, (1,) + maze.shape), np.array([0.0])
    if f.shape == maze.shape:
        return f[None], np.array([0.0])
    return f, np.asarray(times, dtype=float)


def estimate_expected_cost(ensemble: RolloutEnsemble, q, q_f, actions, params, maze: GridMaze,
                           times=None, termination_penalty: Optional[float] = None) -> CostEstimate:
    """Monte Carlo estimate of E[q_f(x(t_f)) + int (1/2 a^T m^-1 a + q) dt].

    ``q`` may be a scalar, a static grid field, or per-snapshot fields on
    ``times``; ``actions`` is ``None`` or per-snapshot ``(n_snap, 2, ny, nx)``.
    Running costs use the trapezoid rule on the recorded positions.
    Terminated paths are excluded unless ``termination_penalty`` is given,
    in which case each contributes that value.
    """
    q_s, q_t = _snapshots(q, times, maze)
    minv = params.mass_inv
    keep = ensemble.survived
    rt = ensemble.record_times
    pos = ensemble.positions[keep]
    n = pos.shape[0]
    integrand = np.zeros((n, rt.size))
    for i, t in enumerate(rt):
        x1, x2 = pos[:, i, 0], pos[:, i, 1]
        integrand[:, i] = interpolate(q_s[int(np.argmin(np.abs(q_t - t)))], maze, x1, x2)
        if actions is not None:
            acts = np.asarray(actions)
            s = int(np.argmin(np.abs(np.asarray(times) - t)))
            a = interpolate(acts[s], maze, x1, x2)
            integrand[:, i] += 0.5 * np.einsum("an,ab,bn->n", a, minv, a)
    cost = trapezoid(integrand, rt, axis=1) if rt.size > 1 else np.zeros(n)
    if q_f is not None and n:
        cost = cost + interpolate(np.asarray(q_f, dtype=float), maze, pos[:, -1, 0], pos[:, -1, 1])
    n_term = int(ensemble.terminated.sum())
    if termination_penalty is not None:
        cost = np.concatenate([cost, np.full(n_term, float(termination_penalty))])
        n_used, n_term = cost.size, 0
    else:
        n_used = n
    if n_used == 0:
        return CostEstimate(float("nan"), float("nan"), 0, n_term)
    stderr = float(cost.std(ddof=1) / np.sqrt(n_used)) if n_used > 1 else float("nan")
    return CostEstimate(float(cost.mean()), stderr, n_used, n_term)


def focusing_report(ensemble: RolloutEnsemble, maze: GridMaze, radius: float,
                    reference_density: Optional[np.ndarray] = None) -> dict:
    """Survival, goal reach and final-density agreement of an ensemble."""
    n = ensemble.n_paths
    surv = ensemble.survived
    final = ensemble.final_positions[surv]
    goal = maze.cell_position(maze.goal)
    near = np.sum((final - goal) ** 2, axis=1) <= radius**2
    hist = empirical_density(final, maze)
    report = {
        "n_paths": n,
        "survivor_fraction": float(surv.mean()),
        "goal_fraction": float(near.mean()) if final.size else 0.0,
        "goal_fraction_all": float(near.sum() / n),
        "radius": float(radius),
        "final_histogram": hist,
    }
    if reference_density is not None and final.size:
        report["tv_distance"] = tv_distance(hist, reference_density)
    return report
