"""State space, physical parameters and problem definition.

Fields throughout the package are plain ``numpy`` arrays on the full grid,
shape ``(ny, nx)``, with wall cells held at exactly zero.  Row 0 is the top
of the maze (largest x2), column 0 is the left edge (smallest x1).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

Cell = Tuple[int, int]

WALL, FREE, START, GOAL = "#", ".", "S", "G"


class MazeError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridMaze:
    """Rectangular grid with a wall mask, a start cell and a goal cell.

    ``wall`` has shape ``(ny, nx)``; cells are ``(row, col)`` tuples.
    ``extent`` is ``(x1_min, x1_max, x2_min, x2_max)``.  Cell centres sit on
    the nodes of a uniform grid spanning the extent, so the spacing along x1
    is ``(x1_max - x1_min) / (nx - 1)``.  An axis with a single cell has no
    extent and is reported with infinite spacing (it drops out of every
    stencil).
    """

    wall: np.ndarray
    start: Cell
    goal: Cell
    extent: Tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)

    def __post_init__(self):
        wall = np.asarray(self.wall, dtype=bool)
        if wall.ndim != 2 or wall.size == 0:
            raise MazeError("wall mask must be a non-empty 2D array")
        object.__setattr__(self, "wall", _frozen(wall))
        object.__setattr__(self, "start", tuple(int(i) for i in self.start))
        object.__setattr__(self, "goal", tuple(int(i) for i in self.goal))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        x1a, x1b, x2a, x2b = self.extent
        if (self.nx > 1 and not x1b > x1a) or (self.ny > 1 and not x2b > x2a):
            raise MazeError(f"degenerate extent {self.extent}")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not (0 <= cell[0] < self.ny and 0 <= cell[1] < self.nx):
                raise MazeError(f"{name} cell {cell} outside the grid")
            if wall[cell]:
                raise MazeError(f"{name} cell {cell} is a wall")
        if not self._connected(self.start, self.goal):
            raise MazeError("start and goal are not connected through free cells")
        free = ~wall
        index = -np.ones(wall.shape, dtype=np.int64)
        index[free] = np.arange(int(free.sum()))
        object.__setattr__(self, "_index", _frozen(index))

    def _connected(self, a: Cell, b: Cell) -> bool:
        seen = np.zeros(self.shape, dtype=bool)
        seen[a] = True
        queue = deque([a])
        while queue:
            r, c = queue.popleft()
            if (r, c) == b:
                return True
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < self.ny and 0 <= cc < self.nx and not seen[rr, cc] and not self.wall[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
        return False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.wall.shape

    @property
    def ny(self) -> int:
        return self.wall.shape[0]

    @property
    def nx(self) -> int:
        return self.wall.shape[1]

    @property
    def free(self) -> np.ndarray:
        return ~self.wall

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    @property
    def spacing(self) -> Tuple[float, float]:
        """``(h1, h2)``: spacing along x1 (columns) and x2 (rows)."""
        x1a, x1b, x2a, x2b = self.extent
        h1 = (x1b - x1a) / (self.nx - 1) if self.nx > 1 else np.inf
        h2 = (x2b - x2a) / (self.ny - 1) if self.ny > 1 else np.inf
        return h1, h2

    @property
    def x1(self) -> np.ndarray:
        x1a, x1b, _, _ = self.extent
        return np.linspace(x1a, x1b, self.nx) if self.nx > 1 else np.array([0.5 * (x1a + x1b)])

    @property
    def x2(self) -> np.ndarray:
        # top row carries the largest x2
        _, _, x2a, x2b = self.extent
        return np.linspace(x2b, x2a, self.ny) if self.ny > 1 else np.array([0.5 * (x2a + x2b)])

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Meshgrids ``(X1, X2)`` of shape ``(ny, nx)``."""
        return np.meshgrid(self.x1, self.x2)

    def cell_position(self, cell: Cell) -> np.ndarray:
        return np.array([self.x1[cell[1]], self.x2[cell[0]]])

    def index_of(self, cell: Cell) -> int:
        return int(self._index[cell])

    @property
    def free_index(self) -> np.ndarray:
        """Grid of free-cell vector indices, -1 on walls."""
        return self._index

    def to_vector(self, grid_field: np.ndarray) -> np.ndarray:
        return np.asarray(grid_field)[self.free]

    def to_grid(self, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector)
        out = np.zeros(self.shape, dtype=vector.dtype)
        out[self.free] = vector
        return out

    def mask(self, grid_field: np.ndarray) -> np.ndarray:
        """Copy of ``grid_field`` with walls set to zero."""
        out = np.array(grid_field, copy=True)
        out[..., self.wall] = 0
        return out

    def locate(self, x1, x2):
        """Nearest-cell ``(row, col)`` for positions, plus an inside-extent flag."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        x1a, x1b, x2a, x2b = self.extent
        h1, h2 = self.spacing
        col = np.zeros(x1.shape, dtype=np.int64) if self.nx == 1 else np.rint((x1 - x1a) / h1).astype(np.int64)
        row = np.zeros(x2.shape, dtype=np.int64) if self.ny == 1 else np.rint((x2b - x2) / h2).astype(np.int64)
        inside = np.ones(x1.shape, dtype=bool)
        if self.nx > 1:
            inside &= (x1 >= x1a) & (x1 <= x1b)
        if self.ny > 1:
            inside &= (x2 >= x2a) & (x2 <= x2b)
        np.clip(col, 0, self.nx - 1, out=col)
        np.clip(row, 0, self.ny - 1, out=row)
        return row, col, inside


def parse_maze(text: str, extent: Sequence[float] = (-1.0, 1.0, -1.0, 1.0)) -> GridMaze:
    """Parse an ASCII maze ('#' wall, '.' free, 'S' start, 'G' goal)."""
    lines = [ln.strip() for ln in text.strip().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise MazeError("empty maze")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise MazeError("maze is not rectangular")
    bad = set("".join(lines)) - {WALL, FREE, START, GOAL}
    if bad:
        raise MazeError(f"unknown maze characters: {''.join(sorted(bad))}")
    grid = np.array([list(ln) for ln in lines])
    starts = np.argwhere(grid == START)
    goals = np.argwhere(grid == GOAL)
    if len(starts) != 1:
        raise MazeError(f"expected exactly one 'S', found {len(starts)}")
    if len(goals) != 1:
        raise MazeError(f"expected exactly one 'G', found {len(goals)}")
    return GridMaze(grid == WALL, tuple(starts[0]), tuple(goals[0]), tuple(extent))


def render_maze(maze: GridMaze) -> str:
    grid = np.where(maze.wall, WALL, FREE).astype("<U1")
    grid[maze.start] = START
    grid[maze.goal] = GOAL
    return "\n".join("".join(row) for row in grid)


def empty_box(nx: int, ny: int, extent=(-1.0, 1.0, -1.0, 1.0), start=None, goal=None) -> GridMaze:
    """Box whose outer ring of cells is wall; start/goal default to inner corners."""
    wall = np.zeros((ny, nx), dtype=bool)
    wall[[0, -1], :] = True
    wall[:, [0, -1]] = True
    start = (1, 1) if start is None else start
    goal = (ny - 2, nx - 2) if goal is None else goal
    return GridMaze(wall, start, goal, extent)


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants and cost weights.

    ``noise_cov`` is derived, never supplied: nu = lam * C m^-1 C^T.
    ``mass`` may be a scalar (times the identity) or a matrix.
    """

    hbar: float = 1.0
    lam: float = 1.0
    mass: object = 0.5
    control_proj: Optional[np.ndarray] = None
    drift: Optional[Callable] = None
    dim: int = 2
    noise_cov: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        m = np.asarray(self.mass, dtype=float)
        m = m * np.eye(self.dim) if m.ndim == 0 else m
        if m.shape != (self.dim, self.dim):
            raise ValueError(f"mass has shape {m.shape}, expected ({self.dim}, {self.dim})")
        C = np.eye(self.dim) if self.control_proj is None else np.asarray(self.control_proj, dtype=float)
        if C.shape[0] != self.dim:
            raise ValueError("control projection must have one row per state axis")
        if C.shape[1] != m.shape[0]:
            raise ValueError("control projection columns must match the mass matrix")
        nu = self.lam * C @ np.linalg.inv(m) @ C.T
        if not np.allclose(nu, nu.T) or np.linalg.eigvalsh(0.5 * (nu + nu.T)).min() <= 0:
            raise ValueError("noise covariance must be symmetric positive definite")
        object.__setattr__(self, "mass", _frozen(m))
        object.__setattr__(self, "control_proj", _frozen(C))
        object.__setattr__(self, "noise_cov", _frozen(nu))

    @property
    def mass_inv(self) -> np.ndarray:
        return np.linalg.inv(self.mass)

    @property
    def scalar_mass(self) -> float:
        m = self.mass
        if not np.array_equal(m, m[0, 0] * np.eye(self.dim)):
            raise ValueError("operation requires a scalar mass")
        return float(m[0, 0])

    def has_drift(self) -> bool:
        return self.drift is not None


@dataclass(frozen=True)
class ControlProblem:
    maze: GridMaze
    params: PhysicalParams
    t0: float
    tf: float
    initial_density: np.ndarray
    target: np.ndarray
    final_cost: Optional[np.ndarray] = None

    def __post_init__(self):
        maze = self.maze
        if not self.t0 < self.tf:
            raise ValueError("t0 must precede tf")
        mu = np.asarray(self.initial_density, dtype=float)
        tgt = np.asarray(self.target, dtype=float)
        for name, f in (("initial_density", mu), ("target", tgt)):
            if f.shape != maze.shape:
                raise ValueError(f"{name} has shape {f.shape}, maze is {maze.shape}")
            if np.any(f[maze.wall] != 0):
                raise ValueError(f"{name} must vanish on walls")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-10:
            raise ValueError("initial_density must be nonnegative with unit mass")
        if abs(np.sum(tgt**2) - 1.0) > 1e-10:
            raise ValueError("target must have unit L2 norm")
        object.__setattr__(self, "initial_density", _frozen(mu))
        object.__setattr__(self, "target", _frozen(tgt))
        if self.final_cost is not None:
            object.__setattr__(self, "final_cost", _frozen(maze.mask(np.asarray(self.final_cost, dtype=float))))

    @property
    def horizon(self) -> float:
        return self.tf - self.t0

    def initial_wavefunction(self) -> np.ndarray:
        """Real, nonnegative psi0 = sqrt(mu0) (zero initial phase)."""
        return np.sqrt(self.initial_density)


def _gaussian(maze: GridMaze, cell: Cell, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("width must be positive")
    X1, X2 = maze.coordinates()
    c = maze.cell_position(cell)
    g = np.exp(-((X1 - c[0]) ** 2 + (X2 - c[1]) ** 2) / (2.0 * sigma**2))
    return maze.mask(g)


def default_initial_density(maze: GridMaze, sigma0: Optional[float] = None) -> np.ndarray:
    """Unit-mass Gaussian density at the start cell; ``sigma0`` defaults to 2 cells."""
    if sigma0 is None:
        sigma0 = 2.0 * min(maze.spacing)
    g = _gaussian(maze, maze.start, sigma0)
    total = g.sum()
    if not total > 0:
        raise ValueError("initial density vanishes everywhere")
    return g / total


def default_target(maze: GridMaze, sigma_t: Optional[float] = None) -> np.ndarray:
    """Unit-L2 Gaussian at the goal cell; ``sigma_t`` defaults to 1.5 cells."""
    if sigma_t is None:
        sigma_t = 1.5 * min(maze.spacing)
    g = _gaussian(maze, maze.goal, sigma_t)
    norm = np.sqrt(np.sum(g**2))
    if not norm > 0:
        raise ValueError("target vanishes everywhere")
    return g / norm


def make_problem(maze: GridMaze, params: Optional[PhysicalParams] = None, t0: float = 0.0, tf: float = 0.6,
                 sigma0: Optional[float] = None, sigma_target: Optional[float] = None,
                 final_cost: Optional[np.ndarray] = None) -> ControlProblem:
    params = PhysicalParams() if params is None else params
    return ControlProblem(maze, params, t0, tf, default_initial_density(maze, sigma0),
                          default_target(maze, sigma_target), final_cost)


# Two interior barriers force an S-shaped route from the top-left to the
# bottom-right corner.
def reference_maze_text(n: int = 51) -> str:
    wall = np.zeros((n, n), dtype=bool)
    wall[[0, -1], :] = True
    wall[:, [0, -1]] = True
    a, b = n // 3, (2 * n) // 3
    length = (3 * n) // 5
    wall[:length, a] = True
    wall[n - length:, b] = True
    grid = np.where(wall, WALL, FREE).astype("<U1")
    grid[1, 1] = START
    grid[n - 2, n - 2] = GOAL
    return "\n".join("".join(row) for row in grid)
