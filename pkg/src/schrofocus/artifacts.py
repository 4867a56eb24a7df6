"""Reading and writing grid fields and run bundles.

Grid CSVs are row-major with one maze row per line (row 0 = top) and wall
cells left empty.  Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .model import GridMaze


def _fmt(v: float) -> str:
    return repr(float(v))


def write_grid_csv(path, field: np.ndarray, maze: GridMaze) -> Path:
    path = Path(path)
    field = np.asarray(field, dtype=float)
    if field.shape != maze.shape:
        raise ValueError(f"field shape {field.shape} does not match maze {maze.shape}")
    lines = []
    for r in range(maze.ny):
        lines.append(",".join("" if maze.wall[r, c] else _fmt(field[r, c]) for c in range(maze.nx)))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_grid_csv(path, maze: Optional[GridMaze] = None) -> np.ndarray:
    """Inverse of :func:`write_grid_csv`; empty entries (walls) read as 0."""
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line != ""]
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: ragged grid")
    out = np.array([[float(v) if v.strip() else 0.0 for v in r] for r in rows])
    if maze is not None and out.shape != maze.shape:
        raise ValueError(f"{path}: grid shape {out.shape} does not match maze {maze.shape}")
    return out


def write_long_csv(path, field: np.ndarray, maze: GridMaze, name: str = "value") -> Path:
    """One line per cell with its coordinates and wall flag; walls carry an empty value."""
    path = Path(path)
    X1, X2 = maze.coordinates()
    lines = [f"row,col,x1,x2,wall,{name}"]
    for r in range(maze.ny):
        for c in range(maze.nx):
            w = bool(maze.wall[r, c])
            val = "" if w else _fmt(field[r, c])
            lines.append(f"{r},{c},{_fmt(X1[r, c])},{_fmt(X2[r, c])},{int(w)},{val}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_json(path, data: Dict) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    tmp.replace(path)
    return path


def read_json(path) -> Dict:
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def snapshot_name(field: str, index: int) -> str:
    return f"{field}_t{index:02d}.csv"


# scalar per-snapshot fields written by a solve, and how to obtain each one
SNAPSHOT_FIELDS = ("psi_real", "psi_imag", "mu", "R", "S", "grad_S_x1", "grad_S_x2", "action_x1",
                   "action_x2", "current_x1", "current_x2", "bohm", "q_tilde", "q", "reliable")


def snapshot_arrays(solution, q_tilde: np.ndarray, q: np.ndarray) -> Dict[str, np.ndarray]:
    return {
        "psi_real": solution.psi.real,
        "psi_imag": solution.psi.imag,
        "mu": solution.mu,
        "R": np.where(solution.maze.free, solution.R, 0.0),
        "S": solution.S,
        "grad_S_x1": solution.grad_S[:, 0],
        "grad_S_x2": solution.grad_S[:, 1],
        "action_x1": solution.action[:, 0],
        "action_x2": solution.action[:, 1],
        "current_x1": solution.current[:, 0],
        "current_x2": solution.current[:, 1],
        "bohm": solution.bohm,
        "q_tilde": q_tilde,
        "q": q,
        "reliable": solution.reliable.astype(float),
    }


def write_snapshot_fields(directory, solution, q_tilde, q) -> Dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    maze = solution.maze
    arrays = snapshot_arrays(solution, q_tilde, q)
    for name in SNAPSHOT_FIELDS:
        for i in range(solution.n_snap):
            write_grid_csv(directory / snapshot_name(name, i), arrays[name][i], maze)
    meta = {
        "times": [float(t) for t in solution.times],
        "fields": list(SNAPSHOT_FIELDS),
        "file_pattern": "{field}_t{index:02d}.csv",
        "units": {"time": "t", "mu": "probability per cell", "psi": "unit vector norm",
                  "action": "state units per time", "S": "lambda units", "q_tilde": "cost per time",
                  "q": "cost per time", "bohm": "cost per time"},
        "wall_mask": "empty CSV entries",
        "reliable_floor": "|psi|^2 >= 1e-12; derived fields are zero elsewhere",
    }
    write_json(directory / "fields.json", meta)
    return meta


def read_snapshot_field(directory, name: str, maze: GridMaze) -> np.ndarray:
    directory = Path(directory)
    meta = read_json(directory / "fields.json")
    if name not in meta["fields"]:
        raise KeyError(name)
    return np.array([read_grid_csv(directory / snapshot_name(name, i), maze) for i in range(len(meta["times"]))])
