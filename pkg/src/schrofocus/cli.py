"""Command-line entry point: ``schrofocus {solve,rollout,invert1d,export}``.

Runs are configured by a TOML file with ``[problem]``, ``[physics]``,
``[solver]``, ``[rollout]`` and ``[output]`` tables.  Exit status is 0 on
success, 1 for invalid input and 2 for numerical failures.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import artifacts as io
from .control import build_control_solution, hjb_residual, recover_state_cost, schrodinger_state_cost
from .focusing import FocusingConfig, optimize, quadratic_init
from .marchenko import (born_reflection, kernel_from_reflection, MarchenkoKernel, potential_from_kernel,
                        reflection_coefficient, solve_marchenko, sum_grid)
from .model import ControlProblem, GridMaze, PhysicalParams, make_problem, parse_maze, render_maze
from .rollout import estimate_expected_cost, focusing_report, simulate

log = logging.getLogger("schrofocus")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

PROBLEM_DEFAULTS = {"maze": None, "maze_text": None, "extent": [-1.0, 1.0, -1.0, 1.0], "t0": 0.0, "tf": 0.6,
                    "sigma0": None, "sigma_target": None}
PHYSICS_DEFAULTS = {"hbar": 1.0, "lambda": 1.0, "mass": 0.5}
SOLVER_DEFAULTS = {"k": 15, "learning_rate": 0.02, "max_iters": 5000, "window": 20, "rel_tol": 1e-4,
                   "init_scale": 1.0, "checkpoint_every": 0, "degeneracy_gap": 1e-8,
                   "gradient_method": "auto", "normalization": "vector", "step": "partial", "grad_tol": 1e-10,
                   "n_snap": 9}
ROLLOUT_DEFAULTS = {"n_paths": 10000, "dt": None, "seed": 0, "radius": 0.15, "termination_penalty": None,
                    "baseline": True}
OUTPUT_DEFAULTS = {"directory": "run"}


class ConfigError(ValueError):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _merge(name: str, given: Dict, defaults: Dict) -> Dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(sorted(unknown))}")
    return {**defaults, **given}


def _float(block, key, positive=False, nonneg=False):
    v = block[key]
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number")
    v = float(v)
    if not np.isfinite(v) or (positive and not v > 0) or (nonneg and v < 0):
        raise ConfigError(f"{key}={v} out of range")
    return v


def _int(block, key, minimum):
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}")
    return v


@dataclass(frozen=True)
class RunConfig:
    problem: Dict
    physics: Dict
    solver: Dict
    rollout: Dict
    output: Path
    maze_text: str

    @property
    def hash(self) -> str:
        return config_hash(self)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base=path.parent)


def config_from_dict(raw: Dict, base: Path = Path(".")) -> RunConfig:
    unknown = set(raw) - {"problem", "physics", "solver", "rollout", "output"}
    if unknown:
        raise ConfigError(f"unknown tables: {', '.join(sorted(unknown))}")
    prob = _merge("problem", raw.get("problem", {}), PROBLEM_DEFAULTS)
    phys = _merge("physics", raw.get("physics", {}), PHYSICS_DEFAULTS)
    solv = _merge("solver", raw.get("solver", {}), SOLVER_DEFAULTS)
    roll = _merge("rollout", raw.get("rollout", {}), ROLLOUT_DEFAULTS)
    out = _merge("output", raw.get("output", {}), OUTPUT_DEFAULTS)

    if (prob["maze"] is None) == (prob["maze_text"] is None):
        raise ConfigError("[problem] needs exactly one of 'maze' (file path) or 'maze_text'")
    if prob["maze"] is not None:
        maze_path = Path(prob["maze"])
        maze_path = maze_path if maze_path.is_absolute() else base / maze_path
        if not maze_path.is_file():
            raise ConfigError(f"maze file {maze_path} not found")
        maze_text = maze_path.read_text()
    else:
        maze_text = str(prob["maze_text"])
    maze_text = maze_text.strip("\n")
    extent = prob["extent"]
    if not isinstance(extent, list) or len(extent) != 4:
        raise ConfigError("extent must be a list [x1_min, x1_max, x2_min, x2_max]")
    extent = [float(e) for e in extent]
    if not (extent[0] < extent[1] and extent[2] < extent[3]):
        raise ConfigError("extent must be increasing on both axes")
    problem = {"maze_text": maze_text, "extent": extent, "t0": _float(prob, "t0"), "tf": _float(prob, "tf"),
               "sigma0": _float(prob, "sigma0", positive=True),
               "sigma_target": _float(prob, "sigma_target", positive=True)}
    if not problem["t0"] < problem["tf"]:
        raise ConfigError("t0 must precede tf")
    physics = {key: _float(phys, key, positive=True) for key in PHYSICS_DEFAULTS}
    solver = {"k": _int(solv, "k", 1), "learning_rate": _float(solv, "learning_rate", positive=True),
              "max_iters": _int(solv, "max_iters", 1), "window": _int(solv, "window", 1),
              "rel_tol": _float(solv, "rel_tol", nonneg=True), "init_scale": _float(solv, "init_scale", positive=True),
              "checkpoint_every": _int(solv, "checkpoint_every", 0),
              "degeneracy_gap": _float(solv, "degeneracy_gap", positive=True),
              "gradient_method": str(solv["gradient_method"]), "normalization": str(solv["normalization"]),
              "step": str(solv["step"]), "grad_tol": _float(solv, "grad_tol", nonneg=True),
              "n_snap": _int(solv, "n_snap", 3)}
    if solver["gradient_method"] not in ("auto", "full", "sternheimer"):
        raise ConfigError(f"unknown gradient_method {solver['gradient_method']!r}")
    if solver["normalization"] not in ("vector", "area"):
        raise ConfigError(f"unknown normalization {solver['normalization']!r}")
    if solver["step"] not in ("partial", "functional"):
        raise ConfigError(f"unknown step {solver['step']!r}")
    rollout = {"n_paths": _int(roll, "n_paths", 0), "dt": _float(roll, "dt", positive=True),
               "seed": _int(roll, "seed", 0), "radius": _float(roll, "radius", positive=True),
               "termination_penalty": _float(roll, "termination_penalty"), "baseline": bool(roll["baseline"])}
    directory = Path(out["directory"])
    directory = directory if directory.is_absolute() else base / directory
    return RunConfig(problem, physics, solver, rollout, directory, maze_text)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over every field that can change the numeric solve artifacts."""
    payload = {"problem": cfg.problem, "physics": cfg.physics, "solver": cfg.solver}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def build_maze(cfg: RunConfig) -> GridMaze:
    return parse_maze(cfg.maze_text, tuple(cfg.problem["extent"]))


def build_problem(cfg: RunConfig, maze: GridMaze) -> ControlProblem:
    p = cfg.problem
    params = PhysicalParams(hbar=cfg.physics["hbar"], lam=cfg.physics["lambda"], mass=cfg.physics["mass"])
    return make_problem(maze, params, p["t0"], p["tf"], p["sigma0"], p["sigma_target"])


def focusing_config(cfg: RunConfig) -> FocusingConfig:
    s = cfg.solver
    return FocusingConfig(learning_rate=s["learning_rate"], max_iters=s["max_iters"], window=s["window"],
                          rel_tol=s["rel_tol"], k=s["k"], degeneracy_gap=s["degeneracy_gap"],
                          gradient_method=s["gradient_method"], checkpoint_every=s["checkpoint_every"],
                          normalization=s["normalization"], step=s["step"], grad_tol=s["grad_tol"])


def _versions() -> Dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "package": pkg}


class _Manifest:
    """Run manifest kept on disk and rewritten after every stage."""

    def __init__(self, path: Path, base: Dict):
        self.path = path
        self.data = {**base, "status": "running", "stages": [], "timings": {}}
        self.flush()

    def flush(self):
        io.write_json(self.path, self.data)

    def stage(self, name, fn, *args, **kwargs):
        t = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            self.data["timings"][name] = time.perf_counter() - t
            self.data.update(status="FAILED", failed_stage=name, error=f"{type(exc).__name__}: {exc}")
            self.flush()
            raise StageError(name, exc) from exc
        self.data["timings"][name] = time.perf_counter() - t
        self.data["stages"].append(name)
        self.flush()
        return result


def cmd_solve(cfg: RunConfig) -> Dict:
    """Optimise the potential and write every solve artifact into ``cfg.output``."""
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    man = _Manifest(out / "manifest.json", {"command": "solve", "config_hash": cfg.hash,
                                            "versions": _versions(), "seed": cfg.rollout["seed"]})
    io.write_json(out / "config.json", {"problem": cfg.problem, "physics": cfg.physics, "solver": cfg.solver,
                                        "rollout": cfg.rollout})
    maze = man.stage("parse_maze", build_maze, cfg)
    (out / "maze.txt").write_text(render_maze(maze) + "\n")
    problem = man.stage("build_problem", build_problem, cfg, maze)
    V0 = quadratic_init(maze, cfg.solver["init_scale"])
    io.write_grid_csv(out / "potential_init.csv", V0, maze)
    fcfg = focusing_config(cfg)
    ckpt = out / "checkpoints" if fcfg.checkpoint_every else None
    V, curve = man.stage("optimize", optimize, V0, problem, fcfg, ckpt, cfg.hash)
    io.write_grid_csv(out / "potential.csv", V, maze)
    curve.to_csv(out / "learning_curve.csv")
    sol = man.stage("control", build_control_solution, problem, V, fcfg.k, cfg.solver["n_snap"])
    q_tilde, q = man.stage("recover_cost", recover_state_cost, sol)
    man.stage("write_fields", io.write_snapshot_fields, out / "fields", sol, q_tilde, q)

    def diagnostics():
        res = hjb_residual(sol, schrodinger_state_cost(sol))
        res_rec = hjb_residual(sol, q_tilde)
        X1, X2 = maze.coordinates()
        g = maze.cell_position(maze.goal)
        near = (X1 - g[0]) ** 2 + (X2 - g[1]) ** 2 <= cfg.rollout["radius"] ** 2
        mass = sol.mu.sum(axis=(1, 2))
        d = {"metric_initial": curve.metric[0], "metric_best": min(curve.metric),
             "metric_ratio": min(curve.metric) / curve.metric[0] if curve.metric[0] else 0.0,
             "iterations": len(curve), "captured_norm": sol.captured_norm,
             "mass": mass.tolist(), "wall_mass_max": float(np.abs(sol.mu[:, maze.wall]).max(initial=0.0)),
             "goal_mass_final": float(sol.mu[-1][near].sum()),
             "residual_sum_norm_consistent_cost": res["sum_norm"].tolist(),
             "residual_sum_norm_recovered_cost": res_rec["sum_norm"].tolist(),
             "continuity_standard_norm": res["continuity_standard_norm"].tolist()}
        io.write_json(out / "diagnostics.json", d)
        return d

    diag = man.stage("diagnostics", diagnostics)
    man.data.update(status="complete", iterations=len(curve), metric_initial=curve.metric[0],
                    metric_best=min(curve.metric), snapshot_times=[float(t) for t in sol.times])
    man.flush()
    log.info("solve finished: F %.4e -> %.4e in %d iterations", diag["metric_initial"], diag["metric_best"],
             diag["iterations"])
    return man.data


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    return path


def _load_solution(solution_dir: Path, maze: GridMaze):
    fields = solution_dir / "fields"
    meta = io.read_json(_require(fields / "fields.json"))
    times = np.array(meta["times"])
    action = np.stack([io.read_snapshot_field(fields, "action_x1", maze),
                       io.read_snapshot_field(fields, "action_x2", maze)], axis=1)
    q = io.read_snapshot_field(fields, "q", maze)
    mu = io.read_snapshot_field(fields, "mu", maze)
    return times, action, q, mu


def _report_summary(rep: Dict) -> Dict:
    return {k: v for k, v in rep.items() if k != "final_histogram"}


def cmd_rollout(cfg: RunConfig, solution_dir, out_path=None) -> Dict:
    """Simulate the controlled (and optionally uncontrolled) ensemble for a solved run."""
    solution_dir = Path(solution_dir)
    manifest = io.read_json(_require(solution_dir / "manifest.json"))
    if manifest.get("status") != "complete":
        raise ValueError(f"solution in {solution_dir} is not complete (status {manifest.get('status')!r})")
    if manifest.get("config_hash") != cfg.hash:
        raise ValueError(f"config hash mismatch: solution has {manifest.get('config_hash')}, "
                         f"rollout config has {cfg.hash}; refusing to simulate")
    r = cfg.rollout
    if r["n_paths"] < 1:
        raise ValueError("empty ensemble: n_paths must be at least 1")
    maze = build_maze(cfg)
    problem = build_problem(cfg, maze)
    times, action, q, mu = _load_solution(solution_dir, maze)
    dt = problem.horizon / 600 if r["dt"] is None else r["dt"]
    t = time.perf_counter()
    ens = simulate(None, problem, r["n_paths"], dt, seed=r["seed"], drift_field=action, drift_times=times)
    ref = mu[-1] / mu[-1].sum() if mu[-1].sum() > 0 else None
    rep = focusing_report(ens, maze, r["radius"], reference_density=ref)
    cost = estimate_expected_cost(ens, q, problem.final_cost, action, problem.params, maze, times=times,
                                  termination_penalty=r["termination_penalty"])
    report = {"config_hash": cfg.hash, "seed": r["seed"], "dt": dt, "n_paths": r["n_paths"],
              "controlled": _report_summary(rep),
              "expected_cost": {"mean": cost.mean, "stderr": cost.stderr, "n_used": cost.n_used,
                                "n_terminated": cost.n_terminated, "defined": cost.defined,
                                "termination_rate": cost.termination_rate},
              "timings": {"controlled": time.perf_counter() - t}}
    out_dir = solution_dir if out_path is None else Path(out_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_grid_csv(out_dir / "rollout_final_histogram.csv", rep["final_histogram"], maze)
    if r["baseline"]:
        t = time.perf_counter()
        base = simulate(None, problem, r["n_paths"], dt, seed=r["seed"])
        report["baseline"] = _report_summary(focusing_report(base, maze, r["radius"], reference_density=ref))
        report["timings"]["baseline"] = time.perf_counter() - t
    io.write_json(out_dir / "rollout_report.json", report)
    return report


def _read_columns(path, names):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input {path} not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < len(names):
        raise ValueError(f"{path}: expected columns {', '.join(names)}")
    return [data[:, i] for i in range(len(names))]


def _write_columns(path, header, cols):
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def cmd_invert1d(input_csv, mode: str, output_csv, k_max: float = 30.0, dk: float = 0.01,
                 method: str = "magnus") -> Path:
    """``mode``: ``kernel`` (tau,gamma -> x,V), ``potential`` (x,V -> k,r) or ``roundtrip`` (x,V -> x,V,V_hat)."""
    output_csv = Path(output_csv)
    if mode == "kernel":
        tau, gamma = _read_columns(input_csv, ("tau", "gamma"))
        kernel = MarchenkoKernel(tau, gamma)
        n = (tau.size + 1) // 2
        x = 0.5 * tau[0] + kernel.spacing * np.arange(n)
        om = solve_marchenko(kernel, x)
        _write_columns(output_csv, ("x", "V", "K_diag"), (x, potential_from_kernel(om), om.diagonal))
    elif mode in ("potential", "roundtrip"):
        x, V = _read_columns(input_csv, ("x", "V"))
        k = np.arange(0.5 * dk, k_max, dk)
        L, T = reflection_coefficient(V, x, k, method=method)
        if mode == "potential":
            _write_columns(output_csv, ("k", "r_real", "r_imag", "r_abs", "born_abs"),
                           (k, L.real, L.imag, np.abs(L), np.abs(born_reflection(V, x, k))))
        else:
            kernel = kernel_from_reflection(L, k, sum_grid(x))
            Vh = potential_from_kernel(solve_marchenko(kernel, x))
            _write_columns(output_csv, ("x", "V", "V_hat"), (x, V, Vh))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return output_csv


EXPORTS = ("potential", "potential_init", "density", "learning_curve", "field")


def cmd_export(solution_dir, what: str, out_dir=None, field: Optional[str] = None) -> list:
    """Re-export solve artifacts as long-format CSV with coordinates and wall flags."""
    solution_dir = Path(solution_dir)
    out_dir = solution_dir / "export" if out_dir is None else Path(out_dir)
    if what not in EXPORTS:
        raise ValueError(f"unknown export {what!r}; choose from {', '.join(EXPORTS)}")
    maze = parse_maze(_require(solution_dir / "maze.txt").read_text().strip("\n"),
                      tuple(io.read_json(_require(solution_dir / "config.json"))["problem"]["extent"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if what in ("potential", "potential_init"):
        V = io.read_grid_csv(_require(solution_dir / f"{what}.csv"), maze)
        written.append(io.write_long_csv(out_dir / f"{what}.csv", V, maze, "V"))
    elif what == "learning_curve":
        src = _require(solution_dir / "learning_curve.csv")
        dst = out_dir / "learning_curve.csv"
        dst.write_text(src.read_text())
        written.append(dst)
    else:
        name = "mu" if what == "density" else field
        fields_dir = solution_dir / "fields"
        meta = io.read_json(_require(fields_dir / "fields.json"))
        if name not in meta["fields"]:
            raise ValueError(f"unknown field {name!r}; available: {', '.join(meta['fields'])}")
        stack = io.read_snapshot_field(fields_dir, name, maze)
        for i, t in enumerate(meta["times"]):
            written.append(io.write_long_csv(out_dir / io.snapshot_name(name, i), stack[i], maze, name))
        index = out_dir / f"{name}_times.csv"
        index.write_text("index,time,file\n" + "".join(
            f"{i},{t!r},{io.snapshot_name(name, i)}\n" for i, t in enumerate(meta["times"])))
        written.append(index)
    return written


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, (ArithmeticError, np.linalg.LinAlgError, RuntimeError)):
        return EXIT_NUMERICAL
    return EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="schrofocus", description="Potential-learning optimal control on grid mazes")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="optimise the potential and extract the control")
    p.add_argument("config")
    p.add_argument("--output", help="override [output] directory")
    p = sub.add_parser("rollout", help="simulate the controlled diffusion for a solved run")
    p.add_argument("config")
    p.add_argument("solution_dir")
    p.add_argument("--output", help="directory for the report (default: solution_dir)")
    p.add_argument("--n-paths", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("invert1d", help="1D Marchenko inversion tools")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", choices=("kernel", "potential", "roundtrip"), default="kernel")
    p.add_argument("--k-max", type=float, default=30.0)
    p.add_argument("--dk", type=float, default=0.01)
    p.add_argument("--method", choices=("magnus", "constant"), default="magnus")
    p = sub.add_parser("export", help="re-export solve artifacts for plotting")
    p.add_argument("solution_dir")
    p.add_argument("what", help=f"one of {', '.join(EXPORTS)}")
    p.add_argument("--field", help="field name when what=field")
    p.add_argument("--output")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            try:
                cfg = load_config(args.config)
            except Exception as exc:
                raise StageError("load_config", exc) from exc
            if args.output:
                cfg = RunConfig(cfg.problem, cfg.physics, cfg.solver, cfg.rollout, Path(args.output), cfg.maze_text)
            data = cmd_solve(cfg)
            print(json.dumps({"status": data["status"], "output": str(cfg.output),
                              "metric_initial": data["metric_initial"], "metric_best": data["metric_best"]}))
        elif args.command == "rollout":
            cfg = load_config(args.config)
            roll = dict(cfg.rollout)
            if args.n_paths is not None:
                roll["n_paths"] = args.n_paths
            if args.seed is not None:
                roll["seed"] = args.seed
            cfg = RunConfig(cfg.problem, cfg.physics, cfg.solver, roll, cfg.output, cfg.maze_text)
            rep = cmd_rollout(cfg, args.solution_dir, args.output)
            print(json.dumps({"controlled": rep["controlled"], "baseline": rep.get("baseline")}))
        elif args.command == "invert1d":
            print(cmd_invert1d(args.input, args.mode, args.output, args.k_max, args.dk, args.method))
        elif args.command == "export":
            for path in cmd_export(args.solution_dir, args.what, args.output, args.field):
                print(path)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
