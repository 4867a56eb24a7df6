import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from schrofocus.control import build_control_solution
from schrofocus.hamiltonian import build_hamiltonian
from schrofocus.model import ControlProblem, GridMaze, PhysicalParams, empty_box, make_problem
from schrofocus.rollout import (BLOCK_SIZE, empirical_density, estimate_expected_cost, focusing_report, interpolate,
                                simulate, tv_distance)
from schrofocus.spectral import eigensolve

from conftest import random_maze

P = PhysicalParams()


def open_plane(n=21, half=10.0):
    """No walls; a domain wide enough that diffusing paths never leave it."""
    return GridMaze(np.zeros((n, n), bool), (n // 2, n // 2), (0, 0), (-half, half, -half, half))


def point_density(m, cell):
    mu = np.zeros(m.shape)
    mu[cell] = 1.0
    return mu


def point_problem(m, T=0.5):
    mu = point_density(m, m.start)
    return ControlProblem(m, P, 0.0, T, mu, np.sqrt(point_density(m, m.goal)))


def stationary_problem(n=21, T=1.0, trap=0.0):
    m = empty_box(n, n)
    X1, X2 = m.coordinates()
    V = m.mask(trap * (X1**2 + X2**2))
    phi = eigensolve(build_hamiltonian(V, m, P), 1).mode(0)
    prob = ControlProblem(m, P, 0.0, T, phi**2, phi)
    return m, prob, build_control_solution(prob, V, k=1, n_snap=3), phi


def test_zero_noise_zero_drift_paths_constant():
    m = random_maze(np.random.default_rng(1))
    prob = make_problem(m, sigma0=0.4, sigma_target=0.4)
    e = simulate(None, prob, 500, prob.horizon / 50, seed=3, noise_cov=np.zeros((2, 2)), record_every=1)
    assert not e.terminated.any()
    assert np.all(e.positions == e.positions[:, :1])


def test_brownian_variance_law():
    m = open_plane()
    prob = point_problem(m)
    n = 100_000
    e = simulate(None, prob, n, prob.horizon / 50, seed=11, record_every=25)
    assert not e.terminated.any()
    h = m.spacing[0]
    nu = P.noise_cov[0, 0]
    x0 = m.cell_position(m.start)
    for i, t in enumerate(e.record_times):
        for axis in range(2):
            d = e.positions[:, i, axis] - x0[axis]
            expected = nu * t + h**2 / 12      # start uniform within the cell
            se = expected * np.sqrt(2.0 / (n - 1))
            assert abs(d.var(ddof=1) - expected) < 3 * se


def test_stationary_ensemble_matches_ground_state():
    m, prob, cs, phi = stationary_problem(T=0.5)
    e = simulate(cs, prob, 20_000, 2e-3, seed=5, record_every=5)
    hist = empirical_density(e.positions[:, 1:], m)
    assert tv_distance(hist, phi**2) < 0.05
    n = e.positions.shape[1]
    early = empirical_density(e.positions[:, 1:n // 3], m)
    late = empirical_density(e.positions[:, -(n // 3):], m)
    assert tv_distance(early, late) < 0.05


def test_halving_dt_survivor_fraction_within_stderr():
    m, prob, cs, _ = stationary_problem(T=0.5, trap=30.0)
    n = 100_000
    a = simulate(cs, prob, n, 1e-3, seed=2).survived.mean()
    b = simulate(cs, prob, n, 5e-4, seed=2).survived.mean()
    se = np.sqrt(a * (1 - a) / n)
    assert abs(a - b) < se


def test_reproducible_and_prefix_stable():
    m = random_maze(np.random.default_rng(4))
    prob = make_problem(m, sigma0=0.4, sigma_target=0.4)
    cs = build_control_solution(prob, np.zeros(m.shape), k=8, n_snap=3)
    a = simulate(cs, prob, 300, prob.horizon / 60, seed=9)
    b = simulate(cs, prob, 300, prob.horizon / 60, seed=9)
    for f in ("positions", "terminated", "termination_time", "record_times"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = simulate(cs, prob, BLOCK_SIZE + 10, prob.horizon / 60, seed=9)
    np.testing.assert_array_equal(c.positions[:300], a.positions)
    d = simulate(cs, prob, 300, prob.horizon / 60, seed=10)
    assert not np.array_equal(np.nan_to_num(d.positions), np.nan_to_num(a.positions))


def test_invalid_arguments():
    m = empty_box(5, 5)
    prob = make_problem(m, sigma0=0.3, sigma_target=0.3)
    with pytest.raises(ValueError):
        simulate(None, prob, 0, 0.01)
    with pytest.raises(ValueError):
        simulate(None, prob, 10, 0.07)


def test_all_terminated_cost_undefined():
    m = empty_box(5, 5)
    prob = make_problem(m, sigma0=0.3, sigma_target=0.3)
    e = simulate(None, prob, 200, prob.horizon / 10, seed=0, noise_cov=1e6 * np.eye(2))
    assert e.terminated.all()
    assert np.all(np.isnan(e.positions[:, 1:]))
    est = estimate_expected_cost(e, 0.0, None, None, P, m)
    assert not est.defined and np.isnan(est.mean) and est.termination_rate == 1.0
    pen = estimate_expected_cost(e, 0.0, None, None, P, m, termination_penalty=3.0)
    assert pen.mean == 3.0 and pen.n_used == 200


def test_zero_cost_exact():
    m = open_plane()
    prob = point_problem(m)
    e = simulate(None, prob, 1000, prob.horizon / 20, seed=1)
    zero = np.zeros((2, 2) + m.shape)
    est = estimate_expected_cost(e, 0.0, np.zeros(m.shape), zero, P, m, times=np.array([0.0, 0.5]))
    assert est.mean == 0.0 and est.stderr == 0.0


def test_constant_running_cost_exact():
    m = open_plane()
    prob = point_problem(m, T=0.7)
    e = simulate(None, prob, 1000, prob.horizon / 35, seed=1)
    est = estimate_expected_cost(e, 2.5, None, None, P, m)
    assert est.mean == pytest.approx(2.5 * 0.7, rel=1e-13)
    assert est.n_terminated == 0


def packet_fields(m, times, s0, nu=2.0):
    X1, X2 = m.coordinates()
    acts, dens = [], []
    for t in times:
        a = s0**2 + 1j * nu * t / 2
        L1, L2 = -X1 / (2 * a), -X2 / (2 * a)
        acts.append(np.stack([nu * (L1.real + L1.imag), nu * (L2.real + L2.imag)]))
        rho = np.exp(-(X1**2 + X2**2) * np.real(1 / (2 * a)))
        dens.append(rho / rho.sum())
    return np.array(acts), np.array(dens)


def test_free_packet_cost_against_quadrature():
    m = GridMaze(np.zeros((101, 101), bool), (50, 50), (0, 0), (-5.0, 5.0, -5.0, 5.0))
    s0, T = 0.5, 0.5
    times = np.linspace(0, T, 61)
    acts, dens = packet_fields(m, times, s0)
    prob = ControlProblem(m, P, 0.0, T, dens[0], np.sqrt(dens[0]))
    X1, _ = m.coordinates()
    q_f = X1**2
    # running cost 1/2 a^T m^-1 a = |a|^2 at m = 0.5
    running = np.array([np.sum(d * (a**2).sum(axis=0)) for a, d in zip(acts, dens)])
    quad = trapezoid(running, times) + np.sum(dens[-1] * q_f)
    stderr = []
    for n in (4000, 16000):
        e = simulate(None, prob, n, T / 600, seed=7, drift_field=acts, drift_times=times)
        est = estimate_expected_cost(e, 0.0, q_f, acts, P, m, times=times)
        assert abs(est.mean - quad) < 4 * est.stderr
        stderr.append(est.stderr)
    assert stderr[0] / stderr[1] == pytest.approx(2.0, rel=0.1)


def test_report_all_at_goal():
    m = empty_box(9, 9)
    mu = point_density(m, m.goal)
    prob = ControlProblem(m, P, 0.0, 0.5, mu, np.sqrt(mu))
    e = simulate(None, prob, 100, 0.05, seed=0, noise_cov=np.zeros((2, 2)))
    # starts are uniform within the goal cell, so one spacing covers them all
    r = focusing_report(e, m, radius=m.spacing[0], reference_density=mu)
    assert r["goal_fraction"] == 1.0 and r["survivor_fraction"] == 1.0 and r["tv_distance"] == 0.0


def test_report_counts():
    m = empty_box(9, 9)
    prob = make_problem(m, sigma0=0.3, sigma_target=0.3)
    e = simulate(None, prob, 500, 0.01, seed=3)
    r = focusing_report(e, m, radius=0.3)
    surv = e.survived
    goal = m.cell_position(m.goal)
    near = np.sum((e.final_positions[surv] - goal) ** 2, axis=1) <= 0.09
    assert r["survivor_fraction"] == surv.mean()
    assert r["goal_fraction"] == near.mean()
    assert r["goal_fraction_all"] == near.sum() / 500
    assert r["final_histogram"].sum() == pytest.approx(1.0)


def test_interpolate_linear_field_exact():
    m = empty_box(11, 11)
    X1, X2 = m.coordinates()
    f = 2 * X1 - 3 * X2 + 1
    rng = np.random.default_rng(0)
    # points whose four surrounding cells are all free
    x1, x2 = rng.uniform(-0.6, 0.6, 200), rng.uniform(-0.6, 0.6, 200)
    np.testing.assert_allclose(interpolate(f, m, x1, x2), 2 * x1 - 3 * x2 + 1, atol=1e-12)


def test_interpolate_ignores_walls():
    m = empty_box(5, 5)
    f = np.where(m.wall, 1e9, 1.0)
    # everywhere off the pure-wall corner cells some free weight remains
    x = np.linspace(-0.99, 0.99, 50)
    np.testing.assert_allclose(interpolate(f, m, x, x[::-1]), 1.0)
    assert interpolate(f, m, np.array([-1.0]), np.array([1.0]))[0] == 0.0


def test_tv_distance():
    p = np.array([1.0, 0.0, 1.0])
    assert tv_distance(p, p) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 2.0]) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
def test_ensemble_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    m = random_maze(rng, n=7)
    prob = make_problem(m, sigma0=0.5, sigma_target=0.5)
    e = simulate(None, prob, 64, prob.horizon / 30, seed=seed, noise_cov=scale * np.eye(2), record_every=1)
    x1a, x1b, x2a, x2b = m.extent
    pos = e.positions
    finite = np.isfinite(pos).all(axis=2)
    p = pos[finite]
    assert np.all((p[:, 0] >= x1a) & (p[:, 0] <= x1b) & (p[:, 1] >= x2a) & (p[:, 1] <= x2b))
    row, col, _ = m.locate(p[:, 0], p[:, 1])
    assert not m.wall[row, col].any()
    for i in np.flatnonzero(e.terminated):
        after = e.record_times >= e.termination_time[i] - 1e-12
        assert not finite[i, after].any() and finite[i, ~after].all()
    assert np.all(finite[e.survived])
