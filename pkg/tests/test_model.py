import numpy as np
import pytest
from hypothesis import given, settings

from schrofocus.model import (ControlProblem, GridMaze, MazeError, PhysicalParams, default_initial_density,
                              default_target, empty_box, make_problem, reference_maze_text, parse_maze, render_maze)

from conftest import mazes


def test_parse_small_block():
    m = parse_maze("S.#\n...\n#.G")
    assert m.shape == (3, 3)
    assert m.start == (0, 0) and m.goal == (2, 2)
    np.testing.assert_array_equal(m.wall, [[0, 0, 1], [0, 0, 0], [1, 0, 0]])


def test_parse_open_block_has_no_walls():
    m = parse_maze("S....\n.....\n....G")
    assert not m.wall.any()
    assert m.n_free == 15


def test_reference_maze_spacing():
    m = parse_maze(reference_maze_text(51))
    assert m.shape == (51, 51)
    h1, h2 = m.spacing
    assert h1 == pytest.approx(0.04, abs=1e-15) and h2 == pytest.approx(0.04, abs=1e-15)
    assert m.wall[0].all() and m.wall[-1].all() and m.wall[:, 0].all() and m.wall[:, -1].all()
    # top-left start, bottom-right goal
    s, g = m.cell_position(m.start), m.cell_position(m.goal)
    assert s[0] < 0 < s[1] and g[0] > 0 > g[1]


@pytest.mark.parametrize("text, msg", [
    ("S..\n..\n..G", "rectangular"),
    ("...\n...\n..G", "'S'"),
    ("S.G\n...\n..G", "'G'"),
    ("S#.\n##.\n..G", "connected"),
    ("S.x\n...\n..G", "unknown"),
    ("", "empty"),
])
def test_parse_errors(text, msg):
    with pytest.raises(MazeError, match=msg):
        parse_maze(text)


def test_start_on_wall_rejected():
    wall = np.zeros((3, 3), bool)
    wall[0, 0] = True
    with pytest.raises(MazeError, match="wall"):
        GridMaze(wall, (0, 0), (2, 2))


@settings(max_examples=60, deadline=None)
@given(mazes())
def test_render_parse_round_trip(m):
    back = parse_maze(render_maze(m))
    np.testing.assert_array_equal(back.wall, m.wall)
    assert back.start == m.start and back.goal == m.goal


def test_coordinates_orientation():
    m = parse_maze("S..\n...\n..G", extent=(0, 2, 10, 14))
    X1, X2 = m.coordinates()
    np.testing.assert_allclose(X1[0], [0, 1, 2])
    np.testing.assert_allclose(X2[:, 0], [14, 12, 10])
    row, col, inside = m.locate(np.array([1.9, -0.1]), np.array([10.2, 12.0]))
    assert (row[0], col[0], inside[0]) == (2, 2, True)
    assert not inside[1]


def test_vector_grid_round_trip(rng):
    m = parse_maze("S.#\n...\n#.G")
    v = rng.normal(size=m.n_free)
    g = m.to_grid(v)
    assert np.all(g[m.wall] == 0)
    np.testing.assert_array_equal(m.to_vector(g), v)


def test_noise_covariance_default_values():
    p = PhysicalParams(hbar=1.0, lam=1.0, mass=0.5)
    np.testing.assert_array_equal(p.noise_cov, 2.0 * np.eye(2))


def test_noise_covariance_general():
    C = np.array([[1.0, 0.5], [0.0, 2.0]])
    m = np.diag([0.5, 4.0])
    p = PhysicalParams(lam=3.0, mass=m, control_proj=C)
    np.testing.assert_allclose(p.noise_cov, 3.0 * C @ np.linalg.inv(m) @ C.T, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kw", [dict(hbar=0.0), dict(lam=-1.0), dict(mass=np.diag([1.0, -1.0])),
                                dict(control_proj=np.array([[1.0, 0.0], [0.0, 0.0]]))])
def test_params_invalid(kw):
    with pytest.raises(ValueError):
        PhysicalParams(**kw)


def test_initial_density_default_width():
    m = empty_box(51, 51)
    mu = default_initial_density(m)
    assert mu.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.unravel_index(np.argmax(mu), m.shape) == m.start


def test_initial_density_wide_is_uniform():
    m = parse_maze("S....\n.....\n....G")
    mu = default_initial_density(m, sigma0=1e4)
    np.testing.assert_allclose(mu, 1.0 / m.n_free, rtol=1e-6)


def test_initial_density_wall_next_to_start():
    m = parse_maze("S#..\n....\n...G")
    mu = default_initial_density(m, sigma0=1.0)
    assert mu[0, 1] == 0.0
    assert mu.sum() == pytest.approx(1.0)


def test_initial_density_vanishing_width():
    m = parse_maze("S....\n.....\n....G")
    with pytest.raises(ValueError):
        default_initial_density(m, sigma0=-1.0)
    # far too narrow to be resolved still keeps the start cell
    mu = default_initial_density(m, sigma0=1e-3)
    assert mu[m.start] == pytest.approx(1.0)


def test_target_defaults():
    m = empty_box(51, 51)
    t = default_target(m)
    assert np.sum(t**2) == pytest.approx(1.0, abs=1e-14)
    assert np.unravel_index(np.argmax(t), m.shape) == m.goal


def test_target_narrow_limit_is_indicator():
    m = empty_box(11, 11)
    t = default_target(m, sigma_t=1e-3)
    expected = np.zeros(m.shape)
    expected[m.goal] = 1.0
    np.testing.assert_allclose(t, expected, atol=1e-12)


def test_target_goal_next_to_wall():
    m = parse_maze("S...\n....\n..#G")
    t = default_target(m, sigma_t=2.0)
    assert t[2, 2] == 0.0
    assert np.sum(t**2) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(mazes(min_n=3, max_n=8))
def test_constructed_fields_vanish_on_walls(m):
    mu = default_initial_density(m, 0.5)
    t = default_target(m, 0.5)
    assert np.all(mu[m.wall] == 0) and np.all(t[m.wall] == 0)
    p = make_problem(m, sigma0=0.5, sigma_target=0.5)
    assert np.all(p.initial_wavefunction()[m.wall] == 0)


def test_problem_validation():
    m = empty_box(7, 7)
    mu = default_initial_density(m)
    t = default_target(m)
    params = PhysicalParams()
    with pytest.raises(ValueError, match="precede"):
        ControlProblem(m, params, 1.0, 1.0, mu, t)
    with pytest.raises(ValueError, match="unit mass"):
        ControlProblem(m, params, 0.0, 1.0, 2 * mu, t)
    with pytest.raises(ValueError, match="L2"):
        ControlProblem(m, params, 0.0, 1.0, mu, 2 * t)
    bad = mu.copy()
    bad[0, 0] = 0.1
    with pytest.raises(ValueError, match="walls"):
        ControlProblem(m, params, 0.0, 1.0, bad, t)


def test_problem_is_immutable():
    p = make_problem(empty_box(7, 7))
    with pytest.raises(ValueError):
        p.initial_density[1, 1] = 3.0
