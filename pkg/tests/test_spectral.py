import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from schrofocus import spectral
from schrofocus.hamiltonian import HamiltonianMatrix, build_hamiltonian
from schrofocus.model import GridMaze, PhysicalParams, empty_box, reference_maze_text, parse_maze
from schrofocus.spectral import (EigensolverError, _canonical_basis, eigensolve, evolve, expected_energy, project)

from conftest import mazes, random_maze, smooth_field


def _check_solution(H, sol):
    A = H.matrix
    res = np.linalg.norm(A @ sol.vectors - sol.vectors * sol.energies, axis=0)
    assert np.all(res <= 1e-8 * np.maximum(1, np.abs(sol.energies)))
    assert np.abs(sol.vectors.T @ sol.vectors - np.eye(sol.k)).max() <= 1e-10
    assert np.all(np.diff(sol.energies) >= 0)


def test_diagonal_matrix():
    m = GridMaze(np.zeros((1, 3), bool), (0, 0), (0, 2))
    H = HamiltonianMatrix(sp.csr_matrix(np.diag([3.0, 1.0, 2.0])), m, PhysicalParams(), np.zeros(m.shape))
    sol = eigensolve(H, 3)
    np.testing.assert_allclose(sol.energies, [1, 2, 3])
    np.testing.assert_allclose(sol.vectors, np.eye(3)[:, [1, 2, 0]], atol=1e-15)


def box_levels(n_inner, h, count):
    """Discrete and continuum levels of the Dirichlet box, hbar nu / 2 = 1."""
    p = np.arange(1, n_inner + 1)
    disc = (2 - 2 * np.cos(p * np.pi / (n_inner + 1))) / h**2
    L = (n_inner + 1) * h
    cont = (np.pi * p / L) ** 2
    d = np.sort(np.add.outer(disc, disc).ravel())[:count]
    c = np.sort(np.add.outer(cont, cont).ravel())[:count]
    return d, c


def test_empty_box_levels():
    m = empty_box(21, 21)
    sol = eigensolve(build_hamiltonian(np.zeros(m.shape), m, PhysicalParams()), 10)
    d, c = box_levels(19, 0.1, 10)
    np.testing.assert_allclose(sol.energies, d, rtol=1e-10)
    # leading stencil error is (p pi h / L)^2 / 12 per axis
    assert np.all(np.abs(sol.energies - c) / c < 0.05)


def test_reference_configuration_modes():
    m = parse_maze(reference_maze_text())
    X1, X2 = m.coordinates()
    H = build_hamiltonian(m.mask((X1 + 0.96) ** 2 + (X2 - 0.96) ** 2), m, PhysicalParams())
    sol = eigensolve(H, 15)
    assert sol.k == 15 and not sol.full
    _check_solution(H, sol)


def test_dense_and_sparse_agree(rng):
    m = random_maze(rng, n=15, density=0.2)
    H = build_hamiltonian(smooth_field(m, rng), m, PhysicalParams())
    a = eigensolve(H, 6, method="dense")
    b = eigensolve(H, 6, method="sparse")
    _check_solution(H, b)
    np.testing.assert_allclose(a.energies, b.energies, rtol=1e-10)
    np.testing.assert_allclose(a.vectors, b.vectors, atol=1e-7)


def test_sign_convention(rng):
    m = random_maze(rng)
    sol = eigensolve(build_hamiltonian(smooth_field(m, rng), m, PhysicalParams()))
    for n in range(sol.k):
        v = sol.vectors[:, n]
        first = np.flatnonzero(np.abs(v) > 1e-8 * np.abs(v).max())[0]
        assert v[first] > 0
    assert sol.full


def test_degenerate_basis_depends_only_on_subspace(rng):
    q, _ = np.linalg.qr(rng.normal(size=(20, 3)))
    rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = _canonical_basis(q)
    b = _canonical_basis(q @ rot)
    np.testing.assert_allclose(np.abs(a.T @ b), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(a, b * np.sign(np.sum(a * b, axis=0)), atol=1e-12)


def test_degenerate_box_deterministic():
    m = empty_box(9, 9)
    H = build_hamiltonian(np.zeros(m.shape), m, PhysicalParams())
    a = eigensolve(H, "all")
    b = eigensolve(H, "all")
    assert np.array_equal(a.vectors, b.vectors)
    _check_solution(H, a)


def test_invalid_k():
    m = empty_box(5, 5)
    H = build_hamiltonian(np.zeros(m.shape), m, PhysicalParams())
    with pytest.raises(ValueError):
        eigensolve(H, 0)
    with pytest.raises(ValueError):
        eigensolve(H, m.n_free + 1)


def test_residual_failure_reported(monkeypatch):
    m = empty_box(6, 6)
    H = build_hamiltonian(np.zeros(m.shape), m, PhysicalParams())

    def bad_eigh(A, subset_by_index=None):
        w, v = np.linalg.eigh(A)
        return w + 1e-3, v

    monkeypatch.setattr(spectral.sla, "eigh", bad_eigh)
    with pytest.raises(EigensolverError) as err:
        eigensolve(H)
    assert err.value.residuals is not None and err.value.residuals.max() > 1e-8


def _box_solution(k="all"):
    m = random_maze(np.random.default_rng(3))
    H = build_hamiltonian(smooth_field(m, np.random.default_rng(4)), m, PhysicalParams())
    return m, H, eigensolve(H, k)


def test_project_eigenvector():
    m, H, sol = _box_solution()
    c, cap = project(sol.mode(2), sol)
    np.testing.assert_allclose(c, np.eye(sol.k)[2], atol=1e-12)
    assert cap == pytest.approx(1.0)


def test_project_orthogonal_state():
    m, H, sol = _box_solution()
    part = sol.truncate(4)
    c, cap = project(sol.mode(6), part)
    np.testing.assert_allclose(c, 0, atol=1e-12)
    assert cap < 1e-24


def test_project_reconstructs_random_state(rng):
    m, H, sol = _box_solution()
    psi0 = m.mask(rng.normal(size=m.shape))
    c, cap = project(psi0, sol)
    np.testing.assert_allclose(m.to_grid(sol.vectors @ c), psi0, atol=1e-10)
    assert cap == pytest.approx(np.sum(psi0**2), rel=1e-12)


def test_project_shape_mismatch():
    m, H, sol = _box_solution()
    with pytest.raises(ValueError):
        project(np.zeros((2, 2)), sol)


def test_evolve_identity_at_t0(rng):
    m, H, sol = _box_solution(6)
    psi0 = m.mask(rng.normal(size=m.shape))
    c, _ = project(psi0, sol)
    np.testing.assert_allclose(evolve(c, sol, 0.3, 1.0, t0=0.3), m.to_grid(sol.vectors @ c), atol=1e-14)
    with pytest.raises(ValueError):
        evolve(c, sol, 0.2, 1.0, t0=0.3)


def test_stationary_state():
    m, H, sol = _box_solution(6)
    c = np.eye(sol.k)[0]
    for t in (0.1, 0.7, 3.0):
        psi = evolve(c, sol, t, hbar=0.5)
        np.testing.assert_allclose(np.abs(psi), np.abs(sol.mode(0)), atol=1e-14)
        j = m.index_of(m.start)
        phase = np.angle(psi[m.start] / sol.vectors[j, 0])
        assert np.angle(np.exp(1j * (phase + sol.energies[0] * t / 0.5))) == pytest.approx(0.0, abs=1e-10)


def test_two_mode_beat_period():
    m, H, sol = _box_solution(6)
    c = np.zeros(sol.k)
    c[[1, 3]] = 1 / np.sqrt(2)
    hbar = 1.3
    period = 2 * np.pi * hbar / (sol.energies[3] - sol.energies[1])
    for t in (0.05, 0.21):
        a = np.abs(evolve(c, sol, t, hbar)) ** 2
        b = np.abs(evolve(c, sol, t + period, hbar)) ** 2
        np.testing.assert_allclose(a, b, atol=1e-12)
    mid = np.abs(evolve(c, sol, 0.05 + period / 2, hbar)) ** 2
    assert np.abs(mid - np.abs(evolve(c, sol, 0.05, hbar)) ** 2).max() > 1e-3


def test_evolve_matches_matrix_exponential(rng):
    m, H, sol = _box_solution()
    psi0 = m.mask(rng.normal(size=m.shape))
    c, _ = project(psi0, sol)
    t, hbar = 0.37, 0.8
    ref = expm(-1j * H.dense() * t / hbar) @ m.to_vector(psi0)
    np.testing.assert_allclose(m.to_vector(evolve(c, sol, t, hbar)), ref, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(mazes(min_n=3, max_n=7), st.integers(0, 2**31 - 1), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_unitarity_energy_and_composition(m, seed, t1, dt):
    rng = np.random.default_rng(seed)
    H = build_hamiltonian(m.mask(rng.normal(size=m.shape)), m, PhysicalParams())
    sol = eigensolve(H)
    k = max(1, sol.k // 2)
    part = sol.truncate(k)
    psi0 = m.mask(rng.normal(size=m.shape))
    c, cap = project(psi0, part)
    p0 = evolve(c, part, 0.0, 1.0)
    p1 = evolve(c, part, t1, 1.0)
    assert abs(np.linalg.norm(p1) - np.sqrt(cap)) <= 1e-12 * max(1.0, np.sqrt(cap))
    e0, e1 = expected_energy(p0, H), expected_energy(p1, H)
    assert abs(e1 - e0) <= 1e-10 * max(1.0, abs(e0))
    # re-project on the full spectrum and continue
    c_full, _ = project(psi0, sol)
    mid = evolve(c_full, sol, t1, 1.0)
    c_mid = sol.vectors.T @ m.to_vector(mid)
    np.testing.assert_allclose(evolve(c_mid, sol, t1 + dt, 1.0, t0=t1), evolve(c_full, sol, t1 + dt, 1.0),
                               atol=1e-10 * max(1.0, np.linalg.norm(psi0)))
