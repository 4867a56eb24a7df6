import numpy as np
import pytest
from hypothesis import strategies as st
from scipy import ndimage

from schrofocus.model import GridMaze


def random_maze(rng, n=9, density=0.25, extent=(-1.0, 1.0, -1.0, 1.0)):
    """Random walls inside an outer ring; start and goal in the largest free component."""
    while True:
        wall = rng.random((n, n)) < density
        wall[[0, -1], :] = True
        wall[:, [0, -1]] = True
        labels, count = ndimage.label(~wall)
        if count == 0:
            continue
        sizes = ndimage.sum(np.ones_like(labels), labels, index=np.arange(1, count + 1))
        comp = np.argwhere(labels == 1 + int(np.argmax(sizes)))
        if len(comp) < 6:
            continue
        i, j = rng.choice(len(comp), size=2, replace=False)
        return GridMaze(wall, tuple(comp[i]), tuple(comp[j]), extent)


@st.composite
def mazes(draw, min_n=3, max_n=9):
    seed = draw(st.integers(0, 2**31 - 1))
    n = draw(st.integers(min_n, max_n))
    density = draw(st.floats(0.0, 0.4))
    rng = np.random.default_rng(seed)
    while True:
        wall = rng.random((n, n)) < density
        labels, count = ndimage.label(~wall)
        if count == 0:
            continue
        sizes = ndimage.sum(np.ones_like(labels), labels, index=np.arange(1, count + 1))
        comp = np.argwhere(labels == 1 + int(np.argmax(sizes)))
        if len(comp) < 2:
            continue
        i, j = rng.choice(len(comp), size=2, replace=False)
        return GridMaze(wall, tuple(comp[i]), tuple(comp[j]))


def smooth_field(maze, rng, amplitude=2.0, modes=3):
    X1, X2 = maze.coordinates()
    V = np.zeros(maze.shape)
    for _ in range(modes):
        a, b, c, d = rng.normal(size=4)
        V += a * np.cos(np.pi * (b * X1 + c * X2) + d)
    return maze.mask(amplitude * V / modes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
