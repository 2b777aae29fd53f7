import numpy as np
import pytest

from trussopt.design import MaterialLibrary
from trussopt.lattice import LatticeSpec, build_grid


@pytest.fixture(scope="session")
def lib():
    return MaterialLibrary.default()


@pytest.fixture
def grid3():
    return build_grid(3, 3, spacing=0.1)


@pytest.fixture
def grid4():
    return build_grid(4, 4, spacing=0.1)


@pytest.fixture
def grid6():
    return build_grid(6, 6, spacing=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_node_lattice(l0: float = 0.1) -> LatticeSpec:
    """Minimal hand-built spec: a single edge between two nodes."""
    nodes = np.array([[0.0, 0.0], [l0, 0.0]])
    edges = np.array([[0, 1]], dtype=np.int64)
    return LatticeSpec(
        rows=1,
        cols=2,
        spacing=l0,
        origin=(0.0, 0.0),
        nodes=nodes,
        edges=edges,
        rest_lengths=np.array([l0]),
        head_index=0,
    )


def random_relaxed_design(n_edges: int, rng, spread: float = 0.2) -> np.ndarray:
    """A generic intermediate design away from one-hot corners."""
    return np.clip(1.0 / 3.0 + spread * rng.standard_normal((n_edges, 3)), 0.0, 1.0)


def random_ratios(n_edges: int, rng, conc: float = 2.0) -> np.ndarray:
    """Random normalized state-ratio rows (strictly positive)."""
    return rng.dirichlet(np.full(3, conc), size=n_edges)
