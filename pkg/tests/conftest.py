# ============================================================
# CarpetLab - shared pytest fixtures
# Small seeded grids, soups and fields for the unit tests
# ============================================================

import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent.parent))

from core.grid import DiskDomain  # noqa: E402
from sampling.loopsoup import BrownianLoop, LoopSoup  # noqa: E402


def pytest_configure(config):
    """Markers used across the suite"""
    config.addinivalue_line(
        "markers", "slow: acceptance-scale run (minutes)"
    )


def square_polyline(center: complex, side: float, per_edge: int = 8) -> np.ndarray:
    """Closed counter-clockwise square, first vertex repeated at the end."""
    corners = center + 0.5 * side * np.array([-1 - 1j, 1 - 1j, 1 + 1j, -1 + 1j, -1 - 1j])
    pieces = [np.linspace(a, b, per_edge, endpoint=False) for a, b in zip(corners[:-1], corners[1:])]
    return np.append(np.concatenate(pieces), corners[0])


def make_soup(polylines, c: float = 0.5, domain: DiskDomain = DiskDomain()) -> LoopSoup:
    loops = [BrownianLoop(i, complex(p[0]), 0.01, p) for i, p in enumerate(polylines)]
    return LoopSoup(loops=loops, intensity=c, t_min=1e-4, t_cap=2.0, domain=domain, seed=0, n_bridge_steps=16)


@pytest.fixture
def unit_disk():
    return DiskDomain()


@pytest.fixture
def disk_grid(unit_disk):
    return unit_disk.grid(64)


@pytest.fixture
def three_squares():
    """Two overlapping squares on the left and an isolated one on the right."""
    return make_soup([
        square_polyline(-0.4 + 0j, 0.3),
        square_polyline(-0.25 + 0.1j, 0.3),
        square_polyline(0.4 + 0j, 0.2),
    ])


@pytest.fixture
def nested_squares():
    """A square inside a larger one, disjoint boundaries."""
    return make_soup([
        square_polyline(0j, 1.0),
        square_polyline(0j, 0.3),
    ])
