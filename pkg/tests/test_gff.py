"""
Tests for sampling.gff: exact lattice GFF, Green oracle, circle averages,
Markov decomposition and the wedge radial process
"""
import math

import numpy as np
import pytest

from core.exceptions import GridCapacityError, ParameterDomainError
from core.grid import DiskDomain, HalfPlaneWindow
from sampling.gff import (
    circle_average,
    circle_average_variance,
    circle_averages,
    dirichlet_incidence,
    discrete_green,
    lattice_operator,
    markov_decompose,
    sample_gff_batch,
    sample_wedge_radial,
    sample_zero_boundary_gff,
)


def test_incidence_squares_to_dirichlet_laplacian():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    incidence, index = dirichlet_incidence(mask)
    M = (incidence.T @ incidence).toarray()
    assert np.allclose(np.diag(M), 4.0)
    center, right = index[2, 2], index[2, 3]
    corner = index[1, 1]
    assert M[center, right] == -1.0
    assert M[center, corner] == 0.0
    assert np.allclose(M, M.T)


def test_operator_guards():
    with pytest.raises(ParameterDomainError):
        lattice_operator(4)
    with pytest.raises(GridCapacityError):
        lattice_operator(100_000)


def test_sample_is_deterministic_and_zero_outside():
    a = sample_zero_boundary_gff(32, seed=3)
    b = sample_zero_boundary_gff(32, seed=3)
    assert np.array_equal(a.values, b.values)
    mask = DiskDomain().mask(a.grid)
    assert np.all(a.values[~mask] == 0.0)
    assert np.any(a.values[mask] != 0.0)


def test_empirical_covariance_matches_green_oracle():
    op = lattice_operator(24)
    points = np.array([0j, 0.3 + 0.2j])
    green = discrete_green(op, points)
    fields = sample_gff_batch(24, 4000, seed=5)
    rows, cols = op.grid.index_of(points)
    samples = np.array([[f.values[r, c] for r, c in zip(rows, cols)] for f in fields])
    empirical = np.cov(samples.T)
    assert np.allclose(empirical, green, rtol=0.1, atol=0.05 * green[0, 0])
    assert np.allclose(green, green.T)


def test_green_grows_logarithmically_with_resolution():
    coarse = discrete_green(lattice_operator(16), [0j])[0, 0]
    fine = discrete_green(lattice_operator(64), [0j])[0, 0]
    assert fine - coarse == pytest.approx(math.log(4.0), rel=0.1)


def test_circle_average_variance_oracle():
    op = lattice_operator(32)
    eps = 4.0 * op.grid.h
    exact = circle_average_variance(op, 0.1 + 0.1j, eps)
    fields = sample_gff_batch(32, 3000, seed=8)
    values = np.array([circle_average(f, 0.1 + 0.1j, eps) for f in fields])
    assert values.var(ddof=1) == pytest.approx(exact, rel=0.1)


def test_circle_average_guards_and_shift():
    field = sample_zero_boundary_gff(32, seed=1)
    h = field.grid.h
    with pytest.raises(ParameterDomainError):
        circle_average(field, 0j, h)
    with pytest.raises(ParameterDomainError):
        circle_average(field, 0.95 + 0j, 4.0 * h)
    base = circle_average(field, 0j, 4.0 * h)
    assert circle_average(field.shifted(1.5), 0j, 4.0 * h) == pytest.approx(base + 1.5, abs=1e-12)
    vector = circle_averages(field, [0j, 0.2j], 4.0 * h)
    assert vector[0] == pytest.approx(base, abs=1e-12)


def test_markov_decomposition():
    field = sample_zero_boundary_gff(48, seed=2)
    z = field.grid.centers()
    U = np.abs(z - 0.2) < 0.4
    parts = markov_decompose(field, U)
    assert parts.residual < 1e-8
    assert np.allclose(parts.zero_boundary + parts.harmonic, field.values)
    assert np.all(parts.zero_boundary[~U] == 0.0)
    with pytest.raises(ParameterDomainError):
        markov_decompose(field, np.ones_like(U))


def test_half_plane_window_field():
    field = sample_zero_boundary_gff(32, seed=4, domain=HalfPlaneWindow())
    assert field.grid.y0 == 0.0
    mask = field.domain.mask(field.grid)
    assert np.all(field.values[~mask] == 0.0)
    assert field.domain.contains(np.array([0.5j]))[0]
    assert not field.domain.contains(np.array([-0.1j]))[0]


def test_wedge_radial_process():
    gamma = 1.9
    drift = gamma - 2.0 / gamma
    ends = []
    for seed in range(20):
        path = sample_wedge_radial(gamma, 100.0, 0.02, seed)
        assert path.min() > 0
        ends.append(path[-1] / 100.0)
    assert np.mean(ends) == pytest.approx(drift, abs=0.1)
    with pytest.raises(ParameterDomainError):
        sample_wedge_radial(1.0, 1.0, 0.01, 0)
