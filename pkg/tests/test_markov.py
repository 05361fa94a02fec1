"""
Tests for measures.markov: sub-domains, restriction, the uniformizing map
and the whole-disk sanity case of the restriction test
"""
import numpy as np
import pytest

from core.exceptions import ParameterDomainError
from core.grid import DiskDomain
from measures.markov import (
    SubDomain,
    component_at,
    markov_restriction_test,
    restricted_domain,
    uniformizing_map,
)
from sampling.loopsoup import carpet_from_clusters, cluster_loops


def test_subdomain_masks(disk_grid):
    upper = SubDomain.upper_half_disk().mask(disk_grid)
    z = disk_grid.centers()
    assert upper.any()
    assert np.all(z[upper].imag > 0)
    whole = SubDomain.named("whole-disk").mask(disk_grid)
    assert np.array_equal(whole, DiskDomain().mask(disk_grid))
    with pytest.raises(ParameterDomainError):
        SubDomain.named("annulus")


def test_crossing_loops_are_removed(three_squares, disk_grid):
    cle = carpet_from_clusters(three_squares, cluster_loops(three_squares, 64), disk_grid)
    z = disk_grid.centers()
    U = cle.domain_mask & (z.real < -0.3)
    restricted = restricted_domain(cle, U)
    assert not np.any(restricted & (cle.labels >= 0))
    assert restricted[disk_grid.index_of(-0.8 + 0j)]
    left_half = cle.domain_mask & (z.real < 0)
    assert np.array_equal(restricted_domain(cle, left_half), left_half)


def test_component_at_a_swallowed_point(disk_grid):
    mask = DiskDomain().mask(disk_grid) & (np.abs(disk_grid.centers()) > 0.2)
    assert not component_at(mask, disk_grid, 0j).any()
    assert component_at(mask, disk_grid, 0.5 + 0j).sum() == mask.sum()


def test_whole_disk_map_is_exact(disk_grid):
    V = DiskDomain().mask(disk_grid)
    phi = uniformizing_map(V, disk_grid, 0j)
    assert phi.exact
    assert np.allclose(phi.abs_derivative[V], 1.0)


def test_discrete_map_is_close_to_identity(disk_grid):
    V = DiskDomain().mask(disk_grid).copy()
    V[disk_grid.index_of(-0.95 + 0j)] = False
    phi = uniformizing_map(V, disk_grid, 0j)
    assert not phi.exact
    r, c = disk_grid.index_of(0.4 + 0.1j)
    assert phi.abs_derivative[r, c] == pytest.approx(1.0, rel=0.15)
    assert phi.abs_phi[r, c] == pytest.approx(abs(disk_grid.centers()[r, c]), rel=0.15)
    with pytest.raises(ParameterDomainError):
        uniformizing_map(np.zeros_like(V), disk_grid, 0j)


def test_whole_disk_with_shared_seed_matches_reference():
    report = markov_restriction_test(3.0, SubDomain.whole_disk(), 3, seed=6, reference_seed=6,
                                     grid_n=64, n_fields=1)
    assert report.pushed_totals == pytest.approx(report.reference_totals, rel=1e-9)
    assert report.ks == 0.0
    assert report.skipped == 0


def test_restriction_test_guards():
    with pytest.raises(ParameterDomainError):
        markov_restriction_test(5.0, SubDomain.whole_disk(), 3, seed=0)
    with pytest.raises(ParameterDomainError):
        markov_restriction_test(3.0, SubDomain.whole_disk(), 1, seed=0)
