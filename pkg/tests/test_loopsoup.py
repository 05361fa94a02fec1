"""
Tests for sampling.loopsoup: soups, thinning, clusters and carpets
"""
import math

import numpy as np
import pytest

from conftest import make_soup, square_polyline
from core.exceptions import ParameterDomainError
from core.grid import DiskDomain
from sampling.loopsoup import (
    carpet_from_clusters,
    cluster_loops,
    default_t_min,
    expected_root_count,
    label_filled,
    restriction_smoke_test,
    rotate_soup,
    sample_cle,
    sample_loop_soup,
    segments_intersect,
    thin_soup,
)


def test_expected_root_count_formula():
    assert expected_root_count(4.0, 1.0, 0.01, 1.0) == pytest.approx(4.0 * 99.0 / (2.0 * math.pi))
    with pytest.raises(ParameterDomainError):
        expected_root_count(4.0, 1.0, 0.0, 1.0)
    with pytest.raises(ParameterDomainError):
        expected_root_count(4.0, 1.0, 2.0, 1.0)


def test_default_t_min_is_one_cell_squared():
    assert default_t_min(100) == pytest.approx(0.02 ** 2)


def test_soup_loops_are_closed_and_inside(unit_disk):
    soup = sample_loop_soup(unit_disk, 0.5, 1e-3, 0.5, seed=4)
    assert len(soup) > 0
    for loop in soup.loops:
        assert loop.polyline[0] == loop.polyline[-1]
        assert np.all(unit_disk.contains(loop.polyline))
    frame = soup.to_frame()
    assert list(frame.columns) == ["loop_id", "vertex", "re", "im"]
    assert soup.describe()["n_loops"] == len(soup)


def test_soup_is_deterministic(unit_disk):
    a = sample_loop_soup(unit_disk, 0.5, 1e-3, 0.5, seed=9)
    b = sample_loop_soup(unit_disk, 0.5, 1e-3, 0.5, seed=9)
    assert [l.loop_id for l in a.loops] == [l.loop_id for l in b.loops]
    assert all(np.array_equal(x.polyline, y.polyline) for x, y in zip(a.loops, b.loops))


def test_zero_intensity_soup_is_empty(unit_disk):
    assert len(sample_loop_soup(unit_disk, 0.0, 1e-3, 0.5, seed=1)) == 0
    with pytest.raises(ParameterDomainError):
        sample_loop_soup(unit_disk, 1.5, 1e-3, 0.5, seed=1)


def test_thinning_is_nested(unit_disk):
    soup = sample_loop_soup(unit_disk, 1.0, 1e-3, 0.5, seed=2)
    ids = [{l.loop_id for l in thin_soup(soup, c, seed=17).loops} for c in (0.9, 0.6, 0.3, 0.1)]
    for bigger, smaller in zip(ids, ids[1:]):
        assert smaller <= bigger
    assert [l.loop_id for l in thin_soup(soup, 1.0, seed=17).loops] == [l.loop_id for l in soup.loops]
    with pytest.raises(ParameterDomainError):
        thin_soup(thin_soup(soup, 0.5, seed=1), 0.8, seed=1)


def test_four_quarter_turns_are_identity(unit_disk):
    soup = sample_loop_soup(unit_disk, 0.5, 1e-3, 0.5, seed=3)
    back = rotate_soup(soup, 4)
    assert all(np.allclose(a.polyline, b.polyline) for a, b in zip(soup.loops, back.loops))
    turned = rotate_soup(soup, 1)
    assert all(np.allclose(1j * a.polyline, b.polyline) for a, b in zip(soup.loops, turned.loops))


def test_segments_intersect_touching_and_disjoint():
    a0, a1 = np.array([0j]), np.array([1 + 0j])
    assert segments_intersect(a0, a1, np.array([0.5 - 0.5j]), np.array([0.5 + 0.5j]))[0]
    assert segments_intersect(a0, a1, np.array([1 + 0j]), np.array([2 + 1j]))[0]
    assert not segments_intersect(a0, a1, np.array([0.5 + 0.1j]), np.array([0.9 + 0.5j]))[0]


def test_cluster_loops_hand_built(three_squares):
    clusters = cluster_loops(three_squares, 64)
    assert clusters[0] == clusters[1]
    assert clusters[2] != clusters[0]


def test_carpet_of_hand_built_soup(three_squares, disk_grid):
    cle = carpet_from_clusters(three_squares, cluster_loops(three_squares, 64), disk_grid, kappa=3.0)
    assert cle.n_loops == 2
    r, c = disk_grid.index_of(0.4 + 0j)
    assert not cle.carpet[r, c]
    r, c = disk_grid.index_of(0.0 + 0.6j)
    assert cle.carpet[r, c]
    assert not np.any(cle.carpet & ~cle.domain_mask)
    for boundary in cle.outer_boundaries:
        assert boundary[0] == boundary[-1]


def test_diagonal_contact_is_one_component():
    filled = np.zeros((6, 6), dtype=bool)
    filled[1:3, 1:3] = True
    filled[3:5, 3:5] = True
    labels, count = label_filled(filled)
    assert count == 1
    assert labels[1, 1] == labels[4, 4] > 0
    assert np.all(labels[~filled] == 0)


def test_only_outermost_loops_survive(nested_squares, disk_grid):
    cle = carpet_from_clusters(nested_squares, cluster_loops(nested_squares, 64), disk_grid)
    assert len(set(cluster_loops(nested_squares, 64).values())) == 2
    assert cle.n_loops == 1
    r, c = disk_grid.index_of(0.3 + 0.3j)
    assert cle.component_mask(0)[r, c]


def test_carpets_are_nested_along_thinning():
    grid = DiskDomain().grid(64)
    soup = sample_loop_soup(DiskDomain(), 1.0, default_t_min(64), 0.5, seed=5)
    carpets = []
    for c in (0.4, 0.7, 1.0):
        level = thin_soup(soup, c, seed=23)
        carpets.append(carpet_from_clusters(level, cluster_loops(level, 64), grid).carpet)
    for sparse, dense in zip(carpets, carpets[1:]):
        assert not np.any(dense & ~sparse)


def test_sample_cle_returns_soup_and_sample():
    grid = DiskDomain().grid(48)
    soup, cle = sample_cle(3.0, 0.5, grid, seed=1, t_cap=0.5)
    assert cle.kappa == 3.0
    assert cle.carpet.shape == (48, 48)
    assert len(cle.cluster_ids) == len(soup)


@pytest.mark.slow
def test_restriction_smoke_test():
    report = restriction_smoke_test(DiskDomain(0j, 0.5), 0.5, 2e-3, 0.5, n_replicas=60, seed=0)
    assert report.passed
    assert set(report.to_dict()) >= {"count_p", "diameter_p", "passed"}


def test_square_helper_is_closed():
    p = square_polyline(0j, 0.5)
    assert p[0] == p[-1]
    assert make_soup([p]).loops[0].root == p[0]
