"""
Tests for measures.natural_param: bubbles, Minkowski content, box dimension,
the G_kappa density and the covariance machinery on hand-built traces
"""
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import ndimage

from core.exceptions import ParameterDomainError
from core.grid import HalfPlaneWindow, rasterize_polyline
from core.params import derive_params
from measures.natural_param import (
    box_dimension,
    eps_drift_diagnostic,
    estimate_mu0,
    find_bubbles,
    g_kappa,
    g_kappa_box_integral,
    intensity_shape_check,
    lebesgue_stand_in,
    minkowski_content,
    mirror_symmetry_check,
    scaling_covariance_check,
    trace_box_dimension,
)
from sampling.loewner import LoewnerTrace


def _trace(corners, kappa: float = 6.0, per_edge: int = 64) -> LoewnerTrace:
    corners = np.asarray(corners, dtype=complex)
    pieces = [np.linspace(a, b, per_edge, endpoint=False) for a, b in zip(corners[:-1], corners[1:])]
    points = np.append(np.concatenate(pieces), corners[-1])
    return LoewnerTrace(points=points, times=np.linspace(0.0, 1.0, points.size), kappa=kappa)


@pytest.fixture
def bubble_trace():
    """Up, across and back down to the real line: one square bubble of side 1/2."""
    return _trace([0j, 0.5j, 0.5 + 0.5j, 0.5 + 0j])


def _sierpinski(level: int) -> np.ndarray:
    mask = np.ones((1, 1), dtype=bool)
    for _ in range(level):
        hole = np.zeros_like(mask)
        mask = np.block([[mask, mask, mask], [mask, hole, mask], [mask, mask, mask]])
    return mask


# ============================================================
# BUBBLES
# ============================================================

def test_single_bubble_found(bubble_trace):
    grid = HalfPlaneWindow().grid(64)
    bubbles = find_bubbles(grid, bubble_trace)
    assert len(bubbles) == 1
    assert bubbles[0].n_cells * grid.cell_area == pytest.approx(0.25, rel=0.1)
    assert bubbles[0].contour.size > 0


def test_simple_curve_has_no_bubbles():
    grid = HalfPlaneWindow().grid(64)
    assert find_bubbles(grid, _trace([0j, 0.8j])) == []


def test_lebesgue_stand_in_covariance_is_exact(bubble_trace):
    estimate = lebesgue_stand_in([bubble_trace], HalfPlaneWindow(), 64)
    assert estimate.total == pytest.approx(0.25, rel=0.1)
    report = scaling_covariance_check(estimate, 1.5)
    assert report.exponent == 2.0
    assert report.total_ratio == pytest.approx(1.5 ** 2, rel=1e-9)
    with pytest.raises(ParameterDomainError):
        scaling_covariance_check(estimate, 3.0)


def test_mu0_guards_and_empty_threshold(bubble_trace):
    with pytest.raises(ParameterDomainError):
        estimate_mu0([bubble_trace], 2, derive_params(3.0), 0.1)
    with pytest.raises(ParameterDomainError):
        estimate_mu0([], 2, derive_params(6.0), 0.1)
    estimate = estimate_mu0([bubble_trace], 2, derive_params(6.0), 1e6, n=64, seed=1)
    assert estimate.total == 0.0
    assert estimate.metadata["n_bubbles"] == 1
    assert estimate.metadata["n_counted"] == 0


def test_mu0_counts_every_field_once_across_an_eps_ladder(bubble_trace):
    grid = HalfPlaneWindow().grid(64)
    rows, cols, _ = rasterize_polyline(grid, bubble_trace.points)
    near = np.zeros((grid.n, grid.n), dtype=bool)
    near[rows, cols] = True
    near = ndimage.binary_dilation(near, structure=np.ones((3, 3), dtype=bool), iterations=2)

    counted, positive = 0, False
    for k in range(-30, 31):
        estimate = estimate_mu0([bubble_trace], 2, derive_params(6.0), 2.0 ** k, n=64, seed=1)
        counted += estimate.metadata["n_counted"]
        positive = positive or estimate.total > 0
        assert np.all(estimate.mass[~near] == 0.0)
    # dyadic thresholds partition the positive lengths, one window per field
    assert counted == 2
    assert positive


def test_uncleared_contour_length_is_reported(bubble_trace):
    estimate = estimate_mu0([bubble_trace], 1, derive_params(6.0), 1e6, n=64, seed=1)
    meta = estimate.metadata
    # the bubble rests on the real line: its bottom edge is uncleared, its top is not
    assert 0.0 < meta["uncleared_length_fraction"] < 1.0
    assert meta["n_partly_uncleared_bubbles"] == 1
    assert meta["n_uncleared_bubbles"] == 0
    assert any("field_eps" in w for w in meta["warnings"])


# ============================================================
# MINKOWSKI CONTENT / BOX DIMENSION
# ============================================================

def test_minkowski_content_of_segment():
    segment = np.array([0j, 1 + 0j])
    estimate = minkowski_content(segment, d=1.0, radii=[0.2, 0.1, 0.05, 0.02])
    assert estimate.value == pytest.approx(2.0, rel=0.03)
    assert not estimate.clipped
    with pytest.raises(ParameterDomainError):
        minkowski_content(segment, radii=[0.1, 0.05])


def test_box_dimension_of_sierpinski_carpet():
    mask = _sierpinski(5)
    assert mask.shape == (243, 243)
    assert box_dimension(mask, [1, 3, 9, 27]) == pytest.approx(np.log(8) / np.log(3), abs=1e-9)


def test_box_dimension_edge_cases():
    assert box_dimension(np.zeros((16, 16), dtype=bool)) == 0.0
    assert box_dimension(np.ones((16, 16), dtype=bool)) == 2.0
    mask = np.zeros((64, 64), dtype=bool)
    mask[10, 10] = True
    with pytest.raises(ParameterDomainError):
        box_dimension(mask, [1, 2])


def test_box_dimension_of_a_straight_trace():
    assert trace_box_dimension(_trace([0j, 0.8j]), n=256) == pytest.approx(1.0, abs=0.02)


# ============================================================
# INTENSITY SHAPE
# ============================================================

def test_g_kappa_values():
    assert float(g_kappa(1j, 6.0)) == pytest.approx(1.0)
    z = 0.3 + 0.4j
    assert float(g_kappa(z, 6.0)) == pytest.approx(float(g_kappa(-z.conjugate(), 6.0)))
    assert float(g_kappa(2 * z, 6.0)) == pytest.approx(2 ** (6.0 / 8.0 - 1.0) * float(g_kappa(z, 6.0)))


def test_g_kappa_box_integral_scaling():
    box = (0.2, 0.6, 0.1, 0.5)
    base = g_kappa_box_integral(box, 6.0)
    doubled = g_kappa_box_integral(tuple(2 * v for v in box), 6.0)
    assert doubled == pytest.approx(2 ** (1.0 + 6.0 / 8.0) * base, rel=1e-6)
    assert g_kappa_box_integral((0.0, 1.0, 0.0, 1.0), 8.0) == pytest.approx(1.0, rel=1e-8)
    with pytest.raises(ParameterDomainError):
        g_kappa_box_integral((0.0, 1.0, -0.5, 0.5), 6.0)


@pytest.fixture
def mirrored_pair(bubble_trace):
    """The square bubble and its mirror image in the imaginary axis, one per trace."""
    mirror = _trace([0j, 0.5j, -0.5 + 0.5j, -0.5 + 0j])
    return lebesgue_stand_in([bubble_trace, mirror], HalfPlaneWindow(), 64)


def test_intensity_shape_constant_matches_the_box_sums(mirrored_pair):
    boxes = [(0.25, 0.75, 0.0, 0.5), (-0.75, -0.25, 0.0, 0.5), (-0.25, 0.25, 0.5, 1.0)]
    report = intensity_shape_check(mirrored_pair, boxes, kappa=6.0)
    table = report.table
    assert table["predicted"].sum() == pytest.approx(table["mass"].sum(), rel=1e-9)
    assert report.constant > 0
    assert table["mass_ratio"].iloc[0] == 1.0
    assert table["integral_ratio"].iloc[1] == pytest.approx(1.0, rel=1e-6)
    assert set(report.to_dict()) >= {"constant", "max_abs_z", "n_outliers", "passed", "boxes"}


def test_mirror_symmetry_of_mirrored_bubbles(mirrored_pair):
    report = mirror_symmetry_check(mirrored_pair, (0.25, 0.75, 0.0, 0.5))
    assert report["mass"] > 0
    assert report["mass"] == pytest.approx(report["mirror_mass"], rel=0.15)
    assert report["passed"]


def test_eps_drift_ratios():
    frame = eps_drift_diagnostic(lambda e: SimpleNamespace(total=2.0 * e, total_stderr=0.0), [0.1, 0.2, 0.4])
    assert frame["ratio_to_first"].tolist() == pytest.approx([1.0, 2.0, 4.0])
