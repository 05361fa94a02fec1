"""
Tests for measures.cle_measure on hand-built loop configurations
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from core.exceptions import ParameterDomainError
from core.models import NormalizationMode
from core.params import carpet_dimension, derive_params
from measures.cle_measure import (
    MobiusMap,
    aggregate_measures,
    arc_length_control,
    carpet_support,
    cle4_measure_via_coupling,
    disk_intensity_reference,
    disk_reference_covariance_residual,
    estimate_xi,
    fit_mass_slope,
    loop_mass_vanishing_test,
    neighborhood_mass_profile,
    pushforward_covariant,
    quadrant_symmetry_check,
    radial_intensity_fit,
    reference_loop_profile,
    rotation_equivariance_test,
    shift_scaling_check,
    uniqueness_normalization_check,
)
from sampling.loopsoup import carpet_from_clusters, cluster_loops


@pytest.fixture
def hand_cle(three_squares, disk_grid):
    return carpet_from_clusters(three_squares, cluster_loops(three_squares, 64), disk_grid, kappa=3.0)


@pytest.fixture
def hand_xi(hand_cle):
    return estimate_xi(hand_cle, 3, derive_params(3.0), 1e-9, seed=4)


# ============================================================
# ESTIMATOR
# ============================================================

def test_every_loop_carries_one_atom_per_field(hand_cle, hand_xi):
    assert len(hand_xi.deposits) == 3 * hand_cle.n_loops
    assert hand_xi.n_samples == 3
    assert hand_xi.support_violation_mass() == 0.0
    support = carpet_support(hand_cle)
    assert np.all(hand_xi.masses[~support] == 0.0)
    atom = 1e-9 ** (derive_params(3.0).alpha + 0.5)
    assert np.allclose(hand_xi.deposits["pre"], atom)


def test_threshold_above_every_loop_gives_zero_measure(hand_cle):
    measure = estimate_xi(hand_cle, 2, derive_params(3.0), 1e6, seed=4)
    assert measure.total == 0.0
    assert measure.metadata["warnings"]


def test_estimator_guards(hand_cle):
    with pytest.raises(ParameterDomainError):
        estimate_xi(hand_cle, 2, derive_params(5.0), 0.1, seed=0)
    with pytest.raises(ParameterDomainError):
        estimate_xi(hand_cle, 0, derive_params(3.0), 0.1, seed=0)
    with pytest.raises(ParameterDomainError):
        estimate_xi(hand_cle, 2, derive_params(3.0), 0.0, seed=0)


def test_estimator_is_deterministic(hand_cle):
    a = estimate_xi(hand_cle, 2, derive_params(3.0), 1e-9, seed=9)
    b = estimate_xi(hand_cle, 2, derive_params(3.0), 1e-9, seed=9)
    assert np.array_equal(a.masses, b.masses)


def test_shift_scaling_is_exact(hand_cle):
    report = shift_scaling_check(hand_cle, derive_params(3.0), 1e-9, 0.7, seed=2)
    assert report["same_atoms"]
    assert report["max_rel_error"] < 1e-12
    assert report["passed"]


def test_normalized_and_aggregated(hand_xi):
    unit = hand_xi.normalized()
    assert unit.total == pytest.approx(1.0)
    assert unit.normalization is NormalizationMode.UNIT
    both = aggregate_measures([hand_xi, hand_xi])
    assert both.total == pytest.approx(hand_xi.total)
    assert both.n_samples == 2
    assert len(both.supports) == 2
    with pytest.raises(ParameterDomainError):
        aggregate_measures([])


def test_uniqueness_check_of_a_run_against_itself(hand_xi):
    report = uniqueness_normalization_check(hand_xi, hand_xi, [(-1.0, 0.0, -1.0, 1.0)])
    assert report.boxes["z"].abs().max() == 0.0
    assert report.passed


# ============================================================
# CONFORMAL COVARIANCE
# ============================================================

def test_mobius_map_basics():
    phi = MobiusMap(0.3 + 0.2j, 0.5)
    w = np.array([0.1 + 0.1j, -0.4j, 0.7 + 0j])
    assert np.allclose(phi.inverse()(phi(w)), w)
    assert np.all(np.abs(phi(w)) < 1)
    assert float(MobiusMap()(0.5)) == pytest.approx(0.5)
    with pytest.raises(ParameterDomainError):
        MobiusMap(1.5 + 0j)


def test_disk_reference_is_covariant():
    assert disk_intensity_reference(0j, 1.8) == 1.0
    assert disk_reference_covariance_residual(100, carpet_dimension(3.0), seed=1) < 1e-10
    with pytest.raises(ParameterDomainError):
        disk_intensity_reference(1.0 + 0j, 1.8)


def test_quarter_turn_preserves_total(hand_xi):
    turned = pushforward_covariant(hand_xi, MobiusMap(0j, math.pi / 2.0), carpet_dimension(3.0))
    assert turned.total == pytest.approx(hand_xi.total, rel=1e-12)
    assert turned.metadata["pushforward"]["theta"] == pytest.approx(math.pi / 2.0)


def test_radial_fit_recovers_the_disk_reference(hand_xi):
    d = carpet_dimension(3.0)
    grid = hand_xi.grid
    z = grid.centers()
    inside = np.abs(z) < 1
    masses = np.zeros_like(hand_xi.masses)
    masses[inside] = grid.cell_area * disk_intensity_reference(z[inside], d)
    fit = radial_intensity_fit(replace(hand_xi, masses=masses), d)
    assert fit["defined"]
    assert fit["slope"] == pytest.approx(d - 2.0, abs=0.02)
    assert fit["passed"]


def test_radial_fit_of_an_empty_measure_is_undefined(hand_xi):
    fit = radial_intensity_fit(replace(hand_xi, masses=np.zeros_like(hand_xi.masses)), 1.9)
    assert not fit["defined"]
    assert not fit["passed"]


def test_quadrants_split_the_total(hand_xi):
    report = quadrant_symmetry_check(hand_xi)
    assert sum(report["quadrant_masses"]) == pytest.approx(hand_xi.total, rel=1e-12)


def test_four_quarter_turns_balance_the_quadrants(hand_xi):
    d = carpet_dimension(3.0)
    turns = [hand_xi] + [pushforward_covariant(hand_xi, MobiusMap(0j, k * math.pi / 2.0), d) for k in (1, 2, 3)]
    report = quadrant_symmetry_check(aggregate_measures(turns))
    quarter = hand_xi.total / 4.0
    assert report["quadrant_masses"] == pytest.approx([quarter] * 4, rel=1e-9)
    assert report["passed"]


def test_rotation_run_on_a_small_grid():
    report = rotation_equivariance_test(3.0, 4, seed=11, grid_n=32, n_fields=1, eps=1e-6, t_cap=0.05)
    assert 0.0 <= report["p_value"] <= 1.0
    assert 0.0 <= report["ks"] <= 1.0
    assert report["n_replicas"] == 4
    assert len(report["mean_totals"]) == 2


# ============================================================
# LOOP MASS
# ============================================================

def test_fit_mass_slope_recovers_power_law():
    radii = [0.2, 0.1, 0.05, 0.025]
    fit = fit_mass_slope(radii, [r ** 1.5 for r in radii])
    assert fit["slope"] == pytest.approx(1.5)
    assert not fit_mass_slope(radii, [0.0, 0.0, 0.0, 1.0])["defined"]


def test_neighborhood_profile_and_control():
    loop = np.array([0j, 1 + 0j])
    points = np.array([0.5 + 0.05j, 0.5 + 0.15j, 0.5 + 0.5j])
    profile = neighborhood_mass_profile(points, [1.0, 2.0, 4.0], loop, [0.6, 0.2, 0.1], 0.01)
    assert profile.tolist() == [7.0, 3.0, 1.0]
    control = arc_length_control(loop, [0.2, 0.1, 0.05, 0.025], 0.01)
    assert control["slope"] == 0.0


def test_reference_profile_counts_the_loops_own_atoms(hand_cle, hand_xi):
    h = hand_cle.grid.h
    result = reference_loop_profile(hand_cle, hand_xi, [8 * h, 4 * h, 3 * h])
    assert result["own"] > 0
    # atoms sit on carpet cells next to their loop, so every radius holds them all
    assert np.allclose(result["own_profile"], [result["own"]] * 3)
    assert np.all(result["profile"] >= result["own_profile"] * (1 - 1e-12))
    assert result["profile"][0] >= result["profile"][-1]


def test_loop_mass_run_on_a_small_grid():
    report = loop_mass_vanishing_test(3.0, 2, [0.5, 0.25, 0.125], seed=5, grid_n=32, n_fields=1,
                                      eps=1e-6, t_cap=0.05)
    profile = np.array(report.mean_profile)
    assert np.all(np.diff(profile) <= 1e-12 * max(profile[0], 1.0))
    assert np.all(np.array(report.own_profile) <= profile * (1 + 1e-12))
    assert report.n_replicas == 2
    assert set(report.to_dict()) >= {"mean_profile", "own_profile", "fit", "control", "passed"}


def test_loop_mass_radii_must_decrease():
    with pytest.raises(ParameterDomainError):
        loop_mass_vanishing_test(3.0, 1, [0.1, 0.2, 0.3], seed=0, grid_n=32)


# ============================================================
# COUPLING
# ============================================================

def test_coupling_sequence_guards():
    with pytest.raises(ParameterDomainError):
        cle4_measure_via_coupling([0.5, 0.9], 1, seed=0)
    with pytest.raises(ParameterDomainError):
        cle4_measure_via_coupling([0.9, 0.5, 1.0], 1, seed=0)
    with pytest.raises(ParameterDomainError):
        cle4_measure_via_coupling([0.0, 1.0], 1, seed=0)
