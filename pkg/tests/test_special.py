"""
Tests for analysis.special: Gegenbauer recurrence, the radial Bessel
density and SDE, and the H-ODE
"""
import math

import numpy as np
import pytest
from scipy import integrate

from analysis.special import (
    BesselDensitySpec,
    bessel_drift_regression,
    chapman_kolmogorov_residual,
    gegenbauer,
    gegenbauer_norm,
    h_ode_check,
    h_ode_integration_check,
    ks_against_density,
    radial_bessel_density,
    simulate_radial_bessel,
    stationary_density,
)
from core.exceptions import ParameterDomainError

A = 2.0 / 3.0


def test_gegenbauer_low_orders():
    assert gegenbauer(0, 1.5, 0.3) == 1.0
    assert gegenbauer(1, 1.5, 0.3) == pytest.approx(2 * 1.5 * 0.3)
    # index 1 is the Chebyshev U family: U_2 = 4x^2 - 1
    assert gegenbauer(2, 1.0, 0.3) == pytest.approx(4 * 0.09 - 1)
    assert gegenbauer(3, 1.0, np.array([0.0, 1.0])).tolist() == pytest.approx([0.0, 4.0])


def test_gegenbauer_norm():
    assert gegenbauer_norm(0, 1.0) == pytest.approx(math.pi / 2, rel=1e-10)
    lam = 1.3
    expected = math.sqrt(math.pi) * math.gamma(lam + 0.5) / math.gamma(lam + 1.0)
    assert gegenbauer_norm(0, lam) == pytest.approx(expected, rel=1e-10)


def test_density_is_a_probability_density():
    spec = BesselDensitySpec(A, 0.5)
    ys = np.linspace(0.0, math.pi, 20001)
    values = radial_bessel_density(spec, 1.0, ys)
    assert integrate.trapezoid(values, ys) == pytest.approx(1.0, abs=1e-6)
    assert values.min() >= -1e-9
    assert spec.tail_bound < 1e-10


def test_density_relaxes_to_stationary_law():
    spec = BesselDensitySpec(A, 12.0)
    ys = np.linspace(0.2, math.pi - 0.2, 9)
    assert np.allclose(radial_bessel_density(spec, 0.7, ys), stationary_density(A, ys), atol=1e-6)


def test_chapman_kolmogorov():
    assert chapman_kolmogorov_residual(A, 0.3, 0.7, 1.0, 2.0) < 1e-8


def test_spec_guards():
    with pytest.raises(ParameterDomainError):
        BesselDensitySpec(0.0, 1.0)
    with pytest.raises(ParameterDomainError):
        BesselDensitySpec(A, -1.0)
    with pytest.raises(ParameterDomainError):
        simulate_radial_bessel(A, 1.0, 0.5, 0.01, 10, 0)
    with pytest.raises(ParameterDomainError):
        simulate_radial_bessel(A, 4.0, 0.5, 1e-4, 10, 0)


def test_simulated_endpoints_follow_density():
    samples = simulate_radial_bessel(A, 1.0, 0.5, 5e-4, 2000, seed=3)
    assert np.all((samples > 0) & (samples < math.pi))
    result = ks_against_density(samples, BesselDensitySpec(A, 0.5), 1.0)
    assert result["p_value"] > 1e-3


def test_drift_regression_recovers_coefficient():
    report = bessel_drift_regression(A, seed=1)
    assert report["expected"] == pytest.approx(2 * A)
    assert report["passed"]


@pytest.mark.parametrize("kappa", [3.0, 4.0, 6.0])
def test_h_ode(kappa):
    theta = np.linspace(0.01, math.pi - 0.01, 2001)
    assert h_ode_check(kappa, theta) < 1e-8
    assert h_ode_integration_check(kappa) < 1e-6
    with pytest.raises(ParameterDomainError):
        h_ode_check(kappa, [0.0, 1.0])
