"""
Tests for sampling.loewner: exact slit flows, swallowing, zipper traces and drivers
"""
import numpy as np
import pytest

from core.exceptions import HorizonError, ParameterDomainError
from sampling.loewner import (
    DrivingFunction,
    Swallowed,
    forward_flow,
    sample_sle_driving,
    sample_sle_kappa_rho_driving,
    solve_forward,
    solve_reverse,
    trace_from_driving,
    unzip_trace,
    zip_up,
)


def _zero_driver(horizon: float = 1.0, n_steps: int = 100) -> DrivingFunction:
    return DrivingFunction(times=np.linspace(0.0, horizon, n_steps + 1), values=np.zeros(n_steps + 1), kappa=0.0)


def _upper(z: np.ndarray) -> np.ndarray:
    return np.where(z.imag < 0, -z, z)


def test_zero_driver_forward_map_is_exact():
    rng = np.random.default_rng(1)
    z = rng.uniform(-2.0, 2.0, 100) + 1j * rng.uniform(0.5, 2.0, 100)
    values, swallowed = forward_flow(_zero_driver(), z, 1.0)
    assert np.all(np.isnan(swallowed))
    assert np.max(np.abs(values - _upper(np.sqrt(z * z + 4.0)))) < 1e-6


def test_forward_map_at_intermediate_time():
    z = np.array([1.0 + 1.0j, -0.5 + 2.0j])
    values, _ = forward_flow(_zero_driver(), z, 0.37)
    assert np.allclose(values, _upper(np.sqrt(z * z + 4.0 * 0.37)), atol=1e-9)


@pytest.mark.parametrize("y", [0.5, 1.0, 1.5])
def test_swallow_time_of_imaginary_point(y):
    verdict = solve_forward(_zero_driver(), 1j * y, 1.0)
    assert isinstance(verdict, Swallowed)
    assert abs(verdict.time - y * y / 4.0) < 1e-4


def test_point_above_the_slit_survives():
    value = solve_forward(_zero_driver(), 3.0j, 1.0)
    assert isinstance(value, complex)
    assert value == pytest.approx(1j * np.sqrt(5.0), abs=1e-9)


def test_time_zero_returns_input():
    assert solve_forward(_zero_driver(), 0.3 + 0.2j, 0.0) == 0.3 + 0.2j


def test_horizon_and_domain_errors():
    driver = _zero_driver()
    with pytest.raises(HorizonError):
        solve_forward(driver, 1j, 2.0)
    with pytest.raises(ParameterDomainError):
        forward_flow(driver, [1.0 - 1.0j], 0.5)
    with pytest.raises(ParameterDomainError):
        solve_reverse(driver, 1.0, 0.5)


def test_reverse_flow_of_zero_driver():
    z = np.array([0.3 + 0.5j, -1.0 + 0.1j, 2.0 + 2.0j])
    f = solve_reverse(_zero_driver(), z, 1.0)
    assert np.allclose(f, _upper(np.sqrt(z * z - 4.0)), atol=1e-9)
    assert np.all(f.imag > z.imag)


def test_zip_up_inverts_the_forward_flow():
    driver = sample_sle_driving(2.0, 1e-3, 200, seed=3)
    z = np.array([0.2 + 0.8j, -0.7 + 1.5j, 1.3 + 0.6j])
    g, swallowed = forward_flow(driver, z, driver.horizon)
    assert np.all(np.isnan(swallowed))
    back = zip_up(driver, driver.horizon, g - driver.value_at(driver.horizon))
    assert np.max(np.abs(back - z)) < 1e-8


def test_zero_driver_trace_is_vertical_slit():
    driver = _zero_driver()
    trace = trace_from_driving(driver)
    assert np.allclose(trace.points, 2j * np.sqrt(trace.times), atol=1e-9)


def test_trace_stride_keeps_final_tip():
    driver = sample_sle_driving(6.0, 1e-3, 103, seed=5)
    full = trace_from_driving(driver)
    strided = trace_from_driving(driver, stride=10)
    assert strided.times[-1] == driver.horizon
    assert np.allclose(strided.points, full.points[np.append(np.arange(0, 104, 10), 103)])


def test_unzip_trace_of_zero_driver():
    trace = unzip_trace(_zero_driver(), 0.5)
    assert trace.times[-1] == pytest.approx(0.5)
    assert np.allclose(trace.points, 2j * np.sqrt(trace.times), atol=1e-9)


def test_driver_is_deterministic_per_seed():
    a = sample_sle_driving(6.0, 1e-4, 500, seed=7)
    b = sample_sle_driving(6.0, 1e-4, 500, seed=7)
    c = sample_sle_driving(6.0, 1e-4, 500, seed=8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert list(a.to_frame().columns) == ["t", "w"]


def test_driver_increment_variance():
    driver = sample_sle_driving(4.0, 1e-3, 20_000, seed=11)
    var = np.var(np.diff(driver.values)) / 1e-3
    assert var == pytest.approx(4.0, rel=0.05)


def test_kappa_rho_with_zero_weights_reproduces_plain_driver():
    plain = sample_sle_driving(3.0, 1e-3, 300, seed=2)
    tilted, _ = sample_sle_kappa_rho_driving(3.0, [0.0], [1.0], 1e-3, 300, seed=2)
    assert np.array_equal(plain.values, tilted.values)


def test_kappa_rho_stops_at_continuation_threshold():
    driver, state = sample_sle_kappa_rho_driving(3.0, [-2.0], [0.0], 1e-3, 100, seed=0)
    assert driver.stopped_at_threshold == 0.0
    assert driver.n_steps == 0


def test_trace_scaling():
    trace = trace_from_driving(sample_sle_driving(2.0, 1e-3, 50, seed=1))
    scaled = trace.scaled(2.0)
    assert np.allclose(scaled.points, 2.0 * trace.points)
    assert np.allclose(scaled.times, 4.0 * trace.times)
