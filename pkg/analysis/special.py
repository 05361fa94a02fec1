"""
special.py — Gegenbauer polynomials, radial Bessel densities and the H-ODE
==========================================================================

The radial Bessel process dTheta = 2a cot(Theta) ds + dW on (0, pi) has
generator (1/2) f'' + 2a cot(x) f', reversible for sin^{4a}(x) dx, with
eigenfunctions C_n^{(2a)}(cos x) and eigenvalues -(n/2)(n + 4a). Its
transition density in y is therefore

    p_s(x, y) = sin^{4a}(y) * sum_n exp(-(n/2)(n + 4a) s) C_n(cos x) C_n(cos y) / h_n

with h_n = int_{-1}^{1} C_n(u)^2 (1 - u^2)^{2a - 1/2} du.

Public API
──────────
    gegenbauer(n, index, x)                           → float | ndarray
    BesselDensitySpec(a, s)                           → truncated series
    radial_bessel_density(spec, x, y)                 → float | ndarray
    simulate_radial_bessel(a, theta0, s, dt, n_samples, seed) → ndarray
    bessel_drift_regression(a, thetas, dt, n_samples, seed)   → dict
    h_ode_check(kappa, theta_grid)                    → float
    h_ode_integration_check(kappa, lo, hi)            → float
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence

import numpy as np
from loguru import logger
from scipy import integrate, stats
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from core.config import settings
from core.exceptions import CarpetLabError, ParameterDomainError, RejectionBudgetExceeded

TAIL_TOLERANCE = 1e-10
BOUNDARY_GUARD = 1e-4
MAX_TERMS = 2000


# ============================================================================
# GEGENBAUER
# ============================================================================

def gegenbauer_table(n_max: int, index: float, x) -> np.ndarray:
    """C_0 .. C_{n_max} at x by the three-term recurrence, shape (n_max + 1,) + x.shape."""
    if n_max < 0:
        raise ParameterDomainError("n", n_max, ">= 0")
    if index <= 0:
        raise ParameterDomainError("index", index, "(0, inf)")
    x = np.asarray(x, dtype=float)
    table = np.empty((n_max + 1,) + x.shape)
    table[0] = 1.0
    if n_max >= 1:
        table[1] = 2.0 * index * x
    for n in range(2, n_max + 1):
        table[n] = (2.0 * x * (n + index - 1.0) * table[n - 1] - (n + 2.0 * index - 2.0) * table[n - 2]) / n
    return table


def gegenbauer(n: int, index: float, x):
    value = gegenbauer_table(n, index, x)[n]
    return float(value) if value.ndim == 0 else value


@lru_cache(maxsize=4096)
def gegenbauer_norm(n: int, index: float) -> float:
    """int_{-1}^{1} C_n(u)^2 (1 - u^2)^{index - 1/2} du by algebraic-weight quadrature."""
    w = index - 0.5
    value, _ = integrate.quad(lambda u: gegenbauer(n, index, u) ** 2, -1.0, 1.0, weight="alg", wvar=(w, w),
                              limit=200, epsabs=0.0, epsrel=1e-13)
    return float(value)


# ============================================================================
# RADIAL BESSEL DENSITY
# ============================================================================

def _check_weight_identity(a: float) -> None:
    y = np.linspace(1e-3, math.pi - 1e-3, 257)
    lhs = (1.0 - np.cos(y) ** 2) ** (2.0 * a - 0.5) * np.sin(y)
    rhs = np.sin(y) ** (4.0 * a)
    if not np.allclose(lhs, rhs, rtol=1e-10, atol=0.0):
        raise CarpetLabError(f"stationary weight identity failed for a={a}")


@dataclass
class BesselDensitySpec:
    """Truncated eigen-expansion of the radial Bessel transition density."""
    a: float
    s: float
    n_terms: Optional[int] = None
    tail_bound: float = field(init=False, default=0.0)
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.a <= 0:
            raise ParameterDomainError("a", self.a, "(0, inf)")
        if self.s <= 0:
            raise ParameterDomainError("s", self.s, "(0, inf)")
        _check_weight_identity(self.a)
        if self.n_terms is None:
            self.n_terms, self.tail_bound = self._truncation()
        elif self.n_terms < 1:
            raise ParameterDomainError("n_terms", self.n_terms, ">= 1")
        self.norms = np.array([gegenbauer_norm(n, self.index) for n in range(self.n_terms + 1)])

    @property
    def index(self) -> float:
        return 2.0 * self.a

    @property
    def dimension(self) -> float:
        return 4.0 * self.a + 1.0

    def decay(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        return np.exp(-0.5 * n * (n + 4.0 * self.a) * self.s)

    def _term_bound(self, n: int) -> float:
        # |C_n(u)| <= C_n(1) on [-1, 1] for a positive index
        peak = math.exp(math.lgamma(n + 2.0 * self.index) - math.lgamma(n + 1.0) - math.lgamma(2.0 * self.index))
        return float(self.decay(n)) * peak ** 2 / gegenbauer_norm(n, self.index)

    def _truncation(self):
        previous = self._term_bound(1)
        for n in range(2, MAX_TERMS):
            bound = self._term_bound(n)
            ratio = bound / previous if previous > 0 else 0.0
            if ratio < 1.0 and bound / (1.0 - ratio) < TAIL_TOLERANCE:
                return n - 1, bound / (1.0 - ratio)
            previous = bound
        raise ParameterDomainError("s", self.s, f"a horizon reaching tail < {TAIL_TOLERANCE} within {MAX_TERMS} terms")


def radial_bessel_density(spec: BesselDensitySpec, x, y):
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    cx = gegenbauer_table(spec.n_terms, spec.index, np.cos(x))
    cy = gegenbauer_table(spec.n_terms, spec.index, np.cos(y))
    coeff = (spec.decay(np.arange(spec.n_terms + 1)) / spec.norms).reshape((-1,) + (1,) * x.ndim)
    value = np.sin(y) ** (4.0 * spec.a) * np.sum(coeff * cx * cy, axis=0)
    return float(value) if value.ndim == 0 else value


def stationary_density(a: float, y):
    norm = gegenbauer_norm(0, 2.0 * a)
    return np.sin(np.asarray(y, dtype=float)) ** (4.0 * a) / norm


def density_cdf(spec: BesselDensitySpec, x: float, n_grid: int = 4001):
    """CDF of p_s(x, .) by cumulative trapezoid on a fine grid, as a callable."""
    ys = np.linspace(0.0, math.pi, n_grid)
    cdf = integrate.cumulative_trapezoid(radial_bessel_density(spec, x, ys), ys, initial=0.0)
    cdf /= cdf[-1]
    return lambda t: np.interp(t, ys, cdf)


def chapman_kolmogorov_residual(a: float, s: float, t: float, x: float, y: float) -> float:
    """|int p_s(x, u) p_t(u, y) du - p_{s+t}(x, y)|."""
    ps, pt, pst = BesselDensitySpec(a, s), BesselDensitySpec(a, t), BesselDensitySpec(a, s + t)
    value, _ = integrate.quad(lambda u: radial_bessel_density(ps, x, u) * radial_bessel_density(pt, u, y),
                              0.0, math.pi, limit=200, epsabs=1e-12)
    return abs(value - radial_bessel_density(pst, x, y))


# ============================================================================
# SDE
# ============================================================================

class _OutsideGuard(Exception):
    pass


def _guarded_step(theta: np.ndarray, a: float, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One Euler-Maruyama step; proposals leaving (delta, pi - delta) are redrawn."""
    drift = 2.0 * a / np.tan(theta) * dt
    proposal = theta + drift + math.sqrt(dt) * rng.standard_normal(theta.shape)
    pending = (proposal <= BOUNDARY_GUARD) | (proposal >= math.pi - BOUNDARY_GUARD)

    def redraw():
        idx = np.nonzero(pending)[0]
        proposal[idx] = theta[idx] + drift[idx] + math.sqrt(dt) * rng.standard_normal(idx.size)
        pending[idx] = (proposal[idx] <= BOUNDARY_GUARD) | (proposal[idx] >= math.pi - BOUNDARY_GUARD)
        if pending.any():
            raise _OutsideGuard()

    if pending.any():
        try:
            for trial in Retrying(
                stop=stop_after_attempt(settings.rejection_budget),
                retry=retry_if_exception_type(_OutsideGuard),
                reraise=False,
            ):
                with trial:
                    redraw()
        except RetryError as exc:
            raise RejectionBudgetExceeded(
                f"radial Bessel step left ({BOUNDARY_GUARD}, pi - {BOUNDARY_GUARD}) "
                f"{settings.rejection_budget} times; use a smaller dt (now {dt})"
            ) from exc
    return proposal


def simulate_radial_bessel(a: float, theta0: float, s: float, dt: float, n_samples: int, seed: int) -> np.ndarray:
    """Endpoints at time s of ``n_samples`` guarded Euler-Maruyama paths started at theta0."""
    if not 0.0 < theta0 < math.pi:
        raise ParameterDomainError("theta0", theta0, "(0, pi)")
    if a <= 0 or s <= 0:
        raise ParameterDomainError("a, s", (a, s), "positive values")
    if not 0.0 < dt <= 1e-3 * s:
        raise ParameterDomainError("dt", dt, f"(0, {1e-3 * s:g}]")
    rng = np.random.default_rng(seed)
    n_steps = int(round(s / dt))
    theta = np.full(n_samples, float(theta0))
    for _ in range(n_steps):
        theta = _guarded_step(theta, a, dt, rng)
    logger.debug(f"radial Bessel a={a}: {n_samples} paths, {n_steps} steps")
    return theta


def bessel_drift_regression(
    a: float,
    thetas: Sequence[float] = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5),
    dt: float = 1e-2,
    n_samples: int = 40_000,
    seed: int = 0,
    tolerance: float = 0.10,
) -> Dict:
    """Mean one-step increment over dt against cot(theta0); the slope should be 2a."""
    rng = np.random.default_rng(seed)
    means = []
    for theta0 in thetas:
        start = np.full(n_samples, float(theta0))
        means.append(float(np.mean(_guarded_step(start, a, dt, rng) - start) / dt))
    fit = stats.linregress(1.0 / np.tan(np.asarray(thetas, dtype=float)), means)
    return {
        "slope": float(fit.slope),
        "slope_stderr": float(fit.stderr),
        "intercept": float(fit.intercept),
        "expected": 2.0 * a,
        "passed": abs(fit.slope - 2.0 * a) <= tolerance * 2.0 * a,
    }


def ks_against_density(samples: np.ndarray, spec: BesselDensitySpec, theta0: float) -> Dict:
    test = stats.kstest(samples, density_cdf(spec, theta0))
    return {"ks": float(test.statistic), "p_value": float(test.pvalue), "n": int(np.size(samples))}


# ============================================================================
# H-ODE
# ============================================================================

def _h_terms(kappa: float, theta: np.ndarray):
    p = 8.0 / kappa - 1.0
    s, c = np.sin(theta), np.cos(theta)
    h = s ** p
    dh = p * s ** (p - 1.0) * c
    d2h = p * (p - 1.0) * s ** (p - 2.0) * c ** 2 - p * s ** p
    return h, dh, d2h


def h_ode_check(kappa: float, theta_grid) -> float:
    """max |H'' + (2 - 8/kappa) cot H' + (8/kappa - 1) H| for H = sin^{8/kappa - 1}."""
    theta = np.asarray(theta_grid, dtype=float)
    if theta.min() < 1e-3 or theta.max() > math.pi - 1e-3:
        raise ParameterDomainError("theta_grid", (theta.min(), theta.max()), "[1e-3, pi - 1e-3]")
    h, dh, d2h = _h_terms(kappa, theta)
    residual = d2h + (2.0 - 8.0 / kappa) / np.tan(theta) * dh + (8.0 / kappa - 1.0) * h
    return float(np.max(np.abs(residual)))


def h_ode_integration_check(kappa: float, lo: float = 0.1, hi: float = math.pi - 0.1, n_points: int = 201) -> float:
    """Integrate the ODE from pi/2 with (H, H') = (1, 0) both ways; max deviation from sin^{8/kappa - 1}."""
    b = 2.0 - 8.0 / kappa
    c = 8.0 / kappa - 1.0

    def rhs(t, y):
        return [y[1], -b / math.tan(t) * y[1] - c * y[0]]

    worst = 0.0
    for end in (lo, hi):
        grid = np.linspace(math.pi / 2.0, end, n_points)
        sol = integrate.solve_ivp(rhs, (math.pi / 2.0, end), [1.0, 0.0], method="RK45", t_eval=grid,
                                  rtol=1e-11, atol=1e-13)
        if not sol.success:
            raise CarpetLabError(f"H-ODE integration failed: {sol.message}")
        worst = max(worst, float(np.max(np.abs(sol.y[0] - _h_terms(kappa, sol.t)[0]))))
    return worst
