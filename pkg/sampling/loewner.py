"""
loewner.py — chordal Loewner machinery
======================================

Forward and reverse Loewner flows, SLE and SLE_kappa(rho) drivers, zipper
trace extraction.

The driver is treated as piecewise constant: on (t_{k-1}, t_k] it equals
W_k = values[k]. With a constant driver the Loewner equation is solved in
closed form by the vertical-slit map

    g  ->  W + sqrt((g - W)^2 + 4 dt)

so every step (forward, reverse or inverse) is exact for the discretized
driver and the only error is the discretization of W itself.

Public API
──────────
    sample_sle_driving(params, dt, n_steps, seed)                 → DrivingFunction
    sample_sle_kappa_rho_driving(params, rhos, force_points, ...) → (DrivingFunction, ForcePointState)
    solve_forward(driving, z, t)                                  → complex | Swallowed
    solve_reverse(driving, z, t)                                  → complex
    zip_up(driving, t, z)                                         → complex   (f_t(z + W_t))
    trace_from_driving(driving, stride=1)                         → LoewnerTrace
    unzip_trace(driving, s)                                       → LoewnerTrace
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from core.config import settings
from core.exceptions import HorizonError, ParameterDomainError
from core.models import SleParams


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass(frozen=True)
class DrivingFunction:
    """Discretized driver W on a capacity-time grid (hcap = 2t)."""
    times: np.ndarray
    values: np.ndarray
    kappa: float
    stopped_at_threshold: Optional[float] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.size == 0 or times.size != values.size:
            raise ValueError("times and values must be nonempty 1-d arrays of equal length")
        if times[0] != 0.0:
            raise ValueError("driving times must start at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("driving times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("driving values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def value_at(self, t: float) -> float:
        """W on the step containing t (right-end convention)."""
        if t <= 0:
            return float(self.values[0])
        k = int(np.searchsorted(self.times, t, side="left"))
        return float(self.values[min(k, self.n_steps)])

    def grid_index(self, s: float) -> int:
        """Index of the grid time equal to ``s``."""
        k = int(np.searchsorted(self.times, s - 1e-12 * max(1.0, s)))
        if k > self.n_steps or abs(self.times[k] - s) > 1e-12 * max(1.0, s):
            raise ParameterDomainError("s", s, "grid times of the driver")
        return k

    def shifted(self, s: float) -> "DrivingFunction":
        """The driver W_{s+.} - W_s, defined from a grid time s."""
        k = self.grid_index(s)
        return DrivingFunction(
            times=self.times[k:] - self.times[k],
            values=self.values[k:] - self.values[k],
            kappa=self.kappa,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "w": self.values})


@dataclass(frozen=True)
class LoewnerTrace:
    """Tip positions eta(t_k) in the closed upper half-plane."""
    points: np.ndarray
    times: np.ndarray
    kappa: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "re": self.points.real, "im": self.points.imag})

    def scaled(self, b: float) -> "LoewnerTrace":
        """Image under z -> b z; capacity times scale by b^2."""
        return LoewnerTrace(points=self.points * b, times=self.times * b * b, kappa=self.kappa)


@dataclass
class ForcePointState:
    """Force points V^j and their weights rho_j at the end of an integration."""
    positions: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class Swallowed:
    """Verdict of solve_forward: the point left the domain at ``time``."""
    time: float


# ============================================================================
# BRANCH HELPERS
# ============================================================================

def _upper_sqrt(u: np.ndarray, hint: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Square root in the closed upper half-plane.

    When the root is real the sign follows ``hint`` (the sign of Re(g - W)),
    so real points stay on their side of the driver.
    """
    r = np.sqrt(np.asarray(u, dtype=complex))
    r = np.where(r.imag < 0, -r, r)
    if hint is not None:
        sign = np.where(np.real(hint) < 0, -1.0, 1.0)
        r = np.where(r.imag == 0, sign * np.abs(r.real), r)
    return r


def _im_sqrt(v: np.ndarray) -> np.ndarray:
    """|Im sqrt(v)| without branch bookkeeping."""
    return np.sqrt(np.maximum(0.0, 0.5 * (np.abs(v) - v.real)))


def _bisect_swallow(u: np.ndarray, dt: float, tol: np.ndarray, iterations: int = 80) -> np.ndarray:
    """Step-local time at which Im sqrt(u + 4 tau) drops to ``tol``."""
    lo = np.zeros(u.shape)
    hi = np.full(u.shape, dt)
    already = _im_sqrt(u) < tol
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = _im_sqrt(u + 4.0 * mid) < tol
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return np.where(already, 0.0, hi)


def _check_time(driving: DrivingFunction, t: float) -> None:
    if t < 0 or t > driving.horizon * (1.0 + 1e-12) + 1e-15:
        raise HorizonError(t, driving.horizon)


# ============================================================================
# FORWARD / REVERSE FLOWS
# ============================================================================

def forward_flow(driving: DrivingFunction, z, t: float):
    """
    Vectorized forward flow g_t on an array of points.

    Returns ``(values, swallow_times)``; swallow_times is NaN for points still
    in the domain at time t.
    """
    _check_time(driving, t)
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if np.any(z.imag < 0):
        raise ParameterDomainError("z", z[z.imag < 0][0], "closed upper half-plane")
    w0 = driving.values[0]
    real = z.imag == 0
    if np.any(real & (z.real == w0)):
        raise ParameterDomainError("z", w0, "real points distinct from W_0")

    g = z.copy()
    swallowed = np.full(z.shape, np.nan)
    tol = settings.swallow_tolerance * np.maximum(1.0, np.abs(z))
    side = np.where(z.real >= w0, 1.0, -1.0)
    alive = ~((~real) & (z.imag < tol))
    swallowed[~alive] = 0.0
    slack = 1e-9 * max(1.0, t)

    times, values = driving.times, driving.values
    for k in range(1, driving.n_steps + 1):
        t_prev = times[k - 1]
        if t_prev >= t:
            break
        dt = min(times[k], t) - t_prev
        w = values[k]

        on_line = alive & real
        if on_line.any():
            crossed = on_line & ((g.real - w) * side <= 0)
            swallowed[crossed] = t_prev
            alive &= ~crossed
            on_line &= ~crossed
            d = g.real[on_line] - w
            g[on_line] = w + side[on_line] * np.sqrt(d * d + 4.0 * dt)

        interior = alive & ~real
        if interior.any():
            idx = np.flatnonzero(interior)
            u = (g[idx] - w) ** 2
            g_end = w + _upper_sqrt(u + 4.0 * dt)
            low = g_end.imag < tol[idx]
            if low.any():
                hit_idx = idx[low]
                when = t_prev + _bisect_swallow(u[low], dt, tol[hit_idx])
                hit = when < t - slack
                swallowed[hit_idx[hit]] = when[hit]
                alive[hit_idx[hit]] = False
            g[idx] = g_end

    return g, swallowed


def solve_forward(driving: DrivingFunction, z: complex, t: float) -> Union[complex, Swallowed]:
    """
    g_t(z), or Swallowed(T_z) once Im g_s(z) drops below the swallow tolerance.

    Tolerance is ``settings.swallow_tolerance * max(1, |z|)``; real points are
    swallowed when the driver crosses their image.
    """
    if t == 0:
        _check_time(driving, t)
        return complex(z)
    values, swallowed = forward_flow(driving, [z], t)
    if not np.isnan(swallowed[0]):
        return Swallowed(float(swallowed[0]))
    return complex(values[0])


def solve_reverse(driving: DrivingFunction, z, t: float):
    """
    Centered reverse flow  df = -2/f dt - dW, started at f_0 = z.

    Each step applies the exact slit flow and then the driver increment; the
    imaginary part is strictly increasing. Accepts a scalar or an array of z.
    """
    _check_time(driving, t)
    scalar = np.ndim(z) == 0
    f = np.atleast_1d(np.asarray(z, dtype=complex)).copy()
    if np.any(f.imag <= 0):
        raise ParameterDomainError("z", f[f.imag <= 0][0], "open upper half-plane")
    times, values = driving.times, driving.values
    for k in range(1, driving.n_steps + 1):
        t_prev = times[k - 1]
        if t_prev >= t:
            break
        full = times[k] - t_prev
        dt = min(times[k], t) - t_prev
        dw = (values[k] - values[k - 1]) * (dt / full)
        f = _upper_sqrt(f * f - 4.0 * dt) - dw
    return complex(f[0]) if scalar else f


def zip_up(driving: DrivingFunction, t: float, z):
    """
    The centered forward inverse f_t(z + W_t) - W_0, with f_t = g_t^{-1}.

    For a Brownian driver this has the same law as ``solve_reverse(z, t)``.
    """
    _check_time(driving, t)
    scalar = np.ndim(z) == 0
    w = np.atleast_1d(np.asarray(z, dtype=complex)) + driving.value_at(t)
    times, values = driving.times, driving.values
    last = int(np.searchsorted(times, t, side="left"))
    for k in range(min(last, driving.n_steps), 0, -1):
        dt = min(times[k], t) - times[k - 1]
        if dt <= 0:
            continue
        wk = values[k]
        w = wk + _upper_sqrt((w - wk) ** 2 - 4.0 * dt, w - wk)
    w = w - values[0]
    return complex(w[0]) if scalar else w


# ============================================================================
# DRIVERS
# ============================================================================

def _kappa_of(params: Union[SleParams, float]) -> float:
    kappa = params.kappa if isinstance(params, SleParams) else float(params)
    if not (0.0 <= kappa < 8.0):
        raise ParameterDomainError("kappa", kappa, "[0, 8)")
    return kappa


def _check_grid(dt: float, n_steps: int) -> None:
    if not dt > 0:
        raise ParameterDomainError("dt", dt, "(0, inf)")
    if n_steps < 1:
        raise ParameterDomainError("n_steps", n_steps, ">= 1")


def sample_sle_driving(params: Union[SleParams, float], dt: float, n_steps: int, seed: int) -> DrivingFunction:
    """W = sqrt(kappa) B on a uniform grid; increments N(0, kappa dt)."""
    kappa = _kappa_of(params)
    _check_grid(dt, n_steps)
    rng = np.random.default_rng(seed)
    increments = rng.standard_normal(n_steps) * math.sqrt(kappa * dt)
    values = np.concatenate(([0.0], np.cumsum(increments)))
    times = dt * np.arange(n_steps + 1)
    return DrivingFunction(times=times, values=values, kappa=kappa)


def sample_sle_kappa_rho_driving(
    params: Union[SleParams, float],
    rhos: Sequence[float],
    force_points: Sequence[complex],
    dt: float,
    n_steps: int,
    seed: int,
):
    """
    Euler–Maruyama integration of SLE_kappa(rho).

        dW = sum_j rho_j Re(1/(W - V^j)) dt + sqrt(kappa) dB
        dV^j = 2/(V^j - W) dt

    The Gaussian increments are drawn exactly as in ``sample_sle_driving`` so
    zero weights reproduce the plain path bit for bit. Real force points at W
    (a start at 0+) collide; when the colliding weights sum to <= -2 the
    integration stops and the driver is flagged, otherwise the colliding
    points are pushed off by one exact Loewner step. A real force point that
    numerically crosses W is snapped onto it and treated as colliding.
    """
    kappa = _kappa_of(params)
    _check_grid(dt, n_steps)
    weights = np.asarray(rhos, dtype=float)
    positions = np.asarray(force_points, dtype=complex).copy()
    if weights.shape != positions.shape:
        raise ValueError("rhos and force_points must have the same length")
    if np.any(positions.imag < 0):
        raise ParameterDomainError("force_points", positions[positions.imag < 0][0], "closed upper half-plane")

    rng = np.random.default_rng(seed)
    increments = rng.standard_normal(n_steps) * math.sqrt(kappa * dt)

    real_fp = positions.imag == 0
    side = np.where(positions.real >= 0.0, 1.0, -1.0)
    collision_tol = 1e-12
    push = 2.0 * math.sqrt(dt)

    values = [0.0]
    w = 0.0
    stopped = None
    for k in range(n_steps):
        colliding = real_fp & (np.abs(positions.real - w) <= collision_tol)
        if colliding.any():
            if weights[colliding].sum() <= -2.0:
                stopped = k * dt
                logger.debug(f"SLE_kappa(rho) stopped at the continuation threshold, t={stopped:.6g}")
                break
            positions[colliding] = w + side[colliding] * push

        drift = float(np.sum(weights * np.real(1.0 / (w - positions)))) if weights.size else 0.0
        w_next = w + drift * dt + increments[k]
        positions = positions + 2.0 * dt / (positions - w)

        crossed = real_fp & ((positions.real - w_next) * side < 0)
        positions[crossed] = w_next
        w = w_next
        values.append(w)

    times = dt * np.arange(len(values))
    driving = DrivingFunction(times=times, values=np.asarray(values), kappa=kappa, stopped_at_threshold=stopped)
    return driving, ForcePointState(positions=positions, weights=weights)


# ============================================================================
# TRACES
# ============================================================================

def trace_from_driving(driving: DrivingFunction, stride: int = 1) -> LoewnerTrace:
    """
    Tips eta(t_k) = F_1 o ... o F_k (W_k) with F_j the inverse slit map
    w -> W_j + sqrt((w - W_j)^2 - 4 dt_j).

    O(n^2) in the number of steps; ``stride`` keeps every stride-th tip (the
    final tip is always kept).
    """
    if stride < 1:
        raise ParameterDomainError("stride", stride, ">= 1")
    n = driving.n_steps
    idx = np.arange(0, n + 1, stride)
    if idx[-1] != n:
        idx = np.append(idx, n)
    values = driving.values
    dts = np.diff(driving.times)
    tips = values[idx].astype(complex)
    for j in range(n, 0, -1):
        start = int(np.searchsorted(idx, j))
        if start == idx.size:
            continue
        w = tips[start:]
        tips[start:] = values[j] + _upper_sqrt((w - values[j]) ** 2 - 4.0 * dts[j - 1], w - values[j])
    return LoewnerTrace(points=tips, times=driving.times[idx], kappa=driving.kappa)


def unzip_trace(driving: DrivingFunction, s: float, stride: int = 1) -> LoewnerTrace:
    """Trace of the shifted driver, i.e. the curve g_s(eta[s, T]) - W_s."""
    return trace_from_driving(driving.shifted(s), stride=stride)
