"""
gmc.py — renormalised LQG measures from lattice fields
======================================================

Area:    mass(cell) = K_area * eps^{gamma^2/2} * exp(gamma h_eps(z)) * cell area
Length:  mass(seg)  = K_len  * eps^{gamma^2/4} * exp(gamma/2 h_eps(mid)) * |seg|

eps is a fixed proxy for the eps -> 0 limit (default: settings.default_eps_cells
grid spacings). The lattice constants K are computed once per (lattice, gamma,
eps) from the exact discrete Green oracle at the domain's reference point:

    K_area: expected area density at the reference point equals r^{gamma^2/2}
    K_len:  expected length density at the reference point equals r^{gamma^2/4}

with r the conformal radius there. Both constants are unchanged when the
lattice, eps and the reference radius are dilated together, so lattice
transport z -> b z rescales areas by b^{gamma Q} and lengths by b^{gamma Q/2}.

Interior curves use the direct circle-average formula; its gap to the
boundary-mapped length is an unknown constant factor.

Generalized quantum length is handled on its own through the jump statistics
of an alpha_hat-stable subordinator with Levy measure C y^{-alpha_hat-1} dy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from core.config import settings
from core.exceptions import ParameterDomainError
from core.grid import SquareGrid
from sampling.gff import GffSample, circle_average_variance, circle_averages, lattice_operator
from sampling.loopsoup import CleSample


# ============================================================================
# NORMALISATION
# ============================================================================

def default_eps(grid: SquareGrid) -> float:
    return settings.default_eps_cells * grid.h


@lru_cache(maxsize=64)
def _reference_variance(n: int, domain, eps: float) -> float:
    op = lattice_operator(n, domain)
    return circle_average_variance(op, domain.reference_point(), eps)


def lattice_constant(field: GffSample, gamma: float, eps: float, kind: str = "area") -> float:
    """K_area or K_len for the lattice carrying ``field`` (1 at gamma = 0)."""
    if gamma == 0:
        return 1.0
    domain = field.domain
    var = _reference_variance(field.grid.n, domain, float(eps))
    log_r = math.log(float(domain.conformal_radius(domain.reference_point())))
    if kind == "area":
        return math.exp(gamma ** 2 / 2.0 * (log_r + math.log(1.0 / eps) - var))
    if kind == "length":
        return math.exp(gamma ** 2 / 4.0 * (log_r + math.log(1.0 / eps)) - gamma ** 2 / 8.0 * var)
    raise ValueError(f"unknown kind {kind!r}")


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 2.0:
        raise ParameterDomainError("gamma", gamma, "[0, 2)")


def _check_eps(field: GffSample, eps: float) -> None:
    if eps < 2.0 * field.grid.h:
        raise ParameterDomainError("eps", eps, f">= 2 grid spacings ({2.0 * field.grid.h:.4g})")


# ============================================================================
# AREA
# ============================================================================

@dataclass
class GmcMeasure:
    cell_masses: np.ndarray
    gamma: float
    eps: float
    field_seed: Optional[int]
    grid: SquareGrid
    normalization: float

    @property
    def total(self) -> float:
        return float(self.cell_masses.sum())

    def to_frame(self) -> pd.DataFrame:
        z = self.grid.centers()
        rows, cols = np.nonzero(self.cell_masses)
        return pd.DataFrame({
            "row": rows, "col": cols, "x": z.real[rows, cols], "y": z.imag[rows, cols],
            "mass": self.cell_masses[rows, cols],
        })


def _clipped_radii(field: GffSample, z: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(eps, field.domain.distance_to_boundary(z))


def gmc_area(field: GffSample, gamma: float, eps: Optional[float] = None) -> GmcMeasure:
    """
    gamma-LQG area masses per cell.

    Near the boundary the circle radius is clipped to the distance to the
    boundary, and that clipped radius enters the eps prefactor as well.
    gamma = 0 returns the cell areas exactly.
    """
    _check_gamma(gamma)
    eps = default_eps(field.grid) if eps is None else eps
    _check_eps(field, eps)
    grid = field.grid
    mask = field.domain.mask(grid)
    masses = np.zeros(mask.shape)
    if gamma == 0:
        masses[mask] = grid.cell_area
        return GmcMeasure(masses, gamma, eps, field.seed, grid, 1.0)
    z = grid.centers()[mask]
    radii = _clipped_radii(field, z, eps)
    havg = circle_averages(field, z, radii)
    K = lattice_constant(field, gamma, eps, "area")
    masses[mask] = K * radii ** (gamma ** 2 / 2.0) * np.exp(gamma * havg) * grid.cell_area
    return GmcMeasure(masses, gamma, eps, field.seed, grid, K)


def expected_cell_mass(field: GffSample, gamma: float, eps: float, points) -> np.ndarray:
    """
    Exact E[mass] at the cells containing ``points`` for this lattice:
    K * eps_eff^{gamma^2/2} * exp(gamma^2/2 Var h_eps_eff) * cell area.
    """
    grid = field.grid
    op = lattice_operator(grid.n, field.domain)
    rows, cols = grid.index_of(points)
    centers = grid.centers()[rows, cols]
    K = lattice_constant(field, gamma, eps, "area")
    out = []
    for z in np.atleast_1d(centers):
        r = float(min(eps, field.domain.distance_to_boundary(z)))
        var = circle_average_variance(op, z, r)
        out.append(K * r ** (gamma ** 2 / 2.0) * math.exp(gamma ** 2 / 2.0 * var) * grid.cell_area)
    return np.asarray(out)


# ============================================================================
# CURVE LENGTH
# ============================================================================

@dataclass
class CurveLengthMeasure:
    segment_masses: np.ndarray
    gamma: float
    eps: float
    cleared: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return float(self.segment_masses.sum())

    def concatenate(self, other: "CurveLengthMeasure") -> "CurveLengthMeasure":
        if (self.gamma, self.eps) != (other.gamma, other.eps):
            raise ValueError("cannot join length measures with different gamma or eps")
        return CurveLengthMeasure(np.concatenate([self.segment_masses, other.segment_masses]), self.gamma, self.eps)


def length_masses(field: GffSample, mids: np.ndarray, lengths: np.ndarray, gamma: float, eps: float) -> np.ndarray:
    """K_len eps^{gamma^2/4} exp(gamma/2 h_eps(mid)) |seg| for segments already cleared by eps."""
    if gamma == 0 or mids.size == 0:
        return np.asarray(lengths, dtype=float).copy()
    K = lattice_constant(field, gamma, eps, "length")
    havg = circle_averages(field, mids, eps)
    return K * eps ** (gamma ** 2 / 4.0) * np.exp(0.5 * gamma * havg) * lengths


def polyline_segments(polyline) -> Tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(polyline, dtype=complex)
    if pts.size < 2:
        return np.zeros(0, dtype=complex), np.zeros(0)
    return 0.5 * (pts[:-1] + pts[1:]), np.abs(np.diff(pts))


def quantum_curve_length(
    field: GffSample,
    polyline,
    gamma: float,
    eps: Optional[float] = None,
    skip_uncleared: bool = False,
) -> CurveLengthMeasure:
    """
    Per-segment quantum lengths, evaluated at segment midpoints.

    Every midpoint needs eps clearance from the boundary; otherwise a
    ParameterDomainError names the first offending segment, or, with
    ``skip_uncleared``, those segments get zero mass and are flagged.
    """
    _check_gamma(gamma)
    eps = default_eps(field.grid) if eps is None else eps
    _check_eps(field, eps)
    mids, lengths = polyline_segments(polyline)
    cleared = field.domain.distance_to_boundary(mids) >= eps
    if not cleared.all() and not skip_uncleared:
        bad = int(np.flatnonzero(~cleared)[0])
        raise ParameterDomainError("polyline", f"segment {bad}", f"segments with clearance >= eps={eps:.4g}")
    masses = np.zeros(mids.size)
    masses[cleared] = length_masses(field, mids[cleared], lengths[cleared], gamma, eps)
    return CurveLengthMeasure(masses, gamma, eps, cleared)


@dataclass
class LoopLengthTable:
    lengths: Dict[int, float]
    segment_masses: Dict[int, np.ndarray]
    excluded: List[int]
    gamma: float
    eps: float
    metadata: Dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"loop_id": list(self.lengths), "length": list(self.lengths.values())})

    def scaled(self, factor: float) -> "LoopLengthTable":
        return LoopLengthTable(
            {k: v * factor for k, v in self.lengths.items()},
            {k: v * factor for k, v in self.segment_masses.items()},
            list(self.excluded), self.gamma, self.eps, dict(self.metadata),
        )


def loop_quantum_lengths(field: GffSample, cle: CleSample, gamma: float, eps: Optional[float] = None) -> LoopLengthTable:
    """
    Quantum length of every CLE outer boundary.

    Loops with a segment closer than eps to the domain boundary are tagged
    boundary-adjacent and left out; their count goes to the metadata.
    """
    _check_gamma(gamma)
    eps = default_eps(field.grid) if eps is None else eps
    _check_eps(field, eps)
    loop_ids, mids_all, lens_all = [], [], []
    excluded: List[int] = []
    for loop_id, boundary in enumerate(cle.outer_boundaries):
        mids, lens = polyline_segments(boundary)
        if mids.size == 0:
            excluded.append(loop_id)
            continue
        if np.any(field.domain.distance_to_boundary(mids) < eps):
            excluded.append(loop_id)
            continue
        loop_ids.append(loop_id)
        mids_all.append(mids)
        lens_all.append(lens)

    lengths: Dict[int, float] = {}
    segment_masses: Dict[int, np.ndarray] = {}
    if loop_ids:
        mids = np.concatenate(mids_all)
        lens = np.concatenate(lens_all)
        masses = length_masses(field, mids, lens, gamma, eps)
        splits = np.cumsum([m.size for m in mids_all])[:-1]
        for loop_id, chunk in zip(loop_ids, np.split(masses, splits)):
            segment_masses[loop_id] = chunk
            lengths[loop_id] = float(chunk.sum())
    if excluded:
        logger.debug(f"{len(excluded)} boundary-adjacent loops excluded from quantum lengths")
    return LoopLengthTable(lengths, segment_masses, excluded, gamma, eps, {"boundary_adjacent": len(excluded)})


def rank_stability(a: Dict[int, float], b: Dict[int, float], top: int = 10) -> int:
    """Largest rank displacement of ``a``'s top loops when re-ranked by ``b``."""
    rank_a = sorted(a, key=a.get, reverse=True)[:top]
    order_b = sorted(b, key=b.get, reverse=True)
    position = {k: i for i, k in enumerate(order_b)}
    return max((abs(position.get(k, len(order_b)) - i) for i, k in enumerate(rank_a)), default=0)


def coordinate_change_lengths(
    field: GffSample,
    polyline,
    gamma: float,
    eps: float,
    b: float,
) -> Tuple[float, float]:
    """
    Length of a polyline P under (D, h) and of bP under the dilated pair
    (bD, h o phi^{-1} + Q log|(phi^{-1})'|), both with circle radius eps.

    On bD the circle of radius eps around b m averages h over radius eps/b
    around m, and the Q term contributes b^{-gamma Q/2} = b^{-(1 + gamma^2/4)}.
    The lattice constant of the dilated pair is that of the original lattice
    at eps/b. For gamma = 0 the two lengths agree exactly.
    """
    _check_gamma(gamma)
    mids, lengths = polyline_segments(polyline)
    original = quantum_curve_length(field, polyline, gamma, eps).total
    small = eps / b
    _check_eps(field, small)
    if np.any(field.domain.distance_to_boundary(mids) < small):
        raise ParameterDomainError("polyline", "mapped segments", f"clearance >= eps/b={small:.4g}")
    gq2 = 1.0 + gamma ** 2 / 4.0
    K_hat = lattice_constant(field, gamma, small, "length")
    havg = circle_averages(field, mids, small)
    mapped = K_hat * eps ** (gamma ** 2 / 4.0) * np.exp(0.5 * gamma * havg) * b ** (1.0 - gq2) * lengths
    return original, float(mapped.sum())


# ============================================================================
# STABLE JUMPS (GENERALIZED QUANTUM LENGTH)
# ============================================================================

@dataclass
class StableJumpRecord:
    """Jumps of size >= floor of an alpha_hat-stable subordinator on [0, T]."""
    alpha_hat: float
    horizon: float
    floor: float
    C: float
    seed: int
    sizes: np.ndarray
    times: np.ndarray

    def count_in(self, lo: float, hi: float = math.inf) -> int:
        return int(np.count_nonzero((self.sizes >= lo) & (self.sizes < hi)))


def expected_jump_count(alpha_hat: float, T: float, lo: float, hi: float = math.inf, C: float = 1.0) -> float:
    """C T (lo^{-alpha_hat} - hi^{-alpha_hat}) / alpha_hat."""
    upper = 0.0 if math.isinf(hi) else hi ** (-alpha_hat)
    return C * T * (lo ** (-alpha_hat) - upper) / alpha_hat


def sample_stable_jumps(alpha_hat: float, T: float, floor: float, C: float = 1.0, seed: int = 0) -> StableJumpRecord:
    """Poisson(C T floor^{-alpha_hat}/alpha_hat) jumps, sizes Pareto(alpha_hat) above floor."""
    if not 1.0 < alpha_hat < 2.0:
        raise ParameterDomainError("alpha_hat", alpha_hat, "(1, 2)")
    if floor <= 0:
        raise ParameterDomainError("floor", floor, "(0, inf)")
    if T < 0:
        raise ParameterDomainError("T", T, "[0, inf)")
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(expected_jump_count(alpha_hat, T, floor, C=C))) if T > 0 else 0
    u = 1.0 - rng.random(count)
    sizes = floor * u ** (-1.0 / alpha_hat)
    times = np.sort(rng.random(count) * T)
    return StableJumpRecord(alpha_hat, T, floor, C, seed, sizes, times)


def generalized_quantum_length(record: StableJumpRecord, eps: float) -> float:
    """eps^{alpha_hat} times the number of jumps with size in [eps, 2 eps)."""
    if eps < record.floor:
        raise ParameterDomainError("eps", eps, f">= floor={record.floor}")
    return eps ** record.alpha_hat * record.count_in(eps, 2.0 * eps)


def shift_stable_record(record: StableJumpRecord, shift: float, gamma: float) -> StableJumpRecord:
    """Field shift by a constant: every jump (a bubble length) scales by e^{gamma shift/2}."""
    factor = math.exp(0.5 * gamma * shift)
    return StableJumpRecord(record.alpha_hat, record.horizon, record.floor * factor, record.C, record.seed,
                            record.sizes * factor, record.times.copy())


def stable_scaling_check(
    alpha_hat: float,
    eps_values,
    T: float = 1.0,
    C: float = 1.0,
    n_replicas: int = 50,
    seed: int = 0,
) -> pd.DataFrame:
    """
    eps^{alpha_hat} E[N_eps] across eps, N_eps = number of jumps >= eps.

    Returns one row per eps with the replica mean count, its standard error,
    the normalized value, the Levy-integral oracle and the ratio to the value
    at the largest eps.
    """
    eps_values = sorted(eps_values, reverse=True)
    floor = min(eps_values)
    counts = np.zeros((n_replicas, len(eps_values)))
    for r in range(n_replicas):
        record = sample_stable_jumps(alpha_hat, T, floor, C, seed + r)
        counts[r] = [record.count_in(e) for e in eps_values]
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(n_replicas)
    eps_arr = np.asarray(eps_values)
    normalized = eps_arr ** alpha_hat * mean
    oracle = np.array([expected_jump_count(alpha_hat, T, e, C=C) for e in eps_values])
    frame = pd.DataFrame({
        "eps": eps_arr,
        "mean_count": mean,
        "stderr": se,
        "normalized": normalized,
        "normalized_stderr": eps_arr ** alpha_hat * se,
        "oracle_count": oracle,
        "z_oracle": np.where(se > 0, (mean - oracle) / np.where(se > 0, se, 1.0), 0.0),
    })
    frame["ratio_to_first"] = frame["normalized"] / frame["normalized"].iloc[0]
    return frame
