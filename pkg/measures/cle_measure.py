"""
cle_measure.py — the conformally covariant carpet measure
========================================================

Xi(dz) = F_D(z) * E[ Lambda(dz) | Gamma ],   F_D(z) = r_D(z)^{-(1/2 + 2/kappa + kappa/32)}

For kappa in (8/3, 4) Lambda is the fixed-eps counting measure: every CLE loop
whose quantum length is at least eps carries an atom eps^{alpha + 1/2} at a
marked point drawn uniformly from its quantum length (inverse CDF over the
per-segment masses, ties broken by segment order). Atoms are moved to the
nearest carpet cell off the boundary ring, so the measure lives on the carpet
and vanishes on the ring by construction.

A CarpetMeasure keeps its deposits in long form (sample, row, col, loop,
support, pre, mass): samples are fields for a single CLE and CLE draws once
measures are aggregated. Box masses, standard errors and support checks are
all computed from that table.

Public API
──────────
    estimate_xi(cle, n_fields, params, eps, seed, ...)      → CarpetMeasure
    aggregate_measures(measures)                            → CarpetMeasure
    pushforward_covariant(measure, phi, d)                  → CarpetMeasure
    disk_intensity_reference(z, d, C)                       → float | ndarray
    disk_reference_covariance_residual(n_pairs, d, seed)    → float
    radial_intensity_fit(measure, d)                        → dict
    shift_scaling_check(cle, params, eps, C, seed)          → dict
    cle4_measure_via_coupling(c_sequence, n_fields, seed)   → (list[CarpetMeasure], dict)
    reference_loop_profile(cle, measure, radii)             → dict | None
    loop_mass_vanishing_test(kappa, n_replicas, radii, seed) → LoopMassReport
    uniqueness_normalization_check(run_a, run_b, boxes)     → UniquenessReport
    rotation_equivariance_test(kappa, n_replicas, seed)     → dict
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from core.config import settings
from core.exceptions import ParameterDomainError
from core.grid import DiskDomain, SquareGrid, boundary_ring, densify_polyline
from core.models import MarkedPointRule, NormalizationMode, SleParams
from core.params import carpet_dimension, derive_params, invert_soup_intensity, loop_soup_intensity
from core.seeding import (
    STREAM_FIELDS,
    STREAM_MARKED_POINTS,
    STREAM_SOUP,
    STREAM_THINNING,
    derive_seed,
    spawn_seeds,
)
from measures.gmc import loop_quantum_lengths, polyline_segments
from pipeline.runner import run_replicas
from sampling.gff import GffSample, sample_gff_batch
from sampling.loopsoup import (
    CleSample,
    LoopSoup,
    carpet_from_clusters,
    cluster_loops,
    default_t_min,
    rotate_soup,
    sample_loop_soup,
    thin_soup,
)

Box = Tuple[float, float, float, float]
DEPOSIT_COLUMNS = ["sample", "row", "col", "loop", "support", "pre", "mass"]

# kappa = 4 sits at gamma = 2, outside the GMC range; the last coupling level
# is measured at 4 - COUPLING_PROXY_DELTA and reported with d(4).
COUPLING_PROXY_DELTA = 1e-2


# ============================================================================
# MEASURE
# ============================================================================

@dataclass
class CarpetMeasure:
    masses: np.ndarray
    pre_weight: np.ndarray
    stderr: np.ndarray
    deposits: pd.DataFrame
    n_samples: int
    supports: List[np.ndarray]
    kappa: float
    eps: float
    n_fields: int
    grid: SquareGrid
    normalization: NormalizationMode = NormalizationMode.RAW
    seeds: List[int] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @property
    def carpet(self) -> np.ndarray:
        return self.supports[0]

    def per_sample(self, cells: Optional[np.ndarray] = None, column: str = "mass") -> np.ndarray:
        d = self.deposits
        if cells is not None:
            d = d[cells[d["row"].to_numpy(dtype=np.int64), d["col"].to_numpy(dtype=np.int64)]]
        sums = np.zeros(self.n_samples)
        np.add.at(sums, d["sample"].to_numpy(dtype=np.int64), d[column].to_numpy(dtype=float))
        return sums

    def _mean_se(self, values: np.ndarray) -> Tuple[float, float]:
        if self.n_samples < 2:
            return float(values.mean()), 0.0
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(self.n_samples))

    @property
    def total_stderr(self) -> float:
        return self._mean_se(self.per_sample())[1]

    def box_mass(self, box: Box) -> Tuple[float, float]:
        return self._mean_se(self.per_sample(self.grid.box_mask(box)))

    def support_violation_mass(self) -> float:
        """Deposited mass sitting outside the carpet support it was built on."""
        d = self.deposits
        if d.empty:
            return 0.0
        ok = np.array([
            self.supports[s][r, c]
            for s, r, c in zip(d["support"].to_numpy(dtype=np.int64), d["row"].to_numpy(dtype=np.int64),
                               d["col"].to_numpy(dtype=np.int64))
        ])
        return float(d["mass"].to_numpy()[~ok].sum())

    def normalized(self) -> "CarpetMeasure":
        """Masses divided by the total, so the expected total is one."""
        total = self.total
        if total <= 0:
            raise ParameterDomainError("measure", total, "a positive total mass")
        deposits = self.deposits.copy()
        deposits[["pre", "mass"]] = deposits[["pre", "mass"]] / total
        return replace(self, masses=self.masses / total, pre_weight=self.pre_weight / total,
                       stderr=self.stderr / total, deposits=deposits, normalization=NormalizationMode.UNIT)

    def to_frame(self) -> pd.DataFrame:
        z = self.grid.centers()
        rows, cols = np.nonzero(self.masses)
        return pd.DataFrame({
            "row": rows, "col": cols, "x": z.real[rows, cols], "y": z.imag[rows, cols],
            "value": self.masses[rows, cols], "stderr": self.stderr[rows, cols],
        })

    def describe(self) -> Dict:
        return {
            "kappa": self.kappa,
            "eps": self.eps,
            "n_fields": self.n_fields,
            "n_samples": self.n_samples,
            "normalization": self.normalization.value,
            "seeds": list(self.seeds),
            "total": self.total,
            "total_stderr": self.total_stderr,
            **self.metadata,
        }


def _empty_deposits() -> pd.DataFrame:
    return pd.DataFrame({c: np.zeros(0, dtype=float if c in ("pre", "mass") else np.int64) for c in DEPOSIT_COLUMNS})


def _build(deposits: pd.DataFrame, n_samples: int, grid: SquareGrid, **kwargs) -> CarpetMeasure:
    shape = (grid.n, grid.n)
    r = deposits["row"].to_numpy(dtype=np.int64)
    c = deposits["col"].to_numpy(dtype=np.int64)
    sample = deposits["sample"].to_numpy(dtype=np.int64)
    mass = deposits["mass"].to_numpy(dtype=float)
    pre = deposits["pre"].to_numpy(dtype=float)
    masses = np.zeros(shape)
    pre_weight = np.zeros(shape)
    np.add.at(masses, (r, c), mass)
    np.add.at(pre_weight, (r, c), pre)
    masses /= n_samples
    pre_weight /= n_samples

    stderr = np.zeros(shape)
    if n_samples > 1 and len(deposits):
        cell_sample = (r * grid.n + c) * n_samples + sample
        keys, inverse = np.unique(cell_sample, return_inverse=True)
        sums = np.bincount(inverse, weights=mass)
        squares = np.zeros(shape)
        cells = keys // n_samples
        np.add.at(squares.reshape(-1), cells, sums * sums)
        var = np.maximum(squares - n_samples * masses ** 2, 0.0) / (n_samples - 1)
        stderr = np.sqrt(var / n_samples)
    return CarpetMeasure(masses=masses, pre_weight=pre_weight, stderr=stderr, deposits=deposits,
                         n_samples=n_samples, grid=grid, **kwargs)


# ============================================================================
# ESTIMATOR
# ============================================================================

def _marked_point(polyline: np.ndarray, weights: np.ndarray, u: float) -> complex:
    """Point at fraction u of the cumulative weight along the polyline."""
    cum = np.cumsum(weights)
    target = u * cum[-1]
    k = min(int(np.searchsorted(cum, target, side="right")), weights.size - 1)
    before = cum[k - 1] if k > 0 else 0.0
    frac = 0.0 if weights[k] == 0 else (target - before) / weights[k]
    return complex(polyline[k] + min(max(frac, 0.0), 1.0) * (polyline[k + 1] - polyline[k]))


def carpet_support(cle: CleSample) -> np.ndarray:
    """Carpet cells off the domain's boundary ring."""
    return cle.carpet & ~boundary_ring(cle.domain_mask)


def estimate_xi(
    cle: CleSample,
    n_fields: int,
    params: SleParams,
    eps: float,
    seed: int,
    field_resolution: Optional[int] = None,
    field_eps: Optional[float] = None,
    marked_point: MarkedPointRule = MarkedPointRule.QUANTUM,
    field_shift: float = 0.0,
    fields: Optional[Sequence[GffSample]] = None,
) -> CarpetMeasure:
    """
    Xi for one CLE sample, averaged over ``n_fields`` independent fields.

    Fields come from ``seed`` unless passed in; ``field_shift`` adds a
    constant to every field. Marked points draw from the child seeds
    (seed, MARKED_POINTS, field index).
    """
    kappa = params.kappa
    if not 8.0 / 3.0 < kappa < 4.0:
        raise ParameterDomainError("kappa", kappa, "(8/3, 4)")
    if n_fields < 1:
        raise ParameterDomainError("n_fields", n_fields, ">= 1")
    if not eps > 0:
        raise ParameterDomainError("eps", eps, "(0, inf)")
    marked_point = MarkedPointRule(marked_point)

    grid = cle.grid
    domain = DiskDomain()
    if fields is None:
        resolution = min(field_resolution or grid.n, settings.max_gff_size)
        fields = sample_gff_batch(resolution, n_fields, seed, domain)
    else:
        fields = list(fields)[:n_fields]
        if len(fields) < n_fields:
            raise ParameterDomainError("fields", len(fields), f">= n_fields={n_fields}")
    if field_shift:
        fields = [f.shifted(field_shift) for f in fields]

    support = carpet_support(cle)
    if support.any():
        _, (near_r, near_c) = ndimage.distance_transform_edt(~support, return_indices=True)
    atom = eps ** (params.alpha + 0.5)
    centers = grid.centers()

    rows: List[Dict] = []
    excluded = 0
    for k, f in enumerate(fields):
        table = loop_quantum_lengths(f, cle, params.gamma, field_eps)
        excluded = max(excluded, len(table.excluded))
        rng = np.random.default_rng(derive_seed(seed, STREAM_MARKED_POINTS, k))
        for loop_id in sorted(table.lengths):
            if table.lengths[loop_id] < eps or not support.any():
                continue
            boundary = cle.outer_boundaries[loop_id]
            weights = table.segment_masses[loop_id]
            if marked_point is MarkedPointRule.EUCLIDEAN:
                weights = polyline_segments(boundary)[1]
            z = _marked_point(boundary, weights, rng.random())
            r, c = grid.index_of(z)
            r, c = int(np.clip(r, 0, grid.n - 1)), int(np.clip(c, 0, grid.n - 1))
            r, c = int(near_r[r, c]), int(near_c[r, c])
            F = float(domain.conformal_radius(centers[r, c])) ** (-params.f_exponent)
            rows.append({"sample": k, "row": r, "col": c, "loop": loop_id, "support": 0,
                         "pre": atom, "mass": atom * F})

    deposits = pd.DataFrame(rows, columns=DEPOSIT_COLUMNS) if rows else _empty_deposits()
    metadata: Dict = {"boundary_adjacent_loops": excluded, "marked_point": marked_point.value,
                      "field_shift": field_shift, "warnings": []}
    if deposits.empty:
        metadata["warnings"].append(f"no loop reached quantum length eps={eps:.4g}; zero measure")
        logger.warning(f"⚠️ eps={eps:.4g} exceeds every loop length; Xi is zero")
    return _build(deposits, len(fields), grid, supports=[support], kappa=kappa, eps=eps, n_fields=len(fields),
                  seeds=[seed], metadata=metadata)


def aggregate_measures(measures: Sequence[CarpetMeasure]) -> CarpetMeasure:
    """Mean over CLE samples, each measure one sample."""
    if not measures:
        raise ParameterDomainError("measures", 0, "at least one measure")
    first = measures[0]
    frames, supports, seeds = [], [], []
    for i, m in enumerate(measures):
        if m.grid != first.grid or m.kappa != first.kappa or m.eps != first.eps:
            raise ParameterDomainError("measures", i, "measures sharing grid, kappa and eps")
        d = m.deposits.copy()
        d[["pre", "mass"]] = d[["pre", "mass"]] / m.n_samples
        d["sample"] = i
        d["support"] = d["support"] + len(supports)
        frames.append(d)
        supports.extend(m.supports)
        seeds.extend(m.seeds)
    deposits = pd.concat(frames, ignore_index=True)
    warnings = sum(len(m.metadata.get("warnings", [])) for m in measures)
    return _build(deposits, len(measures), first.grid, supports=supports, kappa=first.kappa, eps=first.eps,
                  n_fields=first.n_fields, seeds=seeds,
                  metadata={"n_cle_samples": len(measures), "samples_with_warnings": warnings})


def xi_for_soup(
    soup: LoopSoup,
    kappa: float,
    grid: SquareGrid,
    n_fields: int,
    seed: int,
    eps: float,
    measure_kappa: Optional[float] = None,
    field_resolution: Optional[int] = None,
    field_eps: Optional[float] = None,
    marked_point: MarkedPointRule = MarkedPointRule.QUANTUM,
) -> Tuple[CleSample, CarpetMeasure]:
    """Cluster a soup, build its carpet and estimate Xi with fields from ``seed``."""
    cle = carpet_from_clusters(soup, cluster_loops(soup, grid.n), grid, kappa=kappa)
    params = derive_params(measure_kappa if measure_kappa is not None else kappa)
    measure = estimate_xi(cle, n_fields, params, eps, seed, field_resolution, field_eps, marked_point)
    return cle, measure


def sample_cle_and_xi(
    kappa: float,
    grid: SquareGrid,
    n_fields: int,
    seed: int,
    eps: float,
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
    field_resolution: Optional[int] = None,
    quarter_turns: int = 0,
    marked_point: MarkedPointRule = MarkedPointRule.QUANTUM,
) -> Tuple[CleSample, CarpetMeasure]:
    """One CLE draw and its Xi; soup and fields use child seeds of ``seed``."""
    domain = DiskDomain()
    soup = sample_loop_soup(domain, loop_soup_intensity(kappa), t_min or default_t_min(grid.n, domain), t_cap,
                            n_bridge_steps, derive_seed(seed, STREAM_SOUP))
    if quarter_turns:
        soup = rotate_soup(soup, quarter_turns)
    return xi_for_soup(soup, kappa, grid, n_fields, derive_seed(seed, STREAM_FIELDS), eps,
                       field_resolution=field_resolution, marked_point=marked_point)


def xi_replica(*args, **kwargs) -> CarpetMeasure:
    """Xi of one CLE draw (a picklable job)."""
    return sample_cle_and_xi(*args, **kwargs)[1]


# ============================================================================
# CONFORMAL COVARIANCE
# ============================================================================

@dataclass(frozen=True)
class MobiusMap:
    """phi(w) = e^{i theta} (w - z0) / (1 - conj(z0) w), an automorphism of the unit disk."""
    z0: complex = 0j
    theta: float = 0.0

    def __post_init__(self):
        if abs(self.z0) >= 1:
            raise ParameterDomainError("z0", self.z0, "the open unit disk")

    def __call__(self, w):
        w = np.asarray(w, dtype=complex)
        return np.exp(1j * self.theta) * (w - self.z0) / (1.0 - np.conj(self.z0) * w)

    def abs_derivative(self, w):
        w = np.asarray(w, dtype=complex)
        return (1.0 - abs(self.z0) ** 2) / np.abs(1.0 - np.conj(self.z0) * w) ** 2

    def inverse(self) -> "MobiusMap":
        return MobiusMap(-self.z0 * np.exp(1j * self.theta), -self.theta)


def pushforward_covariant(measure: CarpetMeasure, phi: MobiusMap, d: float) -> CarpetMeasure:
    """Move every atom from z to phi(z) with weight |phi'(z)|^d."""
    grid = measure.grid
    deposits = measure.deposits.copy()
    if deposits.empty:
        return replace(measure)
    r = deposits["row"].to_numpy(dtype=np.int64)
    c = deposits["col"].to_numpy(dtype=np.int64)
    z = grid.centers()[r, c]
    weight = phi.abs_derivative(z) ** d
    nr, nc = grid.index_of(phi(z))
    deposits["row"] = np.clip(nr, 0, grid.n - 1)
    deposits["col"] = np.clip(nc, 0, grid.n - 1)
    deposits["pre"] = deposits["pre"] * weight
    deposits["mass"] = deposits["mass"] * weight
    supports = []
    for s in measure.supports:
        moved = np.zeros_like(s)
        sr, sc = np.nonzero(s)
        tr, tc = grid.index_of(phi(grid.centers()[sr, sc]))
        keep = grid.in_bounds(tr, tc)
        moved[tr[keep], tc[keep]] = True
        supports.append(moved)
    return _build(deposits, measure.n_samples, grid, supports=supports, kappa=measure.kappa, eps=measure.eps,
                  n_fields=measure.n_fields, normalization=measure.normalization, seeds=list(measure.seeds),
                  metadata={**measure.metadata, "pushforward": {"z0": [phi.z0.real, phi.z0.imag],
                                                                "theta": phi.theta, "d": d}})


def disk_intensity_reference(z, d: float, C: float = 1.0):
    """C (1 - |z|^2)^{d - 2} on the open unit disk."""
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z) >= 1):
        raise ParameterDomainError("|z|", float(np.max(np.abs(z))), "[0, 1)")
    value = C * (1.0 - np.abs(z) ** 2) ** (d - 2.0)
    return float(value) if value.ndim == 0 else value


def disk_reference_covariance_residual(n_pairs: int = 100, d: Optional[float] = None, seed: int = 0) -> float:
    """max |f(z) - f(phi(z)) |phi'(z)|^{2 - d}| over random (z, z0) pairs."""
    d = carpet_dimension(3.0) if d is None else d
    rng = np.random.default_rng(seed)

    def disk_points(k: int) -> np.ndarray:
        radius = 0.95 * np.sqrt(rng.random(k))
        return radius * np.exp(2j * np.pi * rng.random(k))

    z, z0 = disk_points(n_pairs), disk_points(n_pairs)
    worst = 0.0
    for zi, z0i in zip(z, z0):
        phi = MobiusMap(complex(z0i))
        lhs = disk_intensity_reference(zi, d)
        rhs = disk_intensity_reference(phi(zi), d) * float(phi.abs_derivative(zi)) ** (2.0 - d)
        worst = max(worst, abs(lhs - rhs))
    return worst


def radial_intensity_fit(measure: CarpetMeasure, d: float, n_bins: int = 12, r_max: float = 0.9,
                         tolerance: float = 0.15) -> Dict:
    """
    Regress log(mass / area) per radial shell on log(1 - |z|^2).

    The shells cover [0, r_max); empty shells are dropped.
    """
    grid = measure.grid
    z = grid.centers()
    radius = np.abs(z)
    edges = np.linspace(0.0, r_max, n_bins + 1)
    xs, ys = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        shell = (radius >= lo) & (radius < hi)
        mass = measure.masses[shell].sum()
        if mass <= 0 or not shell.any():
            continue
        mid = radius[shell].mean()
        xs.append(math.log(1.0 - mid ** 2))
        ys.append(math.log(mass / (shell.sum() * grid.cell_area)))
    if len(xs) < 3:
        return {"slope": None, "expected": d - 2.0, "defined": False, "passed": False, "n_shells": len(xs)}
    fit = stats.linregress(xs, ys)
    return {
        "slope": float(fit.slope),
        "slope_stderr": float(fit.stderr),
        "intercept": float(fit.intercept),
        "expected": d - 2.0,
        "defined": True,
        "n_shells": len(xs),
        "passed": abs(fit.slope - (d - 2.0)) <= tolerance,
    }


def quadrant_symmetry_check(measure: CarpetMeasure) -> Dict:
    """Largest pairwise z-score between the four quadrant masses."""
    h = 1.0 + 1e-9
    quadrants = [(0.0, h, 0.0, h), (-h, 0.0, 0.0, h), (-h, 0.0, -h, 0.0), (0.0, h, -h, 0.0)]
    values = [measure.box_mass(q) for q in quadrants]
    worst = 0.0
    for i in range(4):
        for j in range(i + 1, 4):
            se = math.hypot(values[i][1], values[j][1])
            if se > 0:
                worst = max(worst, abs(values[i][0] - values[j][0]) / se)
    return {"quadrant_masses": [v[0] for v in values], "max_abs_z": worst, "passed": worst < 3.0}


def shift_scaling_check(
    cle: CleSample,
    params: SleParams,
    eps: float,
    C: float,
    seed: int,
    n_fields: int = 2,
    field_resolution: Optional[int] = None,
) -> Dict:
    """
    Fields shifted by C measured at threshold eps e^{gamma C/2} against the
    unshifted run at eps: every pre-F_D deposit scales by e^{(alpha + 1/2) gamma C/2}.
    """
    resolution = min(field_resolution or cle.grid.n, settings.max_gff_size)
    fields = sample_gff_batch(resolution, n_fields, seed, DiskDomain())
    base = estimate_xi(cle, n_fields, params, eps, seed, fields=fields)
    shifted = estimate_xi(cle, n_fields, params, eps * math.exp(params.gamma * C / 2.0), seed,
                          fields=fields, field_shift=C)
    factor = math.exp((params.alpha + 0.5) * params.gamma * C / 2.0)
    a, b = base.deposits, shifted.deposits
    same_atoms = len(a) == len(b) and np.array_equal(a[["row", "col", "loop"]].to_numpy(), b[["row", "col", "loop"]].to_numpy())
    if same_atoms and len(a):
        rel = float(np.max(np.abs(b["pre"].to_numpy() / (factor * a["pre"].to_numpy()) - 1.0)))
    else:
        rel = 0.0 if same_atoms else float("inf")
    return {"factor": factor, "n_atoms": len(a), "same_atoms": bool(same_atoms), "max_rel_error": rel,
            "passed": bool(same_atoms and rel < 1e-12)}


# ============================================================================
# KAPPA -> 4 COUPLING
# ============================================================================

def cle4_measure_via_coupling(
    c_sequence: Sequence[float],
    n_fields: int,
    seed: int,
    grid_n: Optional[int] = None,
    eps: Optional[float] = None,
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
    field_resolution: Optional[int] = None,
) -> Tuple[List[CarpetMeasure], Dict]:
    """
    One c = 1 soup thinned to every c_n; Xi per level with kappa_n = c^{-1}(c_n).

    All levels share the thinning marks and the fields, so carpets are nested.
    Diagnostics carry kappa_n, d(kappa_n), the nesting check and totals.
    """
    seq = [float(c) for c in c_sequence]
    if not seq or any(c <= 0 or c > 1 for c in seq):
        raise ParameterDomainError("c_sequence", seq, "values in (0, 1]")
    if any(b <= a for a, b in zip(seq, seq[1:])):
        raise ParameterDomainError("c_sequence", seq, "a strictly increasing sequence")
    if seq[-1] != 1.0:
        raise ParameterDomainError("c_sequence", seq, "a sequence ending at 1")

    domain = DiskDomain()
    grid = domain.grid(grid_n or settings.default_grid_resolution)
    eps = eps if eps is not None else 8.0 * grid.h
    soup = sample_loop_soup(domain, 1.0, t_min or default_t_min(grid.n, domain), t_cap, n_bridge_steps,
                            derive_seed(seed, STREAM_SOUP))
    thinning_seed = derive_seed(seed, STREAM_THINNING)
    field_seed = derive_seed(seed, STREAM_FIELDS)

    measures: List[CarpetMeasure] = []
    kappas, dims, carpets, sizes = [], [], [], []
    for c in seq:
        level = soup if c == 1.0 else thin_soup(soup, c, thinning_seed)
        kappa = invert_soup_intensity(c)
        measure_kappa = kappa if kappa < 4.0 - COUPLING_PROXY_DELTA else 4.0 - COUPLING_PROXY_DELTA
        cle, measure = xi_for_soup(level, kappa, grid, n_fields, field_seed, eps, measure_kappa=measure_kappa,
                                   field_resolution=field_resolution)
        measure.metadata["c"] = c
        measure.metadata["measured_with_kappa"] = measure_kappa
        measures.append(measure)
        kappas.append(kappa)
        dims.append(carpet_dimension(kappa))
        carpets.append(cle.carpet)
        sizes.append(len(level))
        logger.info(f"c={c:.4f} kappa={kappa:.6f} d={dims[-1]:.6f} loops={len(level)} total={measure.total:.4g}")

    violations = [int(np.count_nonzero(b & ~a)) for a, b in zip(carpets, carpets[1:])]
    diagnostics = {
        "c_sequence": seq,
        "kappas": kappas,
        "d_values": dims,
        "n_loops": sizes,
        "carpet_nesting_violations": violations,
        "monotone": all(v == 0 for v in violations),
        "totals": [m.total for m in measures],
        "d_limit": carpet_dimension(4.0),
        "proxy_kappa": 4.0 - COUPLING_PROXY_DELTA,
    }
    return measures, diagnostics


# ============================================================================
# LOOP MASS
# ============================================================================

def neighborhood_mass_profile(points, masses, loop: np.ndarray, radii: Sequence[float], step: float) -> np.ndarray:
    """Total mass of the atoms within distance r of the polyline, per radius."""
    points = np.asarray(points, dtype=complex)
    masses = np.asarray(masses, dtype=float)
    if points.size == 0:
        return np.zeros(len(radii))
    dense, _ = densify_polyline(loop, step)
    tree = cKDTree(np.column_stack([dense.real, dense.imag]))
    dist, _ = tree.query(np.column_stack([points.real, points.imag]))
    return np.array([masses[dist <= r].sum() for r in radii])


def fit_mass_slope(radii: Sequence[float], masses: Sequence[float], confidence: float = 0.95) -> Dict:
    """Slope of log mass against log r with a t-quantile confidence interval."""
    radii = np.asarray(radii, dtype=float)
    masses = np.asarray(masses, dtype=float)
    keep = masses > 0
    if keep.sum() < 3:
        return {"defined": False, "slope": None, "ci_low": None, "ci_high": None}
    x, y = np.log(radii[keep]), np.log(masses[keep])
    if np.ptp(y) == 0:
        return {"defined": True, "slope": 0.0, "ci_low": 0.0, "ci_high": 0.0}
    fit = stats.linregress(x, y)
    q = stats.t.ppf(0.5 + confidence / 2.0, x.size - 2)
    return {"defined": True, "slope": float(fit.slope), "ci_low": float(fit.slope - q * fit.stderr),
            "ci_high": float(fit.slope + q * fit.stderr)}


def arc_length_control(loop: np.ndarray, radii: Sequence[float], step: float) -> Dict:
    """Arc length on the loop itself: the neighborhood mass is flat in r."""
    mids, lengths = polyline_segments(loop)
    return fit_mass_slope(radii, neighborhood_mass_profile(mids, lengths, loop, radii, step))


@dataclass
class LoopMassReport:
    radii: List[float]
    mean_profile: List[float]
    own_atom_mass: float
    own_profile: List[float]
    fit: Dict
    control: Dict
    n_replicas: int
    skipped: int

    @property
    def passed(self) -> bool:
        return bool(self.fit.get("defined") and self.fit["ci_low"] > 0)

    def to_dict(self) -> Dict:
        return {
            "radii": self.radii,
            "mean_profile": self.mean_profile,
            "own_atom_mass": self.own_atom_mass,
            "own_profile": self.own_profile,
            "fit": self.fit,
            "control": self.control,
            "n_replicas": self.n_replicas,
            "skipped": self.skipped,
            "passed": self.passed,
        }


def reference_loop_profile(cle: CleSample, measure: CarpetMeasure, radii: Sequence[float]) -> Optional[Dict]:
    """
    Xi mass within r of the longest outer boundary, every atom counted.

    The loop's own atoms are also profiled alone (``own_profile``) and summed
    (``own``) as diagnostics; they stay inside ``profile``.
    """
    if cle.n_loops == 0:
        return None
    perimeters = [polyline_segments(b)[1].sum() if b.size > 1 else 0.0 for b in cle.outer_boundaries]
    ref = int(np.argmax(perimeters))
    loop = cle.outer_boundaries[ref]
    step = 0.25 * cle.grid.h
    d = measure.deposits
    z = cle.grid.centers()[d["row"].to_numpy(dtype=np.int64), d["col"].to_numpy(dtype=np.int64)]
    masses = d["mass"].to_numpy(dtype=float) / measure.n_samples
    own = d["loop"].to_numpy() == ref
    return {
        "loop_index": ref,
        "loop": loop,
        "profile": neighborhood_mass_profile(z, masses, loop, radii, step),
        "own_profile": neighborhood_mass_profile(z[own], masses[own], loop, radii, step),
        "own": float(masses[own].sum()),
    }


def loop_mass_replica(kappa: float, grid: SquareGrid, n_fields: int, seed: int, eps: float,
                      radii: Sequence[float], t_min: Optional[float], t_cap: float,
                      n_bridge_steps: Optional[int], field_resolution: Optional[int]) -> Optional[Dict]:
    """Profile around the longest CLE loop of one draw."""
    cle, measure = sample_cle_and_xi(kappa, grid, n_fields, seed, eps, t_min, t_cap, n_bridge_steps, field_resolution)
    return reference_loop_profile(cle, measure, radii)


def loop_mass_vanishing_test(
    kappa: float,
    n_replicas: int,
    radii: Sequence[float],
    seed: int,
    grid_n: Optional[int] = None,
    n_fields: int = 4,
    eps: Optional[float] = None,
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
    field_resolution: Optional[int] = None,
    workers: int = 1,
) -> LoopMassReport:
    """
    Xi mass within distance r of the longest loop, averaged over replicas and
    fitted in log-log. A slope whose interval excludes 0 from above says the
    mass on the loop itself vanishes. Every atom, the loop's own included,
    counts toward the profile; the own-atom profile is a diagnostic.
    """
    radii = [float(r) for r in radii]
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ParameterDomainError("radii", radii, "a strictly decreasing sequence")
    grid = DiskDomain().grid(grid_n or settings.default_grid_resolution)
    eps = eps if eps is not None else 8.0 * grid.h
    jobs = [(kappa, grid, n_fields, s, eps, radii, t_min, t_cap, n_bridge_steps, field_resolution)
            for s in spawn_seeds(seed, n_replicas)]
    results = run_replicas(loop_mass_replica, jobs, workers)
    kept = [r for r in results if r is not None]
    if not kept:
        empty = {"defined": False, "slope": None, "ci_low": None, "ci_high": None}
        zeros = [0.0] * len(radii)
        return LoopMassReport(radii, zeros, 0.0, zeros, empty, empty, n_replicas, n_replicas)
    mean_profile = np.mean([r["profile"] for r in kept], axis=0)
    control = arc_length_control(kept[0]["loop"], radii, 0.25 * grid.h)
    return LoopMassReport(
        radii=radii,
        mean_profile=mean_profile.tolist(),
        own_atom_mass=float(np.mean([r["own"] for r in kept])),
        own_profile=np.mean([r["own_profile"] for r in kept], axis=0).tolist(),
        fit=fit_mass_slope(radii, mean_profile),
        control=control,
        n_replicas=n_replicas,
        skipped=n_replicas - len(kept),
    )


# ============================================================================
# UNIQUENESS / ROTATION
# ============================================================================

def _normalized_box(measure: CarpetMeasure, box: Box) -> Tuple[float, float]:
    """Ratio estimate of box mass / total with a delta-method standard error."""
    x = measure.per_sample(measure.grid.box_mask(box))
    t = measure.per_sample()
    mean_t = t.mean()
    ratio = x.mean() / mean_t
    if measure.n_samples < 2:
        return float(ratio), 0.0
    resid = x - ratio * t
    return float(ratio), float(resid.std(ddof=1) / (math.sqrt(measure.n_samples) * mean_t))


@dataclass
class UniquenessReport:
    boxes: pd.DataFrame
    support_violation: Tuple[float, float]

    @property
    def passed(self) -> bool:
        return bool((self.boxes["z"].abs() < 3.0).all()) and max(self.support_violation) == 0.0

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "support_violation": list(self.support_violation),
                "boxes": self.boxes.to_dict(orient="records")}


def uniqueness_normalization_check(run_a: CarpetMeasure, run_b: CarpetMeasure, probe_boxes: Sequence[Box]) -> UniquenessReport:
    """Both runs at unit expected total; per-box z-scores and a support check."""
    for name, run in (("run_a", run_a), ("run_b", run_b)):
        if run.total <= 0:
            raise ParameterDomainError(name, run.total, "a run with positive total mass")
    if abs(run_a.kappa - run_b.kappa) > 1e-9:
        raise ParameterDomainError("run_b.kappa", run_b.kappa, f"the kappa of run_a ({run_a.kappa})")
    rows = []
    for box in probe_boxes:
        a, sa = _normalized_box(run_a, box)
        b, sb = _normalized_box(run_b, box)
        se = math.hypot(sa, sb)
        rows.append({"x0": box[0], "x1": box[1], "y0": box[2], "y1": box[3], "share_a": a, "share_b": b,
                     "z": 0.0 if se == 0 else (a - b) / se})
    return UniquenessReport(pd.DataFrame(rows, columns=["x0", "x1", "y0", "y1", "share_a", "share_b", "z"]),
                            (run_a.support_violation_mass(), run_b.support_violation_mass()))


def rotation_equivariance_test(
    kappa: float,
    n_replicas: int,
    seed: int,
    grid_n: Optional[int] = None,
    n_fields: int = 2,
    eps: Optional[float] = None,
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
    field_resolution: Optional[int] = None,
    workers: int = 1,
    significance: float = 0.01,
) -> Dict:
    """
    Estimate-then-rotate against rotate-the-soup-then-estimate (a quarter
    turn), independent seeds per arm, KS on the totals.
    """
    grid = DiskDomain().grid(grid_n or settings.default_grid_resolution)
    eps = eps if eps is not None else 8.0 * grid.h
    quarter = MobiusMap(0j, math.pi / 2.0)

    def jobs(stream: int, turns: int):
        return [(kappa, grid, n_fields, s, eps, t_min, t_cap, n_bridge_steps, field_resolution, turns)
                for s in spawn_seeds(seed, n_replicas, stream)]

    plain = run_replicas(xi_replica, jobs(0, 0), workers)
    turned = run_replicas(xi_replica, jobs(1, 1), workers)
    after = [pushforward_covariant(m, quarter, carpet_dimension(kappa)).total for m in plain]
    before = [m.total for m in turned]
    test = stats.ks_2samp(after, before)
    return {"ks": float(test.statistic), "p_value": float(test.pvalue), "n_replicas": n_replicas,
            "passed": bool(test.pvalue >= significance),
            "mean_totals": [float(np.mean(after)), float(np.mean(before))]}
