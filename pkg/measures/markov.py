"""
markov.py — CLE Markov restriction shadow for the carpet measure
================================================================

For a sub-domain U of the unit disk every replica samples (CLE, Xi), removes
the closures of the loops that cross from U into D minus U, keeps the
component V of what is left that contains a probe point, maps V to the disk
and pushes Xi restricted to V forward with weight |phi'|^d. The pushed totals
should have the law of fresh unit-disk Xi totals (two-sample KS), and totals
from disjoint components should be uncorrelated.

The uniformizing map comes from the discrete Green's function of V with pole
at the probe: log|phi| = -2 pi g and |phi'| = 2 pi |grad g| |phi|. Only |phi'|
enters the pushed total, so no harmonic conjugate is built. When V is the
whole disk the exact Moebius map sending the probe to 0 is used instead.

Public API
──────────
    SubDomain.upper_half_disk() / SubDomain.whole_disk()
    restricted_domain(cle, U)                               → bool mask U*
    uniformizing_map(V, grid, probe)                        → UniformizingMap
    markov_restriction_test(kappa, U, n_replicas, seed)     → MarkovReport
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from matplotlib.path import Path
from scipy import ndimage, stats
from scipy.sparse.linalg import spsolve

from core.config import settings
from core.exceptions import ParameterDomainError
from core.grid import DiskDomain, SquareGrid
from core.params import carpet_dimension
from core.seeding import STREAM_REFERENCE, derive_seed, spawn_seeds
from measures.cle_measure import MobiusMap, sample_cle_and_xi, xi_replica
from pipeline.runner import run_replicas
from sampling.gff import dirichlet_incidence
from sampling.loopsoup import CleSample


# ============================================================================
# SUB-DOMAINS
# ============================================================================

@dataclass(frozen=True)
class SubDomain:
    """Polygon U, clipped to the unit disk, with the probe points used to pick V."""
    name: str
    vertices: Tuple[complex, ...]
    probe: complex
    complement_probe: Optional[complex] = None

    def mask(self, grid: SquareGrid) -> np.ndarray:
        z = grid.centers().ravel()
        path = Path(np.column_stack([np.real(self.vertices), np.imag(self.vertices)]))
        inside = path.contains_points(np.column_stack([z.real, z.imag])).reshape(grid.n, grid.n)
        return inside & DiskDomain().mask(grid)

    @classmethod
    def upper_half_disk(cls, n_arc: int = 256) -> "SubDomain":
        # the arc sits just outside the unit circle so every upper disk cell is inside
        arc = 1.05 * np.exp(1j * np.linspace(0.0, math.pi, n_arc))
        return cls("upper-half-disk", tuple(complex(z) for z in np.append(arc, arc[0])), 0.5j, -0.5j)

    @classmethod
    def whole_disk(cls, n_arc: int = 512) -> "SubDomain":
        arc = 1.05 * np.exp(2j * math.pi * np.arange(n_arc) / n_arc)
        return cls("whole-disk", tuple(complex(z) for z in np.append(arc, arc[0])), 0j, None)

    @classmethod
    def named(cls, name: str) -> "SubDomain":
        builders = {"upper-half-disk": cls.upper_half_disk, "whole-disk": cls.whole_disk}
        if name not in builders:
            raise ParameterDomainError("subdomain", name, f"one of {sorted(builders)}")
        return builders[name]()


def restricted_domain(cle: CleSample, U: np.ndarray) -> np.ndarray:
    """U minus the closures of the loops meeting both U and D minus U."""
    outside = cle.domain_mask & ~U
    labels = cle.labels
    in_u = np.unique(labels[U & (labels >= 0)])
    in_out = np.unique(labels[outside & (labels >= 0)])
    crossing = np.isin(labels, np.intersect1d(in_u, in_out))
    closure = ndimage.binary_dilation(crossing, structure=np.ones((3, 3), dtype=bool))
    return U & ~closure


def component_at(mask: np.ndarray, grid: SquareGrid, probe: complex) -> np.ndarray:
    """The 4-connected component of ``mask`` holding the probe cell; empty when swallowed."""
    r, c = (int(v) for v in grid.index_of(probe))
    if not (0 <= r < grid.n and 0 <= c < grid.n) or not mask[r, c]:
        return np.zeros_like(mask)
    labels, _ = ndimage.label(mask)
    return labels == labels[r, c]


# ============================================================================
# UNIFORMIZING MAP
# ============================================================================

@dataclass
class UniformizingMap:
    mask: np.ndarray
    probe: complex
    abs_phi: np.ndarray
    abs_derivative: np.ndarray
    exact: bool
    metadata: Dict = field(default_factory=dict)


def uniformizing_map(V: np.ndarray, grid: SquareGrid, probe: complex) -> UniformizingMap:
    """|phi| and |phi'| on the cells of V for the map V -> D with phi(probe) = 0."""
    if not V.any():
        raise ParameterDomainError("V", "empty", "a nonempty component")
    disk = DiskDomain()
    if np.array_equal(V, disk.mask(grid)):
        phi = MobiusMap(complex(probe))
        z = grid.centers()
        return UniformizingMap(V, probe, np.where(V, np.abs(phi(z)), 0.0), np.where(V, phi.abs_derivative(z), 0.0),
                               exact=True)

    incidence, index = dirichlet_incidence(V)
    laplacian = (incidence.T @ incidence).tocsc()
    r, c = (int(v) for v in grid.index_of(probe))
    rhs = np.zeros(laplacian.shape[0])
    rhs[index[r, c]] = 1.0
    green = np.zeros(V.shape)
    green[V] = spsolve(laplacian, rhs)

    abs_phi = np.where(V, np.exp(-2.0 * math.pi * green), 0.0)
    g_row, g_col = np.gradient(green, grid.h)
    abs_derivative = np.where(V, 2.0 * math.pi * np.hypot(g_row, g_col) * abs_phi, 0.0)
    return UniformizingMap(V, probe, abs_phi, abs_derivative, exact=False,
                           metadata={"cells": int(V.sum()), "green_at_probe": float(green[r, c])})


def pushed_total(masses: np.ndarray, phi: UniformizingMap, d: float) -> float:
    """Total of Xi restricted to V after the pushforward with weight |phi'|^d."""
    return float(np.sum(masses[phi.mask] * phi.abs_derivative[phi.mask] ** d))


# ============================================================================
# HARNESS
# ============================================================================

@dataclass
class MarkovReport:
    subdomain: str
    ks: float
    p_value: float
    pushed_totals: List[float]
    reference_totals: List[float]
    skipped: int
    correlation: Optional[float]
    correlation_bound: Optional[float]
    significance: float = 0.01

    @property
    def passed(self) -> bool:
        if len(self.pushed_totals) < 2 or self.p_value < self.significance:
            return False
        if self.correlation is not None and abs(self.correlation) >= self.correlation_bound:
            return False
        return True

    def to_dict(self) -> Dict:
        return {
            "subdomain": self.subdomain,
            "ks": self.ks,
            "p_value": self.p_value,
            "n_used": len(self.pushed_totals),
            "skipped": self.skipped,
            "correlation": self.correlation,
            "correlation_bound": self.correlation_bound,
            "passed": self.passed,
        }


def markov_replica(kappa: float, grid: SquareGrid, n_fields: int, seed: int, eps: float, subdomain: SubDomain,
                   t_min: Optional[float], t_cap: float, n_bridge_steps: Optional[int],
                   field_resolution: Optional[int]) -> Dict:
    """Pushed Xi totals of the probe components of U* and of its complement (None when swallowed)."""
    cle, measure = sample_cle_and_xi(kappa, grid, n_fields, seed, eps, t_min, t_cap, n_bridge_steps,
                                     field_resolution)
    d = carpet_dimension(kappa)
    U = subdomain.mask(grid)
    out: Dict = {"inside": None, "outside": None}
    targets = [("inside", U, subdomain.probe)]
    if subdomain.complement_probe is not None:
        targets.append(("outside", cle.domain_mask & ~U, subdomain.complement_probe))
    for key, region, probe in targets:
        V = component_at(restricted_domain(cle, region), grid, probe)
        if V.any():
            out[key] = pushed_total(measure.masses, uniformizing_map(V, grid, probe), d)
    return out


def markov_restriction_test(
    kappa: float,
    U: SubDomain,
    n_replicas: int,
    seed: int,
    reference_seed: Optional[int] = None,
    grid_n: Optional[int] = None,
    n_fields: int = 2,
    eps: Optional[float] = None,
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
    field_resolution: Optional[int] = None,
    workers: int = 1,
    significance: float = 0.01,
) -> MarkovReport:
    """
    KS of pushed probe-component totals against fresh unit-disk Xi totals.

    The reference arm draws from ``reference_seed`` (a child of ``seed`` by
    default). Replicas whose probe is swallowed by a crossing loop are
    skipped and counted.
    """
    if not 8.0 / 3.0 < kappa < 4.0:
        raise ParameterDomainError("kappa", kappa, "(8/3, 4)")
    if n_replicas < 2:
        raise ParameterDomainError("n_replicas", n_replicas, ">= 2")
    grid = DiskDomain().grid(grid_n or settings.default_grid_resolution)
    eps = eps if eps is not None else 8.0 * grid.h
    reference_seed = derive_seed(seed, STREAM_REFERENCE) if reference_seed is None else reference_seed

    jobs = [(kappa, grid, n_fields, s, eps, U, t_min, t_cap, n_bridge_steps, field_resolution)
            for s in spawn_seeds(seed, n_replicas)]
    results = run_replicas(markov_replica, jobs, workers)
    reference_jobs = [(kappa, grid, n_fields, s, eps, t_min, t_cap, n_bridge_steps, field_resolution)
                      for s in spawn_seeds(reference_seed, n_replicas)]
    reference = [m.total for m in run_replicas(xi_replica, reference_jobs, workers)]

    pushed = [r["inside"] for r in results if r["inside"] is not None]
    skipped = n_replicas - len(pushed)
    if skipped:
        logger.warning(f"⚠️ probe swallowed in {skipped}/{n_replicas} replicas; skipped")
    if len(pushed) >= 2:
        test = stats.ks_2samp(pushed, reference)
        ks, p = float(test.statistic), float(test.pvalue)
    else:
        ks, p = float("nan"), 0.0

    correlation, bound = None, None
    pairs = [(r["inside"], r["outside"]) for r in results if r["inside"] is not None and r["outside"] is not None]
    if U.complement_probe is not None and len(pairs) >= 3:
        a, b = np.array(pairs).T
        if np.ptp(a) > 0 and np.ptp(b) > 0:
            correlation = float(stats.pearsonr(a, b)[0])
            bound = 3.0 / math.sqrt(len(pairs))

    report = MarkovReport(U.name, ks, p, pushed, reference, skipped, correlation, bound, significance)
    logger.info(f"Markov test on {U.name}: KS={ks:.4f} p={p:.4f} skipped={skipped} corr={correlation}")
    return report
