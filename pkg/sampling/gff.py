"""
gff.py — discrete zero-boundary Gaussian free field
====================================================

Exact samples of the lattice GFF on a domain mask with Dirichlet data.

Let M = 4I - A be the Dirichlet Laplacian on the interior cells. Writing
M = B^T B with B the edge-incidence matrix (one row per lattice edge, edges
to the boundary included), the vector M^{-1} B^T z with z i.i.d. N(0, 1) per
edge has covariance M^{-1} exactly. The field is sqrt(2 pi) times that, so its
covariance is the discrete Green's function 2 pi M^{-1}, which matches the
continuum normalisation G(x, y) ~ log(1/|x - y|). One sparse LU factorisation
of M per (domain, n) is cached and shared.

Public API
──────────
    lattice_operator(n, domain)                      → LatticeOperator (cached)
    sample_zero_boundary_gff(n, seed, domain)        → GffSample
    sample_gff_batch(n, count, seed, domain)         → list[GffSample]
    discrete_green(op, points)                       → (k, k) covariance matrix
    circle_average(field, z, eps)                    → float
    circle_averages(field, zs, eps)                  → ndarray (vectorized)
    circle_average_variance(op, z, eps)              → float (exact, from the Green oracle)
    markov_decompose(field, U)                       → MarkovDecomposition
    sample_wedge_radial(gamma, t_max, dt, seed, s0)  → ndarray
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Union

import numpy as np
from loguru import logger
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu, spsolve
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from core.config import settings
from core.exceptions import GridCapacityError, ParameterDomainError, RejectionBudgetExceeded
from core.grid import DiskDomain, HalfPlaneWindow, SquareGrid

Domain = Union[DiskDomain, HalfPlaneWindow]


# ============================================================================
# LATTICE OPERATOR
# ============================================================================

@dataclass(frozen=True)
class LatticeOperator:
    """Dirichlet Laplacian, its factorisation and the edge-incidence matrix."""
    grid: SquareGrid
    domain: Domain
    mask: np.ndarray
    index: np.ndarray        # interior position per cell, -1 outside
    laplacian: sparse.csc_matrix
    incidence_t: sparse.csr_matrix
    lu: object

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(rhs, dtype=float))

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Interior vector -> n x n grid with zeros outside."""
        out = np.zeros(self.mask.shape)
        out[self.mask] = values
        return out


def _edges(mask: np.ndarray, index: np.ndarray):
    """Incidence rows: (+1 at a, -1 at b) for interior pairs, (+1 at a) towards the boundary."""
    n = mask.shape[0]
    padded = np.pad(mask, 1)
    padded_index = np.pad(index, 1, constant_values=-1)
    rows_a, rows_b = [], []
    boundary = []
    for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
        nb_mask = padded[1 + dr:n + 1 + dr, 1 + dc:n + 1 + dc]
        nb_index = padded_index[1 + dr:n + 1 + dr, 1 + dc:n + 1 + dc]
        if (dr, dc) in ((0, 1), (1, 0)):
            both = mask & nb_mask
            rows_a.append(index[both])
            rows_b.append(nb_index[both])
        boundary.append(index[mask & ~nb_mask])
    a = np.concatenate(rows_a)
    b = np.concatenate(rows_b)
    bnd = np.concatenate(boundary)
    return a, b, bnd


def dirichlet_incidence(mask: np.ndarray):
    """Edge-incidence matrix B of the cells in ``mask`` and their index map; B^T B = 4I - A."""
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    a, b, bnd = _edges(mask, index)
    n_pair, n_bnd = a.size, bnd.size
    rows = np.concatenate([np.arange(n_pair), np.arange(n_pair), n_pair + np.arange(n_bnd)])
    cols = np.concatenate([a, b, bnd])
    vals = np.concatenate([np.ones(n_pair), -np.ones(n_pair), np.ones(n_bnd)])
    incidence = sparse.csr_matrix((vals, (rows, cols)), shape=(n_pair + n_bnd, int(mask.sum())))
    return incidence, index


@lru_cache(maxsize=8)
def _build_operator(n: int, domain: Domain) -> LatticeOperator:
    grid = domain.grid(n)
    mask = domain.mask(grid)
    incidence, index = dirichlet_incidence(mask)
    n_int = int(mask.sum())
    laplacian = (incidence.T @ incidence).tocsc()
    lu = splu(laplacian, permc_spec="MMD_AT_PLUS_A")
    logger.debug(f"🧮 factorised Dirichlet Laplacian: n={n}, interior={n_int}, edges={incidence.shape[0]}")
    return LatticeOperator(grid, domain, mask, index, laplacian, incidence.T.tocsr(), lu)


def lattice_operator(n: int, domain: Optional[Domain] = None) -> LatticeOperator:
    """Cached operator for an n x n lattice over ``domain`` (unit disk by default)."""
    if n < 8:
        raise ParameterDomainError("n", n, ">= 8")
    if n > settings.max_gff_size:
        raise GridCapacityError(f"n={n} exceeds the configured cap max_gff_size={settings.max_gff_size}")
    return _build_operator(int(n), domain or DiskDomain())


# ============================================================================
# SAMPLES
# ============================================================================

@dataclass(frozen=True)
class GffSample:
    """Lattice field on cell centers; zero outside the interior mask."""
    grid: SquareGrid
    domain: Domain
    values: np.ndarray
    seed: Optional[int]
    offset: float = 0.0
    normalization: float = math.sqrt(2.0 * math.pi)
    metadata: Dict = field(default_factory=dict)

    def shifted(self, c: float) -> "GffSample":
        """Same field plus the constant c (applied exactly after averaging)."""
        return replace(self, offset=self.offset + c)

    def on_grid(self, grid: SquareGrid, domain: Domain) -> "GffSample":
        """The same lattice values carried to a dilated copy of the lattice."""
        return replace(self, grid=grid, domain=domain)


def sample_gff_batch(n: int, count: int, seed: int, domain: Optional[Domain] = None) -> List[GffSample]:
    """``count`` independent exact samples from one generator seeded by ``seed``."""
    op = lattice_operator(n, domain)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((op.incidence_t.shape[1], count))
    interior = op.solve(op.incidence_t @ noise) * math.sqrt(2.0 * math.pi)
    interior = interior.reshape(op.size, count)
    return [
        GffSample(grid=op.grid, domain=op.domain, values=op.scatter(interior[:, k]), seed=seed,
                  metadata={"batch_index": k})
        for k in range(count)
    ]


def sample_zero_boundary_gff(n: int, seed: int, domain: Optional[Domain] = None) -> GffSample:
    """One exact sample of the discrete zero-boundary GFF, deterministic per seed."""
    return sample_gff_batch(n, 1, seed, domain)[0]


def discrete_green(op: LatticeOperator, points) -> np.ndarray:
    """2 pi M^{-1} between the cells containing ``points``."""
    rows, cols = op.grid.index_of(points)
    idx = op.index[rows, cols]
    if np.any(idx < 0):
        raise ParameterDomainError("points", points, "interior cells of the lattice")
    rhs = np.zeros((op.size, idx.size))
    rhs[idx, np.arange(idx.size)] = 1.0
    sol = op.solve(rhs).reshape(op.size, idx.size)
    return 2.0 * math.pi * sol[idx, :]


# ============================================================================
# CIRCLE AVERAGES
# ============================================================================

def _circle_points(grid: SquareGrid, eps: float) -> int:
    return max(16, int(math.ceil(2.0 * math.pi * eps / grid.h)))


def circle_averages(field: GffSample, zs, eps) -> np.ndarray:
    """
    Bilinear circle averages h_eps(z) for many centers at once.

    ``eps`` may be a scalar or one radius per center. No domain check; callers
    clip radii to the distance to the boundary.
    """
    zs = np.atleast_1d(np.asarray(zs, dtype=complex))
    eps = np.broadcast_to(np.asarray(eps, dtype=float), zs.shape)
    k = _circle_points(field.grid, float(eps.max()) if eps.size else 0.0)
    theta = 2.0 * math.pi * np.arange(k) / k
    pts = zs[:, None] + eps[:, None] * np.exp(1j * theta)[None, :]
    rows, cols = field.grid.fractional_index(pts.ravel())
    samples = ndimage.map_coordinates(field.values, [rows, cols], order=1, mode="constant", cval=0.0)
    return samples.reshape(pts.shape).mean(axis=1) + field.offset


def circle_average(field: GffSample, z: complex, eps: float) -> float:
    """Mean of the bilinear field over max(16, 2 pi eps / a) points on |w - z| = eps."""
    if eps < 2.0 * field.grid.h:
        raise ParameterDomainError("eps", eps, f">= 2 grid spacings ({2.0 * field.grid.h:.4g})")
    if field.domain.distance_to_boundary(z) < eps:
        raise ParameterDomainError("z", z, f"points at distance >= eps={eps} from the boundary")
    return float(circle_averages(field, [z], eps)[0])


def circle_weights(op: LatticeOperator, z: complex, eps: float) -> np.ndarray:
    """Interior weight vector w with h_eps(z) = w . h for the bilinear rule."""
    k = _circle_points(op.grid, eps)
    theta = 2.0 * math.pi * np.arange(k) / k
    pts = z + eps * np.exp(1j * theta)
    fr, fc = op.grid.fractional_index(pts)
    r0, c0 = np.floor(fr).astype(np.int64), np.floor(fc).astype(np.int64)
    ar, ac = fr - r0, fc - c0
    weights = np.zeros(op.size)
    for dr, dc, wgt in ((0, 0, (1 - ar) * (1 - ac)), (0, 1, (1 - ar) * ac), (1, 0, ar * (1 - ac)), (1, 1, ar * ac)):
        r, c = r0 + dr, c0 + dc
        ok = op.grid.in_bounds(r, c)
        idx = np.full(r.shape, -1)
        idx[ok] = op.index[r[ok], c[ok]]
        keep = idx >= 0
        np.add.at(weights, idx[keep], wgt[keep] / k)
    return weights


def circle_average_variance(op: LatticeOperator, z: complex, eps: float) -> float:
    """Var h_eps(z) = 2 pi w^T M^{-1} w, exact for the lattice field."""
    w = circle_weights(op, z, eps)
    return float(2.0 * math.pi * w @ op.solve(w))


# ============================================================================
# MARKOV DECOMPOSITION
# ============================================================================

@dataclass
class MarkovDecomposition:
    zero_boundary: np.ndarray   # field - harmonic on U, zero elsewhere
    harmonic: np.ndarray        # harmonic extension on U, equal to the field elsewhere
    residual: float             # max |discrete Laplacian| of the harmonic part on U


def _discrete_laplacian(values: np.ndarray) -> np.ndarray:
    padded = np.pad(values, 1)
    return 4.0 * values - padded[:-2, 1:-1] - padded[2:, 1:-1] - padded[1:-1, :-2] - padded[1:-1, 2:]


def markov_decompose(field: GffSample, U: np.ndarray) -> MarkovDecomposition:
    """
    Split the field on U into a zero-boundary part and a harmonic remainder.

    The remainder solves the discrete Laplace equation on U with the field's
    values on the outer boundary of U; disconnected U is solved blockwise by
    the same sparse system. The decomposition acts on the lattice values; a
    constant offset on the sample is not part of it.
    """
    values = field.values
    U = np.asarray(U, dtype=bool)
    if not U.any():
        return MarkovDecomposition(np.zeros_like(values), values.copy(), 0.0)
    op_mask = field.domain.mask(field.grid)
    if np.any(U & ~op_mask):
        raise ParameterDomainError("U", "mask", "cells strictly inside the domain")

    n = U.shape[0]
    index = np.full(U.shape, -1, dtype=np.int64)
    index[U] = np.arange(int(U.sum()))
    rows, cols = np.nonzero(U)
    entries_r, entries_c, entries_v = [index[rows, cols]], [index[rows, cols]], [np.full(rows.size, 4.0)]
    rhs = np.zeros(rows.size)
    for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
        nr, nc = rows + dr, cols + dc
        ok = (nr >= 0) & (nr < n) & (nc >= 0) & (nc < n)
        inside = np.zeros(rows.size, dtype=bool)
        inside[ok] = U[nr[ok], nc[ok]]
        entries_r.append(index[rows[inside], cols[inside]])
        entries_c.append(index[nr[inside], nc[inside]])
        entries_v.append(-np.ones(int(inside.sum())))
        outside = ok & ~inside
        np.add.at(rhs, index[rows[outside], cols[outside]], values[nr[outside], nc[outside]])
    system = sparse.csc_matrix(
        (np.concatenate(entries_v), (np.concatenate(entries_r), np.concatenate(entries_c))),
        shape=(rows.size, rows.size),
    )
    solution = spsolve(system, rhs)

    harmonic = values.copy()
    harmonic[U] = solution
    zero_part = np.zeros_like(values)
    zero_part[U] = values[U] - solution
    residual = float(np.abs(_discrete_laplacian(harmonic)[U]).max())
    return MarkovDecomposition(zero_part, harmonic, residual)


# ============================================================================
# WEDGE RADIAL PROCESS
# ============================================================================

class _PathHitZero(Exception):
    pass


def sample_wedge_radial(gamma: float, t_max: float, dt: float, seed: int, s0: float = 0.1) -> np.ndarray:
    """
    Y_t = s0 + B_{2t} + (gamma - 2/gamma) t conditioned to stay positive.

    Gaussian increments of variance 2 dt; whole paths are redrawn until the
    minimum stays above zero, under a tenacity attempt budget. The start s0 > 0
    replaces the conditioning at 0+ and biases Y upward by O(1/(drift t)).
    """
    if not math.sqrt(2.0) < gamma < 2.0:
        raise ParameterDomainError("gamma", gamma, "(sqrt(2), 2)")
    if t_max <= 0 or dt <= 0 or s0 <= 0:
        raise ParameterDomainError("t_max, dt, s0", (t_max, dt, s0), "positive values")
    drift = gamma - 2.0 / gamma
    n = int(math.ceil(t_max / dt))
    rng = np.random.default_rng(seed)

    def attempt() -> np.ndarray:
        steps = rng.standard_normal(n) * math.sqrt(2.0 * dt) + drift * dt
        path = s0 + np.concatenate(([0.0], np.cumsum(steps)))
        if path.min() <= 0:
            raise _PathHitZero()
        return path

    try:
        for trial in Retrying(
            stop=stop_after_attempt(settings.rejection_budget),
            retry=retry_if_exception_type(_PathHitZero),
            reraise=False,
        ):
            with trial:
                path = attempt()
    except RetryError as exc:
        raise RejectionBudgetExceeded(
            f"wedge radial path hit zero {settings.rejection_budget} times; "
            f"use a larger s0 (now {s0}) or a shorter horizon (now {t_max})"
        ) from exc
    return path
