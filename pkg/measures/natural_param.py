"""
natural_param.py — natural-parameterization estimates for SLE_kappa', kappa' in (4, 8)
=====================================================================================

mu0(dz) = F(z) * E[ sigma(dz) | eta ],   F(z) = (2 Im z)^{-2/gamma^2}

sigma is built from bubbles, the complementary components the trace cuts off.
Per trace the estimator

    1. rasterizes the trace on the window grid, keeping first-visit times;
    2. labels the free cells (4-connectivity) and keeps the components that
       touch neither side nor the top of the window (bubbles);
    3. marks the pinch cell of each bubble: the earliest-visited trace cell
       next to the cell that closed it;
    4. per independent zero-boundary field, measures each bubble's boundary
       contour by quantum length (segments without eps clearance count 0; their
       share of contour length is reported and warned about) and
       deposits eps^{alpha_hat} at the pinch when the length is in [eps, 2 eps);
    5. averages deposits over fields and multiplies by F at the pinch.

Traces are aggregated into a mean intensity with a per-cell standard error;
per-trace deposits are kept so box masses get honest error bars.

Also here: Minkowski content, box-counting dimension, the density
G(z) = sin^{8/kappa - 1}(arg z) Im(z)^{d - 2} with d = 1 + kappa/8 and its
box integrals, and the dilation covariance check.

Public API
──────────
    estimate_mu0(traces, fields_per_trace, params, eps, ...)  → MeasureEstimate
    lebesgue_stand_in(traces, window, n)                      → MeasureEstimate
    find_bubbles(grid, trace)                                 → list[Bubble]
    minkowski_content(points | mask, d, radii, grid)          → MinkowskiEstimate
    box_dimension(mask, scales)                               → float
    trace_box_dimension(trace, n)                             → float
    g_kappa_box_integral(box, kappa)                          → float
    intensity_shape_check(estimate, boxes)                    → ShapeReport
    mirror_symmetry_check(estimate, box)                      → dict
    scaling_covariance_check(estimate, b, probe_boxes)        → CovarianceReport
    eps_drift_diagnostic(run, eps_values)                     → DataFrame
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy import integrate, ndimage

from core.config import settings
from core.exceptions import ParameterDomainError
from core.grid import HalfPlaneWindow, SquareGrid, densify_polyline, outer_contour, rasterize_polyline
from core.models import SleParams
from core.params import derive_params
from core.seeding import STREAM_FIELDS, derive_seed
from measures.gmc import length_masses, polyline_segments
from pipeline.runner import run_replicas
from sampling.gff import sample_gff_batch
from sampling.loewner import LoewnerTrace

Box = Tuple[float, float, float, float]


# ============================================================================
# BUBBLES
# ============================================================================

@dataclass
class Bubble:
    pinch: Tuple[int, int]
    closing_time: float
    n_cells: int
    contour: np.ndarray


def _first_visits(grid: SquareGrid, trace: LoewnerTrace) -> np.ndarray:
    rows, cols, seg = rasterize_polyline(grid, trace.points)
    first = np.full((grid.n, grid.n), np.inf)
    if rows.size:
        stamp = trace.times[np.minimum(seg + 1, trace.times.size - 1)]
        np.minimum.at(first, (rows, cols), stamp)
    return first


def find_bubbles(grid: SquareGrid, trace: LoewnerTrace) -> List[Bubble]:
    """
    Components of the window cut off by the rasterized trace.

    Free components touching the left, right or top side of the window are
    not bubbles; components resting on the real line are.
    """
    first = _first_visits(grid, trace)
    occupied = np.isfinite(first)
    labels, count = ndimage.label(~occupied)
    if count == 0:
        return []
    open_labels = np.unique(np.concatenate([labels[:, 0], labels[:, -1], labels[-1, :]]))
    bubbles: List[Bubble] = []
    n = grid.n
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or k in open_labels:
            continue
        r0, r1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, n)
        c0, c1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, n)
        comp = labels[r0:r1, c0:c1] == k
        ring = ndimage.binary_dilation(comp, structure=np.ones((3, 3), dtype=bool)) & occupied[r0:r1, c0:c1]
        if not ring.any():
            continue
        ring_first = np.where(ring, first[r0:r1, c0:c1], -np.inf)
        cr, cc = np.unravel_index(int(np.argmax(ring_first)), ring_first.shape)
        cr, cc = cr + r0, cc + c0
        nr0, nr1, nc0, nc1 = max(cr - 1, 0), min(cr + 2, n), max(cc - 1, 0), min(cc + 2, n)
        near = first[nr0:nr1, nc0:nc1]
        pr, pc = np.unravel_index(int(np.argmin(near)), near.shape)
        bubbles.append(Bubble(
            pinch=(int(pr + nr0), int(pc + nc0)),
            closing_time=float(first[cr, cc]),
            n_cells=int(comp.sum()),
            contour=outer_contour(comp, grid, (r0, c0)),
        ))
    return bubbles


# ============================================================================
# ESTIMATES
# ============================================================================

@dataclass
class MeasureEstimate:
    """Mean intensity over traces with per-trace deposits kept for box errors."""
    mass: np.ndarray
    stderr: np.ndarray
    deposits: pd.DataFrame              # trace, row, col, mass
    n_traces: int
    n_fields_per_trace: int
    kappa: float
    eps: float
    grid: SquareGrid
    window: HalfPlaneWindow
    field_eps: Optional[float]
    field_resolution: Optional[int]
    seed: int
    seeds: List[int]
    mode: str = "mu0"
    metadata: Dict = field(default_factory=dict)
    traces: List[LoewnerTrace] = field(default_factory=list, repr=False)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def _per_trace(self, cells: Optional[np.ndarray] = None) -> np.ndarray:
        d = self.deposits
        if cells is not None:
            d = d[cells[d["row"].to_numpy(), d["col"].to_numpy()]]
        sums = np.zeros(self.n_traces)
        np.add.at(sums, d["trace"].to_numpy(dtype=np.int64), d["mass"].to_numpy())
        return sums

    def _mean_se(self, per_trace: np.ndarray) -> Tuple[float, float]:
        if self.n_traces < 2:
            return float(per_trace.mean()), 0.0
        return float(per_trace.mean()), float(per_trace.std(ddof=1) / math.sqrt(self.n_traces))

    @property
    def total_stderr(self) -> float:
        return self._mean_se(self._per_trace())[1]

    def box_mass(self, box: Box) -> Tuple[float, float]:
        """(mean mass, standard error) of the box [x0, x1) x [y0, y1)."""
        return self._mean_se(self._per_trace(self.grid.box_mask(box)))

    def box_per_trace(self, box: Box) -> np.ndarray:
        return self._per_trace(self.grid.box_mask(box))

    def to_frame(self) -> pd.DataFrame:
        z = self.grid.centers()
        rows, cols = np.nonzero(self.mass)
        return pd.DataFrame({
            "row": rows, "col": cols, "x": z.real[rows, cols], "y": z.imag[rows, cols],
            "value": self.mass[rows, cols], "stderr": self.stderr[rows, cols],
        })

    def describe(self) -> Dict:
        return {
            "mode": self.mode,
            "kappa": self.kappa,
            "eps": self.eps,
            "field_eps": self.field_eps,
            "n": self.grid.n,
            "window_half_width": self.window.half_width,
            "n_traces": self.n_traces,
            "n_fields_per_trace": self.n_fields_per_trace,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "total": self.total,
            "total_stderr": self.total_stderr,
            **self.metadata,
        }


def _aggregate(per_trace: List[Dict], grid: SquareGrid) -> Tuple[np.ndarray, np.ndarray, pd.DataFrame]:
    n_traces = len(per_trace)
    frames = [
        pd.DataFrame({"trace": i, "row": d["rows"], "col": d["cols"], "mass": d["masses"]})
        for i, d in enumerate(per_trace)
    ]
    deposits = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["trace", "row", "col", "mass"])
    deposits = deposits.groupby(["trace", "row", "col"], as_index=False)["mass"].sum()
    total = np.zeros((grid.n, grid.n))
    squares = np.zeros((grid.n, grid.n))
    r = deposits["row"].to_numpy(dtype=np.int64)
    c = deposits["col"].to_numpy(dtype=np.int64)
    m = deposits["mass"].to_numpy(dtype=float)
    np.add.at(total, (r, c), m)
    np.add.at(squares, (r, c), m * m)
    mean = total / n_traces
    if n_traces > 1:
        var = np.maximum(squares - n_traces * mean ** 2, 0.0) / (n_traces - 1)
        stderr = np.sqrt(var / n_traces)
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr, deposits


def mu0_trace_deposits(
    trace: LoewnerTrace,
    grid: SquareGrid,
    window: HalfPlaneWindow,
    field_resolution: int,
    n_fields: int,
    field_seed: int,
    gamma: float,
    alpha_hat: float,
    eps: float,
    field_eps: float,
    radius_exponent: float,
) -> Dict:
    """Field-averaged, F-weighted deposits of one trace (a picklable replica job)."""
    bubbles = find_bubbles(grid, trace)
    empty = {"rows": np.zeros(0, dtype=np.int64), "cols": np.zeros(0, dtype=np.int64), "masses": np.zeros(0),
             "n_bubbles": 0, "n_uncleared": 0, "n_partly_uncleared": 0, "n_counted": 0,
             "contour_length": 0.0, "uncleared_length": 0.0}
    if not bubbles:
        return empty

    pieces = [polyline_segments(b.contour) for b in bubbles]
    mids = np.concatenate([p[0] for p in pieces])
    lens = np.concatenate([p[1] for p in pieces])
    owner = np.concatenate([np.full(p[0].size, i) for i, p in enumerate(pieces)])
    cleared = window.distance_to_boundary(mids) >= field_eps
    n_cleared = np.bincount(owner[cleared], minlength=len(bubbles))
    n_segments = np.bincount(owner, minlength=len(bubbles))
    uncleared = n_cleared == 0
    partly = (n_cleared > 0) & (n_cleared < n_segments)

    counts = np.zeros(len(bubbles))
    for f in sample_gff_batch(field_resolution, n_fields, field_seed, window):
        masses = np.zeros(mids.size)
        masses[cleared] = length_masses(f, mids[cleared], lens[cleared], gamma, field_eps)
        lengths = np.bincount(owner, weights=masses, minlength=len(bubbles))
        counts += (lengths >= eps) & (lengths < 2.0 * eps)

    hit = counts > 0
    pinch = np.array([b.pinch for b in bubbles], dtype=np.int64).reshape(-1, 2)
    rows, cols = pinch[hit, 0], pinch[hit, 1]
    z = grid.centers()[rows, cols]
    F = window.conformal_radius(z) ** (-radius_exponent)
    deposit = eps ** alpha_hat * counts[hit] / n_fields * F
    return {"rows": rows, "cols": cols, "masses": deposit, "n_bubbles": len(bubbles),
            "n_uncleared": int(uncleared.sum()), "n_partly_uncleared": int(partly.sum()),
            "n_counted": int(counts.sum()), "contour_length": float(lens.sum()),
            "uncleared_length": float(lens[~cleared].sum())}


def estimate_mu0(
    traces: Sequence[LoewnerTrace],
    fields_per_trace: int,
    params: SleParams,
    eps: float,
    window: Optional[HalfPlaneWindow] = None,
    n: Optional[int] = None,
    seed: int = 0,
    field_eps: Optional[float] = None,
    field_resolution: Optional[int] = None,
    workers: int = 1,
) -> MeasureEstimate:
    """
    Monte Carlo estimate of E[mu0] on the window grid.

    ``eps`` is the bubble-length threshold; ``field_eps`` the circle-average
    radius of the quantum length (default: settings.default_eps_cells field
    spacings). Trace i uses fields from the child seed (seed, FIELDS, i).
    """
    if not 4.0 < params.kappa < 8.0:
        raise ParameterDomainError("kappa", params.kappa, "(4, 8)")
    if fields_per_trace < 1:
        raise ParameterDomainError("fields_per_trace", fields_per_trace, ">= 1")
    if not eps > 0:
        raise ParameterDomainError("eps", eps, "(0, inf)")
    if not traces:
        raise ParameterDomainError("traces", 0, "at least one trace")
    window = window or HalfPlaneWindow()
    n = n or settings.default_grid_resolution
    grid = window.grid(n)
    field_resolution = min(field_resolution or n, settings.max_gff_size)
    field_h = window.grid(field_resolution).h
    field_eps = field_eps if field_eps is not None else settings.default_eps_cells * field_h

    seeds = [derive_seed(seed, STREAM_FIELDS, i) for i in range(len(traces))]
    jobs = [
        (t, grid, window, field_resolution, fields_per_trace, s, params.gamma, params.alpha_hat, eps, field_eps,
         params.mu0_radius_exponent)
        for t, s in zip(traces, seeds)
    ]
    per_trace = run_replicas(mu0_trace_deposits, jobs, workers)
    mass, stderr, deposits = _aggregate(per_trace, grid)

    bubble_free = sum(1 for d in per_trace if d["n_bubbles"] == 0)
    contour_length = sum(d["contour_length"] for d in per_trace)
    uncleared_length = sum(d["uncleared_length"] for d in per_trace)
    metadata: Dict = {
        "n_bubbles": int(sum(d["n_bubbles"] for d in per_trace)),
        "n_uncleared_bubbles": int(sum(d["n_uncleared"] for d in per_trace)),
        "n_partly_uncleared_bubbles": int(sum(d["n_partly_uncleared"] for d in per_trace)),
        "uncleared_length_fraction": uncleared_length / contour_length if contour_length else 0.0,
        "n_counted": int(sum(d["n_counted"] for d in per_trace)),
        "traces_without_bubbles": bubble_free,
        "warnings": [],
    }
    if bubble_free:
        metadata.setdefault("notes", []).append(f"{bubble_free} traces cut off no bubble and contribute zero")
        logger.warning(f"⚠️ {bubble_free}/{len(traces)} traces without bubbles")
    if uncleared_length > 0:
        fraction = metadata["uncleared_length_fraction"]
        metadata["warnings"].append(
            f"{fraction:.1%} of bubble contour length lies within field_eps={field_eps:.4g} of the window "
            f"boundary and counts zero ({metadata['n_partly_uncleared_bubbles']} bubbles partly affected)")
        logger.warning(f"⚠️ {fraction:.1%} of bubble contour length is uncleared and counts zero")
    logger.debug(f"mu0 estimate: {metadata}")
    return MeasureEstimate(
        mass=mass, stderr=stderr, deposits=deposits, n_traces=len(traces), n_fields_per_trace=fields_per_trace,
        kappa=params.kappa, eps=eps, grid=grid, window=window, field_eps=field_eps,
        field_resolution=field_resolution, seed=seed, seeds=seeds, mode="mu0", metadata=metadata,
        traces=list(traces),
    )


def lebesgue_stand_in(traces: Sequence[LoewnerTrace], window: Optional[HalfPlaneWindow] = None,
                      n: Optional[int] = None) -> MeasureEstimate:
    """gamma = 0 degenerate estimate: Euclidean bubble areas deposited at the pinch cells."""
    if not traces:
        raise ParameterDomainError("traces", 0, "at least one trace")
    window = window or HalfPlaneWindow()
    grid = window.grid(n or settings.default_grid_resolution)
    per_trace = []
    for t in traces:
        bubbles = find_bubbles(grid, t)
        per_trace.append({
            "rows": np.array([b.pinch[0] for b in bubbles], dtype=np.int64),
            "cols": np.array([b.pinch[1] for b in bubbles], dtype=np.int64),
            "masses": np.array([b.n_cells * grid.cell_area for b in bubbles], dtype=float),
        })
    mass, stderr, deposits = _aggregate(per_trace, grid)
    return MeasureEstimate(
        mass=mass, stderr=stderr, deposits=deposits, n_traces=len(traces), n_fields_per_trace=0,
        kappa=traces[0].kappa, eps=0.0, grid=grid, window=window, field_eps=None, field_resolution=None,
        seed=0, seeds=[], mode="lebesgue", traces=list(traces),
    )


# ============================================================================
# MINKOWSKI CONTENT / BOX DIMENSION
# ============================================================================

@dataclass
class MinkowskiEstimate:
    value: float
    radii: np.ndarray
    normalized_areas: np.ndarray
    clipped: bool = False


def _check_radii(radii) -> np.ndarray:
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    if radii.size < 3 or radii[-1] <= 0 or radii[0] / radii[-1] < 10.0:
        raise ParameterDomainError("radii", radii.tolist(), "at least 3 positive radii spanning a decade")
    return radii


def minkowski_content(
    points=None,
    d: float = 1.0,
    radii: Sequence[float] = (0.2, 0.1, 0.05, 0.02),
    mask: Optional[np.ndarray] = None,
    grid: Optional[SquareGrid] = None,
    cells_per_radius: int = 50,
    polyline: bool = True,
) -> MinkowskiEstimate:
    """
    Cont_d(A) ~ r^{d-2} Area(N_r(A)), extrapolated linearly in r to r = 0.

    Pass a polyline (or point set with ``polyline=False``) and it is
    rasterized at min(radii)/cells_per_radius; pass ``mask`` with its
    ``grid`` to measure grid cells. Neighborhoods reaching the edge of the
    grid are flagged as clipped.
    """
    radii = _check_radii(radii)
    if mask is not None:
        if grid is None:
            raise ParameterDomainError("grid", None, "a SquareGrid when measuring a mask")
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return MinkowskiEstimate(0.0, radii, np.zeros(radii.size))
        dist = ndimage.distance_transform_edt(~mask, sampling=grid.h)
        cell_area = grid.cell_area
    else:
        pts = np.atleast_1d(np.asarray(points if points is not None else [], dtype=complex))
        if pts.size == 0:
            return MinkowskiEstimate(0.0, radii, np.zeros(radii.size))
        cell = radii[-1] / cells_per_radius
        if polyline and pts.size > 1:
            pts, _ = densify_polyline(pts, 0.5 * cell)
        pad = radii[0] + 2.0 * cell
        x0, y0 = pts.real.min() - pad, pts.imag.min() - pad
        nx = int(math.ceil((pts.real.max() + pad - x0) / cell))
        ny = int(math.ceil((pts.imag.max() + pad - y0) / cell))
        occupied = np.zeros((ny, nx), dtype=bool)
        occupied[np.floor((pts.imag - y0) / cell).astype(np.int64), np.floor((pts.real - x0) / cell).astype(np.int64)] = True
        dist = ndimage.distance_transform_edt(~occupied, sampling=cell)
        cell_area = cell * cell

    areas = np.array([np.count_nonzero(dist <= r) * cell_area for r in radii])
    normalized = radii ** (d - 2.0) * areas
    border = np.concatenate([dist[0, :], dist[-1, :], dist[:, 0], dist[:, -1]])
    clipped = bool(np.any(border <= radii[0]))
    if clipped:
        logger.warning("⚠️ Minkowski neighborhood clipped by the grid edge")
    _, intercept = np.polyfit(radii, normalized, 1)
    return MinkowskiEstimate(float(intercept), radii, normalized, clipped)


def box_counts(mask: np.ndarray, scales: Sequence[int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    counts = []
    for s in scales:
        rows = int(math.ceil(mask.shape[0] / s)) * s
        cols = int(math.ceil(mask.shape[1] / s)) * s
        padded = np.zeros((rows, cols), dtype=bool)
        padded[:mask.shape[0], :mask.shape[1]] = mask
        counts.append(int(padded.reshape(rows // s, s, cols // s, s).any(axis=(1, 3)).sum()))
    return np.asarray(counts)


def box_dimension(mask: np.ndarray, scales: Optional[Sequence[int]] = None) -> float:
    """
    Slope of log N(s) against log(1/s) over box sides ``s`` in cells.

    Default scales are the powers of two up to an eighth of the mask. An
    empty mask has dimension 0 and a full one 2.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    if mask.all():
        return 2.0
    if scales is None:
        top = max(1, min(mask.shape) // 8)
        scales = [2 ** k for k in range(int(math.log2(top)) + 1)]
    if len(scales) < 4:
        raise ParameterDomainError("scales", list(scales), "at least 4 scales")
    counts = box_counts(mask, scales)
    slope, _ = np.polyfit(np.log(1.0 / np.asarray(scales, dtype=float)), np.log(counts), 1)
    return float(slope)


def trace_box_dimension(trace: LoewnerTrace, n: int = 1024, scales: Optional[Sequence[int]] = None) -> float:
    """Box dimension of a trace rasterized on an n x n grid over its bounding square."""
    pts = trace.points
    half = 0.5 * max(np.ptp(pts.real), np.ptp(pts.imag)) * (1.0 + 1e-9) + 1e-12
    center = complex(0.5 * (pts.real.max() + pts.real.min()), 0.5 * (pts.imag.max() + pts.imag.min()))
    grid = SquareGrid(center, half, n)
    rows, cols, _ = rasterize_polyline(grid, pts)
    mask = np.zeros((n, n), dtype=bool)
    mask[rows, cols] = True
    return box_dimension(mask, scales)


# ============================================================================
# INTENSITY SHAPE
# ============================================================================

def g_kappa(z, kappa: float) -> np.ndarray:
    """sin^{8/kappa - 1}(arg z) Im(z)^{d - 2}, d = 1 + kappa/8 (unnormalized)."""
    z = np.asarray(z, dtype=complex)
    d = min(2.0, 1.0 + kappa / 8.0)
    return np.sin(np.angle(z)) ** (8.0 / kappa - 1.0) * z.imag ** (d - 2.0)


def g_kappa_box_integral(box: Box, kappa: float) -> float:
    """Integral of g_kappa over [x0, x1] x [y0, y1] by adaptive quadrature."""
    x0, x1, y0, y1 = box
    if y0 < 0:
        raise ParameterDomainError("box", box, "boxes in the closed upper half-plane")
    value, _ = integrate.dblquad(lambda y, x: float(g_kappa(complex(x, y), kappa)), x0, x1, y0, y1,
                                 epsabs=1e-10, epsrel=1e-8)
    return float(value)


@dataclass
class ShapeReport:
    table: pd.DataFrame
    constant: float
    max_abs_z: float
    n_outliers: int

    @property
    def passed(self) -> bool:
        return self.n_outliers <= 1

    def to_dict(self) -> Dict:
        return {
            "constant": self.constant,
            "max_abs_z": self.max_abs_z,
            "n_outliers": self.n_outliers,
            "passed": self.passed,
            "boxes": self.table.to_dict(orient="records"),
        }


def intensity_shape_check(estimate: MeasureEstimate, boxes: Sequence[Box], kappa: Optional[float] = None) -> ShapeReport:
    """
    Box masses against c * integral of g_kappa, with c fitted from the sums.

    Also reports each box's mass ratio to the first box next to the
    quadrature ratio.
    """
    kappa = kappa if kappa is not None else estimate.kappa
    rows = []
    for box in boxes:
        mass, se = estimate.box_mass(box)
        rows.append({"x0": box[0], "x1": box[1], "y0": box[2], "y1": box[3], "mass": mass, "stderr": se,
                     "integral": g_kappa_box_integral(box, kappa)})
    table = pd.DataFrame(rows)
    c = table["mass"].sum() / table["integral"].sum()
    table["predicted"] = c * table["integral"]
    se = table["stderr"].to_numpy()
    diff = (table["mass"] - table["predicted"]).to_numpy()
    table["z"] = np.where(se > 0, diff / np.where(se > 0, se, 1.0), 0.0)
    table["mass_ratio"] = table["mass"] / table["mass"].iloc[0]
    table["integral_ratio"] = table["integral"] / table["integral"].iloc[0]
    n_outliers = int((table["z"].abs() >= 3.0).sum())
    return ShapeReport(table, float(c), float(table["z"].abs().max()), n_outliers)


def mirror_symmetry_check(estimate: MeasureEstimate, box: Box) -> Dict:
    """Paired per-trace comparison of a box and its mirror image in the imaginary axis."""
    x0, x1, y0, y1 = box
    a = estimate.box_per_trace(box)
    b = estimate.box_per_trace((-x1, -x0, y0, y1))
    diff = a - b
    se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
    z = 0.0 if se == 0 else float(diff.mean() / se)
    return {"mass": float(a.mean()), "mirror_mass": float(b.mean()), "z": z, "passed": abs(z) < 3.0}


# ============================================================================
# DILATION COVARIANCE
# ============================================================================

@dataclass
class CovarianceReport:
    b: float
    exponent: float
    total_ratio: float
    expected_ratio: float
    total_z: float
    boxes: pd.DataFrame

    @property
    def passed(self) -> bool:
        return abs(self.total_z) < 3.0 and bool((self.boxes["z"].abs() < 3.0).all())

    def to_dict(self) -> Dict:
        return {
            "b": self.b,
            "exponent": self.exponent,
            "total_ratio": self.total_ratio,
            "expected_ratio": self.expected_ratio,
            "total_z": self.total_z,
            "passed": self.passed,
            "boxes": self.boxes.to_dict(orient="records"),
        }


def _z(a: float, sa: float, b: float, sb: float) -> float:
    se = math.hypot(sa, sb)
    return 0.0 if se == 0 else (a - b) / se


def rescaled_estimate(estimate: MeasureEstimate, b: float) -> MeasureEstimate:
    """The same estimator rerun on the traces dilated by b, same seeds and lattice shape."""
    traces = [t.scaled(b) for t in estimate.traces]
    window = estimate.window.scaled(b)
    if estimate.mode == "lebesgue":
        return lebesgue_stand_in(traces, window, estimate.grid.n)
    return estimate_mu0(
        traces, estimate.n_fields_per_trace, derive_params(estimate.kappa), estimate.eps, window,
        estimate.grid.n, estimate.seed, field_eps=estimate.field_eps * b,
        field_resolution=estimate.field_resolution,
    )


def scaling_covariance_check(
    estimate: MeasureEstimate,
    b: float,
    probe_boxes: Sequence[Box] = (),
) -> CovarianceReport:
    """
    Dilation covariance: mass(bA) of the rescaled run against b^w mass(A),
    w = 1 + kappa'/8 for mu0 and w = 2 for the Lebesgue stand-in.
    """
    if not 0.5 <= b <= 2.0:
        raise ParameterDomainError("b", b, "[1/2, 2]")
    if not estimate.traces:
        raise ParameterDomainError("estimate", "no traces", "an estimate that kept its traces")
    w = 2.0 if estimate.mode == "lebesgue" else 1.0 + estimate.kappa / 8.0
    rescaled = estimate if b == 1.0 else rescaled_estimate(estimate, b)
    factor = b ** w

    total, total_se = estimate.total, estimate.total_stderr
    scaled_total, scaled_se = rescaled.total, rescaled.total_stderr
    rows = []
    for box in probe_boxes:
        m, s = estimate.box_mass(box)
        mb, sb = rescaled.box_mass(tuple(v * b for v in box))
        rows.append({"x0": box[0], "x1": box[1], "y0": box[2], "y1": box[3], "mass": m,
                     "rescaled_mass": mb, "pulled_back": mb / factor, "z": _z(mb / factor, sb / factor, m, s)})
    return CovarianceReport(
        b=b,
        exponent=w,
        total_ratio=scaled_total / total if total else float("nan"),
        expected_ratio=factor,
        total_z=_z(scaled_total / factor, scaled_se / factor, total, total_se),
        boxes=pd.DataFrame(rows, columns=["x0", "x1", "y0", "y1", "mass", "rescaled_mass", "pulled_back", "z"]),
    )


# ============================================================================
# EPS DRIFT
# ============================================================================

def eps_drift_diagnostic(run: Callable[[float], object], eps_values: Sequence[float]) -> pd.DataFrame:
    """
    Totals of ``run(eps)`` across a short eps sequence, as ratios to the first.

    ``run`` returns anything with ``total`` and ``total_stderr``.
    """
    rows = []
    for e in eps_values:
        result = run(e)
        rows.append({"eps": e, "total": result.total, "stderr": result.total_stderr})
    frame = pd.DataFrame(rows)
    first = frame["total"].iloc[0]
    frame["ratio_to_first"] = frame["total"] / first if first else np.nan
    return frame
