"""
loopsoup.py — Brownian loop soups and CLE carpets
=================================================

Samples a truncated Brownian loop soup in a disk, merges intersecting loops
into clusters, takes the outer boundaries of the filled clusters (the CLE_kappa
loops for c = c(kappa)) and derives the carpet occupancy grid.

Pipeline
────────
    sample_loop_soup   Poisson number of rooted loops, durations with density
                       proportional to t^-2 on [t_min, t_cap], Brownian bridges;
                       loops leaving the domain are rejected.
    cluster_loops      grid-bucket prefilter + exact segment intersection,
                       connected components of the intersection graph.
    carpet_from_clusters
                       raster fill of each cluster, outer contours, carpet =
                       domain cells not enclosed by any outer boundary.
    thin_soup          independent thinning; one thinning seed gives the
                       monotone coupling across intensities.

Public API
──────────
    expected_root_count(area, c, t_min, t_cap)               → float
    sample_loop_soup(domain, c, t_min, t_cap, n_bridge_steps, seed) → LoopSoup
    cluster_loops(soup, grid_resolution)                     → dict[int, int]
    carpet_from_clusters(soup, clusters, grid)               → CleSample
    label_filled(filled)                                     → (labels, count)
    thin_soup(soup, c_target, seed)                          → LoopSoup
    rotate_soup(soup, quarter_turns)                         → LoopSoup
    restriction_smoke_test(...)                              → RestrictionReport
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy import ndimage, sparse, stats
from scipy.sparse.csgraph import connected_components

from core.config import settings
from core.exceptions import ParameterDomainError
from core.grid import DiskDomain, SquareGrid, outer_contour, rasterize_polyline

# rasterized loops are 8-connected chains, so components are too
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass(frozen=True)
class BrownianLoop:
    """Brownian bridge from root to root in time ``duration``."""
    loop_id: int
    root: complex
    duration: float
    polyline: np.ndarray

    @property
    def diameter(self) -> float:
        p = self.polyline
        return float(max(np.ptp(p.real), np.ptp(p.imag)))


@dataclass
class LoopSoup:
    loops: List[BrownianLoop]
    intensity: float
    t_min: float
    t_cap: float
    domain: DiskDomain
    seed: int
    n_bridge_steps: int
    metadata: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.loops)

    def to_frame(self) -> pd.DataFrame:
        """Long table loop_id, vertex, re, im."""
        if not self.loops:
            return pd.DataFrame(columns=["loop_id", "vertex", "re", "im"])
        frames = [
            pd.DataFrame({
                "loop_id": loop.loop_id,
                "vertex": np.arange(loop.polyline.size),
                "re": loop.polyline.real,
                "im": loop.polyline.imag,
            })
            for loop in self.loops
        ]
        return pd.concat(frames, ignore_index=True)

    def describe(self) -> Dict:
        return {
            "intensity": self.intensity,
            "t_min": self.t_min,
            "t_cap": self.t_cap,
            "domain": {"center": [self.domain.center.real, self.domain.center.imag], "radius": self.domain.radius},
            "seed": self.seed,
            "n_bridge_steps": self.n_bridge_steps,
            "n_loops": len(self.loops),
            **self.metadata,
        }


@dataclass
class CleSample:
    """Outer boundaries of the filled clusters and the carpet they leave."""
    cluster_ids: Dict[int, int]
    outer_boundaries: List[np.ndarray]
    carpet: np.ndarray
    kappa: Optional[float]
    grid: SquareGrid
    domain_mask: np.ndarray
    labels: np.ndarray            # component id per cell, -1 where not enclosed
    metadata: Dict = field(default_factory=dict)

    @property
    def n_loops(self) -> int:
        return len(self.outer_boundaries)

    def component_mask(self, loop_index: int) -> np.ndarray:
        return self.labels == loop_index


# ============================================================================
# SAMPLING
# ============================================================================

def expected_root_count(area: float, c: float, t_min: float, t_cap: float) -> float:
    """
    Mean number of rooted loops c * area * (1/t_min - 1/t_cap) / (2 pi).

    The loop measure has density 1/(2 pi t^2) dt dz; this is the count before
    the stay-in-domain rejection.
    """
    if t_min <= 0:
        raise ParameterDomainError("t_min", t_min, "(0, inf)")
    if t_cap < t_min:
        raise ParameterDomainError("t_min", t_min, f"(0, t_cap={t_cap}]")
    return c * area * (1.0 / t_min - 1.0 / t_cap) / (2.0 * math.pi)


def default_t_min(grid_resolution: int, domain: DiskDomain = DiskDomain()) -> float:
    """Duration whose typical diameter sqrt(t) is one grid cell."""
    return (2.0 * domain.radius / grid_resolution) ** 2


def _bridge(rng: np.random.Generator, duration: float, n_steps: int) -> np.ndarray:
    steps = rng.standard_normal((n_steps, 2)) * math.sqrt(duration / n_steps)
    walk = np.concatenate(([0j], np.cumsum(steps[:, 0] + 1j * steps[:, 1])))
    return walk - np.linspace(0.0, 1.0, n_steps + 1) * walk[-1]


def sample_loop_soup(
    domain: DiskDomain,
    c: float,
    t_min: float,
    t_cap: float,
    n_bridge_steps: Optional[int] = None,
    seed: int = 0,
) -> LoopSoup:
    """
    Poissonian soup of Brownian loops of intensity c restricted to ``domain``.

    Roots are uniform in the domain's bounding box, durations follow the t^-2
    law on [t_min, t_cap] (inverse CDF), each bridge gets
    max(n_bridge_steps, n_bridge_steps * t / t_min) steps capped at
    ``settings.max_bridge_steps`` so segment length stays near the smallest
    loop's scale. Loops with a vertex outside the domain are rejected.
    """
    if not 0.0 <= c <= 1.0:
        raise ParameterDomainError("c", c, "[0, 1]")
    n_bridge = n_bridge_steps or settings.default_bridge_steps
    mean = expected_root_count(domain.box_area, c, t_min, t_cap)
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(mean))

    u = rng.random((count, 3))
    roots = (domain.center - domain.radius * (1 + 1j)) + 2.0 * domain.radius * (u[:, 0] + 1j * u[:, 1])
    durations = 1.0 / (1.0 / t_min - u[:, 2] * (1.0 / t_min - 1.0 / t_cap))

    loops: List[BrownianLoop] = []
    for i in range(count):
        steps = int(min(settings.max_bridge_steps, max(n_bridge, math.ceil(n_bridge * durations[i] / t_min))))
        polyline = roots[i] + _bridge(rng, durations[i], steps)
        polyline[-1] = polyline[0]
        if np.all(domain.contains(polyline)):
            loops.append(BrownianLoop(i, complex(roots[i]), float(durations[i]), polyline))

    acceptance = len(loops) / count if count else float("nan")
    logger.debug(f"🔁 soup c={c:.4g}: {count} rooted loops, {len(loops)} kept (acceptance {acceptance:.3f})")
    return LoopSoup(
        loops=loops,
        intensity=c,
        t_min=t_min,
        t_cap=t_cap,
        domain=domain,
        seed=seed,
        n_bridge_steps=n_bridge,
        metadata={"poisson_count": count, "expected_count": mean, "acceptance_rate": acceptance},
    )


def thin_soup(soup: LoopSoup, c_target: float, seed: int) -> LoopSoup:
    """
    Keep each loop independently with probability c_target / c.

    A loop is kept when its uniform mark is below the ratio; marks depend only
    on ``seed`` and the loop order, so thinning one soup to several targets
    with the same seed yields nested subsets.
    """
    if not 0.0 <= c_target <= soup.intensity:
        raise ParameterDomainError("c_target", c_target, f"[0, {soup.intensity}]")
    marks = np.random.default_rng(seed).random(len(soup.loops))
    ratio = c_target / soup.intensity if soup.intensity > 0 else 0.0
    kept = [loop for loop, m in zip(soup.loops, marks) if m < ratio]
    meta = dict(soup.metadata, thinned_from=soup.intensity, thinning_seed=seed)
    return replace(soup, loops=kept, intensity=c_target, metadata=meta)


def rotate_soup(soup: LoopSoup, quarter_turns: int) -> LoopSoup:
    """Exact rotation by a multiple of pi/2 about the domain center."""
    r = 1j ** (quarter_turns % 4)
    c0 = soup.domain.center
    loops = [
        BrownianLoop(l.loop_id, c0 + r * (l.root - c0), l.duration, c0 + r * (l.polyline - c0))
        for l in soup.loops
    ]
    return replace(soup, loops=loops, metadata=dict(soup.metadata, quarter_turns=quarter_turns % 4))


# ============================================================================
# CLUSTERS
# ============================================================================

def _segment_cells(a: np.ndarray, b: np.ndarray, x0: float, y0: float, cell: float, g: int):
    """Bucket ids of every cell overlapped by each segment's bounding box."""
    ci0 = np.clip(np.floor((np.minimum(a.real, b.real) - x0) / cell).astype(np.int64), 0, g - 1)
    ci1 = np.clip(np.floor((np.maximum(a.real, b.real) - x0) / cell).astype(np.int64), 0, g - 1)
    cj0 = np.clip(np.floor((np.minimum(a.imag, b.imag) - y0) / cell).astype(np.int64), 0, g - 1)
    cj1 = np.clip(np.floor((np.maximum(a.imag, b.imag) - y0) / cell).astype(np.int64), 0, g - 1)
    nx = ci1 - ci0 + 1
    ny = cj1 - cj0 + 1
    counts = nx * ny
    seg = np.repeat(np.arange(a.size), counts)
    offset = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rep_nx = np.repeat(nx, counts)
    cells = (np.repeat(cj0, counts) + offset // rep_nx) * g + np.repeat(ci0, counts) + offset % rep_nx
    return seg, cells


def _cross(o: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    u, v = p - o, q - o
    return u.real * v.imag - u.imag * v.real


def segments_intersect(a0, a1, b0, b1) -> np.ndarray:
    """Closed-segment intersection; touching counts as intersecting."""
    d1 = _cross(b0, b1, a0)
    d2 = _cross(b0, b1, a1)
    d3 = _cross(a0, a1, b0)
    d4 = _cross(a0, a1, b1)
    box = (
        (np.minimum(a0.real, a1.real) <= np.maximum(b0.real, b1.real))
        & (np.minimum(b0.real, b1.real) <= np.maximum(a0.real, a1.real))
        & (np.minimum(a0.imag, a1.imag) <= np.maximum(b0.imag, b1.imag))
        & (np.minimum(b0.imag, b1.imag) <= np.maximum(a0.imag, a1.imag))
    )
    return box & (d1 * d2 <= 0) & (d3 * d4 <= 0)


def cluster_loops(soup: LoopSoup, grid_resolution: int, batch: int = 2_000_000) -> Dict[int, int]:
    """
    Cluster id per loop position: loops share a cluster iff a chain of
    pairwise-intersecting loops joins them.

    Segments are bucketed into a grid_resolution^2 lattice; only segment pairs
    from different loops sharing a bucket are tested exactly.
    """
    n_loops = len(soup.loops)
    if n_loops == 0:
        return {}
    starts, ends, owner = [], [], []
    for i, loop in enumerate(soup.loops):
        p = loop.polyline
        starts.append(p[:-1])
        ends.append(p[1:])
        owner.append(np.full(p.size - 1, i, dtype=np.int64))
    a = np.concatenate(starts)
    b = np.concatenate(ends)
    owner = np.concatenate(owner)

    dom = soup.domain
    cell = 2.0 * dom.radius / grid_resolution
    x0, y0 = dom.center.real - dom.radius, dom.center.imag - dom.radius
    seg, cells = _segment_cells(a, b, x0, y0, cell, grid_resolution)

    order = np.lexsort((owner[seg], cells))
    seg, cells = seg[order], cells[order]
    bounds = np.flatnonzero(np.diff(cells)) + 1
    groups = np.split(seg, bounds)

    pairs_i: List[np.ndarray] = []
    pairs_j: List[np.ndarray] = []
    pending = 0
    edges_a: List[np.ndarray] = []
    edges_b: List[np.ndarray] = []

    def flush():
        if not pairs_i:
            return
        si = np.concatenate(pairs_i)
        sj = np.concatenate(pairs_j)
        hit = segments_intersect(a[si], b[si], a[sj], b[sj])
        edges_a.append(owner[si[hit]])
        edges_b.append(owner[sj[hit]])
        pairs_i.clear()
        pairs_j.clear()

    for group in groups:
        if group.size < 2 or owner[group[0]] == owner[group[-1]]:
            continue
        ii, jj = np.triu_indices(group.size, k=1)
        distinct = owner[group[ii]] != owner[group[jj]]
        pairs_i.append(group[ii[distinct]])
        pairs_j.append(group[jj[distinct]])
        pending += int(distinct.sum())
        if pending >= batch:
            flush()
            pending = 0
    flush()

    if edges_a:
        ea, eb = np.concatenate(edges_a), np.concatenate(edges_b)
    else:
        ea = eb = np.zeros(0, dtype=np.int64)
    graph = sparse.coo_matrix((np.ones(ea.size), (ea, eb)), shape=(n_loops, n_loops))
    _, labels = connected_components(graph, directed=False)
    return {i: int(labels[i]) for i in range(n_loops)}


# ============================================================================
# CARPET
# ============================================================================

def label_filled(filled: np.ndarray):
    """8-connected components of a filled mask, as (labels, count)."""
    labels, count = ndimage.label(filled, structure=EIGHT_CONNECTED)
    return labels, int(count)


def carpet_from_clusters(
    soup: LoopSoup,
    clusters: Dict[int, int],
    grid: SquareGrid,
    kappa: Optional[float] = None,
) -> CleSample:
    """
    Fill every cluster, trace outer contours, and mark enclosed cells.

    Each cluster's loops are rasterized as 8-connected chains and hole-filled
    inside the cluster's bounding window; the union of filled clusters is
    labelled into 8-connected components, one CLE loop each. The carpet is the
    set of domain cells outside every filled component.
    """
    domain_mask = soup.domain.mask(grid)
    filled = np.zeros((grid.n, grid.n), dtype=bool)
    subcell = 0

    by_cluster: Dict[int, List[int]] = {}
    for idx, cid in clusters.items():
        by_cluster.setdefault(cid, []).append(idx)

    for members in by_cluster.values():
        rows, cols = [], []
        for idx in members:
            r, c, _ = rasterize_polyline(grid, soup.loops[idx].polyline)
            rows.append(r)
            cols.append(c)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        if r.size == 0:
            continue
        r0, r1, c0, c1 = r.min(), r.max(), c.min(), c.max()
        if r1 - r0 < 1 and c1 - c0 < 1:
            subcell += 1
        window = np.zeros((r1 - r0 + 3, c1 - c0 + 3), dtype=bool)
        window[r - r0 + 1, c - c0 + 1] = True
        window = ndimage.binary_fill_holes(window)
        rs, re_ = max(r0 - 1, 0), min(r1 + 2, grid.n)
        cs, ce = max(c0 - 1, 0), min(c1 + 2, grid.n)
        filled[rs:re_, cs:ce] |= window[rs - r0 + 1:re_ - r0 + 1, cs - c0 + 1:ce - c0 + 1]

    filled &= domain_mask
    labels, n_components = label_filled(filled)
    labels = labels - 1

    boundaries: List[np.ndarray] = []
    for k, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            boundaries.append(np.zeros(0, dtype=complex))
            continue
        component = labels[sl] == k
        boundaries.append(outer_contour(component, grid, (sl[0].start, sl[1].start)))

    metadata: Dict = {"n_clusters": len(by_cluster), "n_components": int(n_components)}
    if subcell:
        metadata["warnings"] = [f"{subcell} clusters thinner than one grid cell; refine the grid"]
        logger.warning(f"⚠️ {subcell} clusters are thinner than a grid cell (h={grid.h:.3g})")

    return CleSample(
        cluster_ids=dict(clusters),
        outer_boundaries=boundaries,
        carpet=domain_mask & ~filled,
        kappa=kappa,
        grid=grid,
        domain_mask=domain_mask,
        labels=labels,
        metadata=metadata,
    )


def sample_cle(
    kappa: float,
    c: float,
    grid: SquareGrid,
    seed: int,
    domain: DiskDomain = DiskDomain(),
    t_min: Optional[float] = None,
    t_cap: float = 2.0,
    n_bridge_steps: Optional[int] = None,
):
    """Soup, clusters and carpet in one call; returns (soup, cle)."""
    soup = sample_loop_soup(domain, c, t_min or default_t_min(grid.n, domain), t_cap, n_bridge_steps, seed)
    clusters = cluster_loops(soup, grid.n)
    return soup, carpet_from_clusters(soup, clusters, grid, kappa=kappa)


# ============================================================================
# RESTRICTION SMOKE TEST
# ============================================================================

@dataclass
class RestrictionReport:
    count_ks: float
    count_p: float
    diameter_ks: float
    diameter_p: float
    inside_counts: List[int]
    fresh_counts: List[int]
    significance: float = 0.01

    @property
    def passed(self) -> bool:
        return self.count_p >= self.significance and self.diameter_p >= self.significance

    def to_dict(self) -> Dict:
        return {
            "count_ks": self.count_ks,
            "count_p": self.count_p,
            "diameter_ks": self.diameter_ks,
            "diameter_p": self.diameter_p,
            "passed": self.passed,
        }


def restriction_smoke_test(
    sub_disk: DiskDomain,
    c: float,
    t_min: float,
    t_cap: float,
    n_replicas: int,
    seed: int,
    n_bridge_steps: Optional[int] = None,
) -> RestrictionReport:
    """
    Loops of a unit-disk soup that stay inside ``sub_disk`` against a fresh
    soup sampled in ``sub_disk``: two-sample KS on counts and diameters.
    """
    inside_counts, fresh_counts = [], []
    inside_diam, fresh_diam = [], []
    for r in range(n_replicas):
        big = sample_loop_soup(DiskDomain(), c, t_min, t_cap, n_bridge_steps, seed + 2 * r)
        inner = [l for l in big.loops if np.all(sub_disk.contains(l.polyline))]
        fresh = sample_loop_soup(sub_disk, c, t_min, t_cap, n_bridge_steps, seed + 2 * r + 1)
        inside_counts.append(len(inner))
        fresh_counts.append(len(fresh.loops))
        inside_diam.extend(l.diameter for l in inner)
        fresh_diam.extend(l.diameter for l in fresh.loops)
    count_test = stats.ks_2samp(inside_counts, fresh_counts)
    if inside_diam and fresh_diam:
        diam_test = stats.ks_2samp(inside_diam, fresh_diam)
        d_stat, d_p = float(diam_test.statistic), float(diam_test.pvalue)
    else:
        d_stat, d_p = 0.0, 1.0
    return RestrictionReport(
        count_ks=float(count_test.statistic),
        count_p=float(count_test.pvalue),
        diameter_ks=d_stat,
        diameter_p=d_p,
        inside_counts=inside_counts,
        fresh_counts=fresh_counts,
    )
