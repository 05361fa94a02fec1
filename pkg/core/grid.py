"""
Square lattices and the two ambient domains used by the lab.

A ``SquareGrid`` covers the bounding box of a domain with n x n cells; arrays
are indexed ``[row, col]`` with the row coordinate increasing with Im(z).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage
from skimage import measure


@dataclass(frozen=True)
class SquareGrid:
    center: complex
    half_width: float
    n: int

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self) -> float:
        return self.h ** 2

    @property
    def x0(self) -> float:
        return self.center.real - self.half_width

    @property
    def y0(self) -> float:
        return self.center.imag - self.half_width

    def centers(self) -> np.ndarray:
        """Complex cell centers, shape (n, n)."""
        ticks = (np.arange(self.n) + 0.5) * self.h
        return (self.x0 + ticks)[None, :] + 1j * (self.y0 + ticks)[:, None]

    def index_of(self, z) -> Tuple[np.ndarray, np.ndarray]:
        """(row, col) of the cell containing each point; may fall outside [0, n)."""
        z = np.asarray(z, dtype=complex)
        col = np.floor((z.real - self.x0) / self.h).astype(np.int64)
        row = np.floor((z.imag - self.y0) / self.h).astype(np.int64)
        return row, col

    def fractional_index(self, z) -> Tuple[np.ndarray, np.ndarray]:
        """Continuous (row, col) coordinates with cell centers at integers."""
        z = np.asarray(z, dtype=complex)
        return (z.imag - self.y0) / self.h - 0.5, (z.real - self.x0) / self.h - 0.5

    def in_bounds(self, row: np.ndarray, col: np.ndarray) -> np.ndarray:
        return (row >= 0) & (row < self.n) & (col >= 0) & (col < self.n)

    def scaled(self, b: float) -> "SquareGrid":
        """Grid of the dilated box z -> b z, cell (r, c) maps onto cell (r, c)."""
        return SquareGrid(self.center * b, self.half_width * b, self.n)

    def box_mask(self, box: Tuple[float, float, float, float]) -> np.ndarray:
        """Cells whose centers lie in [x0, x1) x [y0, y1)."""
        x0, x1, y0, y1 = box
        z = self.centers()
        return (z.real >= x0) & (z.real < x1) & (z.imag >= y0) & (z.imag < y1)


@dataclass(frozen=True)
class DiskDomain:
    """Open disk; the unit disk by default."""
    center: complex = 0j
    radius: float = 1.0

    @property
    def box_area(self) -> float:
        return (2.0 * self.radius) ** 2

    def contains(self, z) -> np.ndarray:
        return np.abs(np.asarray(z) - self.center) < self.radius

    def distance_to_boundary(self, z) -> np.ndarray:
        return self.radius - np.abs(np.asarray(z) - self.center)

    def grid(self, n: int) -> SquareGrid:
        return SquareGrid(complex(self.center), float(self.radius), int(n))

    def mask(self, grid: SquareGrid) -> np.ndarray:
        return self.contains(grid.centers())

    def conformal_radius(self, z) -> np.ndarray:
        """Exact conformal radius (r^2 - |z - center|^2)/r."""
        w = np.abs(np.asarray(z) - self.center)
        return (self.radius ** 2 - w ** 2) / self.radius

    def reference_point(self) -> complex:
        return complex(self.center)


@dataclass(frozen=True)
class HalfPlaneWindow:
    """
    The box [-L, L] x [0, 2L] standing in for the upper half-plane.

    Zero boundary data is imposed on all four sides; only the bottom side is
    part of the real line.
    """
    half_width: float = 1.0

    @property
    def box_area(self) -> float:
        return (2.0 * self.half_width) ** 2

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z)
        L = self.half_width
        return (np.abs(z.real) < L) & (z.imag > 0) & (z.imag < 2 * L)

    def distance_to_boundary(self, z) -> np.ndarray:
        z = np.asarray(z)
        L = self.half_width
        return np.minimum.reduce([z.imag, 2 * L - z.imag, L - z.real, z.real + L])

    def grid(self, n: int) -> SquareGrid:
        return SquareGrid(complex(0.0, self.half_width), float(self.half_width), int(n))

    def mask(self, grid: SquareGrid) -> np.ndarray:
        return self.contains(grid.centers())

    def conformal_radius(self, z) -> np.ndarray:
        """Half-plane conformal radius 2 Im z."""
        return 2.0 * np.asarray(z).imag

    def reference_point(self) -> complex:
        return complex(0.0, self.half_width)

    def scaled(self, b: float) -> "HalfPlaneWindow":
        return HalfPlaneWindow(self.half_width * b)


def boundary_ring(mask: np.ndarray) -> np.ndarray:
    """Cells of ``mask`` with a 4-neighbour outside it."""
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def densify_polyline(points: np.ndarray, max_step: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Resample a polyline so consecutive points are at most ``max_step`` apart.

    Returns the dense points and, for each, the index of the segment it came
    from (vertex k belongs to segment k - 1, the first vertex to segment 0).
    """
    points = np.asarray(points, dtype=complex)
    if points.size < 2:
        return points.copy(), np.zeros(points.size, dtype=np.int64)
    seg = np.diff(points)
    pieces = np.maximum(1, np.ceil(np.abs(seg) / max_step).astype(np.int64))
    seg_index = np.repeat(np.arange(seg.size), pieces)
    starts = np.cumsum(pieces) - pieces
    frac = (np.arange(pieces.sum()) - np.repeat(starts, pieces)) / np.repeat(pieces, pieces)
    dense = points[:-1][seg_index] + frac * seg[seg_index]
    dense = np.append(dense, points[-1])
    seg_index = np.append(seg_index, seg.size - 1)
    return dense, seg_index


def rasterize_polyline(grid: SquareGrid, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cells visited by a polyline, as an 8-connected chain.

    Returns (row, col, segment index) for every dense sample that lands on the
    grid.
    """
    dense, seg_index = densify_polyline(points, 0.5 * grid.h)
    row, col = grid.index_of(dense)
    keep = grid.in_bounds(row, col)
    return row[keep], col[keep], seg_index[keep]


def outer_contour(component: np.ndarray, grid: SquareGrid, offset: Tuple[int, int] = (0, 0)) -> np.ndarray:
    """
    Closed outer contour of a boolean component, in complex coordinates.

    ``component`` is a window of the grid whose top-left cell is ``offset``;
    the contour runs through cell centers at level 1/2, longest piece kept.
    """
    padded = np.pad(component.astype(float), 1)
    contours = measure.find_contours(padded, 0.5)
    if not contours:
        return np.zeros(0, dtype=complex)
    longest = max(contours, key=len)
    rows = longest[:, 0] - 1 + offset[0]
    cols = longest[:, 1] - 1 + offset[1]
    pts = (grid.x0 + (cols + 0.5) * grid.h) + 1j * (grid.y0 + (rows + 0.5) * grid.h)
    if pts[0] != pts[-1]:
        pts = np.append(pts, pts[0])
    return pts
