"""Rectilinear rasters and exact coverage-fraction zonal statistics.

Cells are addressed row-major with row 0 at the northern edge, so cell
``index = row * n_cols + col``. ``x_origin``/``y_origin`` are the south-west
corner of the raster (the ESRI ``xllcorner``/``yllcorner`` convention).

Coverage fractions are computed by clipping each polygon ring against the
column slab of every candidate column and then against each row of that slab
(half-plane clipping against the four cell edges). Ring contributions are
accumulated as signed areas, so holes subtract from their exterior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_NODATA = -9999.0
OVERLAP_TOLERANCE = 1e-6
# pieces smaller than this (in cell units) are clipping noise, not coverage
_MIN_PIECE = 1e-14


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GridLayout:
    x_origin: float
    y_origin: float
    cell_dx: float
    cell_dy: float
    n_cols: int
    n_rows: int
    crs_tag: str = ""

    def __post_init__(self):
        if not (self.cell_dx > 0 and self.cell_dy > 0):
            raise ValueError("cell sizes must be positive")
        if self.n_cols <= 0 or self.n_rows <= 0:
            raise ValueError("grid must have at least one row and column")

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def cell_area(self) -> float:
        return abs(self.cell_dx * self.cell_dy)

    @property
    def y_top(self) -> float:
        return self.y_origin + self.n_rows * self.cell_dy

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        return (
            self.x_origin,
            self.y_origin,
            self.x_origin + self.n_cols * self.cell_dx,
            self.y_top,
        )

    def cell_bounds(self, index: int) -> tuple[float, float, float, float]:
        row, col = divmod(int(index), self.n_cols)
        x0 = self.x_origin + col * self.cell_dx
        y1 = self.y_top - row * self.cell_dy
        return (x0, y1 - self.cell_dy, x0 + self.cell_dx, y1)

    def cell_index(self, x: float, y: float) -> int | None:
        """Index of the cell containing point (x, y), or None outside the grid."""
        col = math.floor((x - self.x_origin) / self.cell_dx)
        row = math.floor((self.y_top - y) / self.cell_dy)
        if 0 <= col < self.n_cols and 0 <= row < self.n_rows:
            return row * self.n_cols + col
        return None

    def same_as(self, other: "GridLayout") -> bool:
        return (
            self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and self.cell_dx == other.cell_dx
            and self.cell_dy == other.cell_dy
            and self.n_cols == other.n_cols
            and self.n_rows == other.n_rows
            and self.crs_tag == other.crs_tag
        )


@dataclass
class Grid:
    """A raster layer: layout plus a (n_rows, n_cols) float array."""

    layout: GridLayout
    values: np.ndarray
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.layout.n_cells:
            raise ValueError(
                f"expected {self.layout.n_cells} values, got {values.size}"
            )
        values = values.reshape(self.layout.n_rows, self.layout.n_cols)
        bad = ~np.isfinite(values) & ~self._nodata_mask(values)
        if bad.any():
            raise ValueError("grid cells must be finite or nodata")
        self.values = values

    def _nodata_mask(self, values: np.ndarray) -> np.ndarray:
        if math.isnan(self.nodata):
            return np.isnan(values)
        return values == self.nodata

    @property
    def nodata_mask(self) -> np.ndarray:
        return self._nodata_mask(self.values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @classmethod
    def full(cls, layout: GridLayout, value: float, nodata: float = DEFAULT_NODATA) -> "Grid":
        return cls(layout, np.full((layout.n_rows, layout.n_cols), float(value)), nodata)

    def valid_values(self) -> np.ndarray:
        """Flat array with nodata cells replaced by NaN."""
        out = self.values.astype(np.float64).ravel().copy()
        out[self.nodata_mask.ravel()] = np.nan
        return out


def _ring_array(ring) -> np.ndarray:
    pts = np.asarray(ring, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("ring coordinates must be (x, y) pairs")
    if len(pts) < 4:
        raise GeometryError("ring needs at least 4 points")
    if not np.array_equal(pts[0], pts[-1]):
        raise GeometryError("ring is not closed")
    if not np.isfinite(pts).all():
        raise GeometryError("non-finite coordinate")
    return pts


def ring_signed_area(pts: np.ndarray) -> float:
    """Shoelace signed area of a closed ring (positive = counter-clockwise)."""
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


@dataclass(frozen=True)
class Polygon:
    exterior: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "exterior", _ring_array(self.exterior))
        object.__setattr__(self, "holes", tuple(_ring_array(h) for h in self.holes))

    @classmethod
    def box(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "Polygon":
        return cls([(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax), (xmin, ymin)])

    @property
    def area(self) -> float:
        return abs(ring_signed_area(self.exterior)) - sum(
            abs(ring_signed_area(h)) for h in self.holes
        )

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        pts = self.exterior
        return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())

    def translated(self, dx: float, dy: float) -> "Polygon":
        off = np.array([dx, dy])
        return Polygon(self.exterior + off, tuple(h + off for h in self.holes))

    def to_geojson(self) -> list:
        return [r.tolist() for r in (self.exterior, *self.holes)]


@dataclass(frozen=True)
class CoverageVector:
    """Covered cells (ascending index) and the covered fraction of each."""

    cell_index: np.ndarray
    fraction: np.ndarray
    layout: GridLayout | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.cell_index)

    def __iter__(self):
        return iter(zip(self.cell_index.tolist(), self.fraction.tolist()))

    @property
    def covered_area(self) -> float:
        if self.layout is None:
            raise ValueError("coverage has no layout attached")
        return math.fsum(self.fraction.tolist()) * self.layout.cell_area

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.cell_index.tolist(), self.fraction.tolist()))


# -- clipping ---------------------------------------------------------------

def _clip_lo(pts: list, axis: int, bound: float) -> list:
    """Keep the part of polygon ``pts`` with coordinate[axis] >= bound."""
    out = []
    n = len(pts)
    if n == 0:
        return out
    other = 1 - axis
    prev = pts[-1]
    prev_in = prev[axis] >= bound
    for cur in pts:
        cur_in = cur[axis] >= bound
        if cur_in != prev_in:
            t = (bound - prev[axis]) / (cur[axis] - prev[axis])
            p = [0.0, 0.0]
            p[axis] = bound
            p[other] = prev[other] + t * (cur[other] - prev[other])
            out.append(tuple(p))
        if cur_in:
            out.append(cur)
        prev, prev_in = cur, cur_in
    return out


def _clip_hi(pts: list, axis: int, bound: float) -> list:
    """Keep the part of polygon ``pts`` with coordinate[axis] <= bound."""
    out = []
    n = len(pts)
    if n == 0:
        return out
    other = 1 - axis
    prev = pts[-1]
    prev_in = prev[axis] <= bound
    for cur in pts:
        cur_in = cur[axis] <= bound
        if cur_in != prev_in:
            t = (bound - prev[axis]) / (cur[axis] - prev[axis])
            p = [0.0, 0.0]
            p[axis] = bound
            p[other] = prev[other] + t * (cur[other] - prev[other])
            out.append(tuple(p))
        if cur_in:
            out.append(cur)
        prev, prev_in = cur, cur_in
    return out


def _shoelace(pts: list) -> float:
    s = 0.0
    px, py = pts[-1]
    for x, y in pts:
        s += px * y - x * py
        px, py = x, y
    return 0.5 * s


def _ring_cell_areas(pts: np.ndarray, layout: GridLayout, acc: dict, sign: float) -> None:
    """Add sign * |area(ring ∩ cell)| (in cell units) into ``acc`` per cell."""
    # normalised frame: one cell == unit square, v grows southwards
    u = (pts[:-1, 0] - layout.x_origin) / layout.cell_dx
    v = (layout.y_top - pts[:-1, 1]) / layout.cell_dy
    ring = list(zip(u.tolist(), v.tolist()))
    total = _shoelace(ring)
    if total == 0.0:
        return
    orient = sign if total > 0 else -sign
    c0 = max(int(math.floor(u.min())), 0)
    c1 = min(int(math.ceil(u.max())), layout.n_cols)
    r0 = max(int(math.floor(v.min())), 0)
    r1 = min(int(math.ceil(v.max())), layout.n_rows)
    n_cols = layout.n_cols
    for col in range(c0, c1):
        slab = _clip_hi(_clip_lo(ring, 0, float(col)), 0, float(col + 1))
        if len(slab) < 3:
            continue
        sv = [p[1] for p in slab]
        lo = max(int(math.floor(min(sv))), r0)
        hi = min(int(math.ceil(max(sv))), r1)
        for row in range(lo, hi):
            piece = _clip_hi(_clip_lo(slab, 1, float(row)), 1, float(row + 1))
            if len(piece) < 3:
                continue
            a = _shoelace(piece)
            if a != 0.0:
                idx = row * n_cols + col
                acc[idx] = acc.get(idx, 0.0) + orient * a


def _as_polygons(geometry) -> list[Polygon]:
    if isinstance(geometry, Polygon):
        return [geometry]
    polys = list(geometry)
    if not all(isinstance(p, Polygon) for p in polys):
        raise TypeError("geometry must be a Polygon or a sequence of Polygons")
    return polys


def compute_coverage(layout: GridLayout | Grid, geometry: Polygon | Sequence[Polygon]) -> CoverageVector:
    """Exact fraction of every grid cell covered by ``geometry``.

    ``geometry`` may be a single Polygon or a sequence of parts (a
    MultiPolygon), whose coverages add cell-wise. Raises GeometryError
    ("empty geometry") for zero-area input. A polygon entirely outside the
    grid gives an empty CoverageVector.
    """
    if isinstance(layout, Grid):
        layout = layout.layout
    polys = _as_polygons(geometry)
    if not polys or all(ring_signed_area(p.exterior) == 0.0 for p in polys):
        raise GeometryError("empty geometry")
    acc: dict[int, float] = {}
    for poly in polys:
        _ring_cell_areas(poly.exterior, layout, acc, 1.0)
        for hole in poly.holes:
            _ring_cell_areas(hole, layout, acc, -1.0)
    keep = sorted(i for i, a in acc.items() if a > _MIN_PIECE)
    idx = np.array(keep, dtype=np.int64)
    frac = np.array([min(acc[i], 1.0) for i in keep], dtype=np.float64)
    return CoverageVector(idx, frac, layout)


# -- zonal statistics -------------------------------------------------------

def _check_layout(grid: Grid, coverage: CoverageVector) -> None:
    if coverage.layout is not None and not coverage.layout.same_as(grid.layout):
        raise ValueError("coverage was computed on a different grid layout")


def zonal_mean(grid: Grid, coverage: CoverageVector) -> float | None:
    """Coverage-weighted mean of non-nodata cells; None when nothing valid overlaps."""
    _check_layout(grid, coverage)
    if len(coverage) == 0:
        return None
    vals = grid.valid_values()[coverage.cell_index]
    ok = ~np.isnan(vals)
    if not ok.any():
        return None
    w = coverage.fraction[ok] * grid.layout.cell_area
    v = vals[ok]
    mean = float(np.dot(w, v) / w.sum())
    # rounding must not push the mean outside the contributing range
    return min(max(mean, float(v.min())), float(v.max()))


def zonal_sum(grid: Grid, coverage: CoverageVector) -> float | None:
    """Σ fraction·value over non-nodata cells (for count fields such as population)."""
    _check_layout(grid, coverage)
    if len(coverage) == 0:
        return None
    vals = grid.valid_values()[coverage.cell_index]
    ok = ~np.isnan(vals)
    if not ok.any():
        return None
    return float(np.dot(coverage.fraction[ok], vals[ok]))


def assign_to_cells(
    unit_values: Mapping[str, float],
    coverages: Mapping[str, CoverageVector],
    layout: GridLayout,
    nodata: float = DEFAULT_NODATA,
) -> Grid:
    """Spread per-unit values onto cells as the fraction-weighted mean of overlapping units.

    Cells touched by no unit are nodata. Raises GeometryError when the unit
    fractions for a cell add up to more than 1 (overlapping geometries).
    """
    num = np.zeros(layout.n_cells)
    den = np.zeros(layout.n_cells)
    for key in sorted(unit_values):
        if key not in coverages:
            raise KeyError(f"no coverage for unit {key}")
        cov = coverages[key]
        if cov.layout is not None and not cov.layout.same_as(layout):
            raise ValueError(f"coverage for {key} is on a different layout")
        val = float(unit_values[key])
        num[cov.cell_index] += cov.fraction * val
        den[cov.cell_index] += cov.fraction
    if (den > 1.0 + OVERLAP_TOLERANCE).any():
        bad = int(np.argmax(den))
        raise GeometryError(f"overlapping geometries (cell {bad} covered {den[bad]:.6f} times)")
    out = np.full(layout.n_cells, nodata, dtype=np.float64)
    hit = den > 0
    out[hit] = num[hit] / den[hit]
    return Grid(layout, out.reshape(layout.n_rows, layout.n_cols), nodata)


def distribute_to_cells(
    unit_totals: Mapping[str, float],
    coverages: Mapping[str, CoverageVector],
    layout: GridLayout,
) -> np.ndarray:
    """Split count totals (e.g. population) over cells in proportion to covered area.

    Returns a flat array of per-cell amounts; the total is conserved for units
    lying inside the grid.
    """
    out = np.zeros(layout.n_cells)
    for key in sorted(unit_totals):
        cov = coverages[key]
        covered = cov.fraction.sum()
        if covered <= 0:
            continue
        out[cov.cell_index] += float(unit_totals[key]) * cov.fraction / covered
    return out


def coverages_for(layout: GridLayout, geometries: Mapping[str, Iterable[Polygon]]) -> dict[str, CoverageVector]:
    return {key: compute_coverage(layout, list(geometries[key])) for key in sorted(geometries)}
