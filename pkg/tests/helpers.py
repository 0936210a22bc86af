"""Shared generators and independent oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon, box as shapely_box

from hiascale.grid import Grid, GridLayout, Polygon


def random_convex(rng: np.random.Generator, cx: float, cy: float, r: float, n: int | None = None) -> Polygon:
    """Convex polygon: points on a jittered circle, sorted by angle."""
    n = n or int(rng.integers(3, 12))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = r * rng.uniform(0.5, 1.0, n)
    pts = np.column_stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)])
    hull = shapely.convex_hull(shapely.multipoints(pts))
    ring = np.asarray(hull.exterior.coords)
    return Polygon(ring)


def random_rectilinear(rng: np.random.Generator, x0: float, y0: float, w: float, h: float) -> Polygon:
    """Staircase polygon with axis-parallel edges, plus optionally a hole."""
    steps = int(rng.integers(1, 5))
    xs = np.sort(rng.uniform(x0, x0 + w, steps))
    ys = np.sort(rng.uniform(y0, y0 + h, steps))[::-1]
    pts = [(x0, y0), (x0 + w, y0)]
    cur_y = y0 + h
    pts.append((x0 + w, cur_y))
    for x, y in zip(xs[::-1], ys[::-1]):
        pts.append((x, cur_y))
        cur_y = max(y, y0 + 0.05 * h)
        pts.append((x, cur_y))
    pts.append((x0, cur_y))
    pts.append((x0, y0))
    holes = ()
    if rng.random() < 0.5:
        hw, hh = 0.1 * w, 0.03 * h
        hx, hy = x0 + 0.1 * w, y0 + 0.01 * h
        holes = ([(hx, hy), (hx, hy + hh), (hx + hw, hy + hh), (hx + hw, hy), (hx, hy)],)
    return Polygon(pts, holes)


def to_shapely(poly: Polygon) -> ShapelyPolygon:
    return ShapelyPolygon(poly.exterior, [h for h in poly.holes])


def clipped_area(poly: Polygon, layout: GridLayout) -> float:
    return to_shapely(poly).intersection(shapely_box(*layout.extent)).area


def cell_fractions_shapely(poly: Polygon, layout: GridLayout) -> dict[int, float]:
    """Per-cell intersection area / cell area, by general polygon overlay."""
    shp = to_shapely(poly)
    out = {}
    for i in range(layout.n_cells):
        a = shp.intersection(shapely_box(*layout.cell_bounds(i))).area
        if a > 0:
            out[i] = a / layout.cell_area
    return out


def sampled_mean(grid: Grid, poly: Polygon, rng: np.random.Generator, n: int = 100_000) -> float:
    """Mean of the grid over uniform random points inside the polygon."""
    xmin, ymin, xmax, ymax = poly.bounds
    shp = to_shapely(poly)
    lay = grid.layout
    vals = grid.valid_values()
    x = rng.uniform(xmin, xmax, n)
    y = rng.uniform(ymin, ymax, n)
    inside = shapely.contains_xy(shp, x, y)
    col = np.floor((x - lay.x_origin) / lay.cell_dx).astype(int)
    row = np.floor((lay.y_top - y) / lay.cell_dy).astype(int)
    ok = inside & (col >= 0) & (col < lay.n_cols) & (row >= 0) & (row < lay.n_rows)
    v = vals[row[ok] * lay.n_cols + col[ok]]
    v = v[~np.isnan(v)]
    return float(v.mean()) if len(v) else math.nan


def anova_moments(y: np.ndarray) -> dict[str, float]:
    """Method-of-moments components for the balanced Y × C × T × G × B layout.

    Independent of the EM code: stratum mean squares of a balanced
    ANOVA, solved against their expectations from the finest level up.
    """
    Y, C, T, G, B = y.shape
    grand = y.mean()
    m_y = y.mean(axis=(1, 2, 3, 4))
    m_c = y.mean(axis=(0, 2, 3, 4))
    m_t = y.mean(axis=(0, 3, 4))
    m_g = y.mean(axis=(0, 4))
    m_b = y.mean(axis=0)
    ss_y = C * T * G * B * np.sum((m_y - grand) ** 2)
    ss_c = Y * T * G * B * np.sum((m_c - grand) ** 2)
    ss_t = Y * G * B * np.sum((m_t - m_c[:, None]) ** 2)
    ss_g = Y * B * np.sum((m_g - m_t[:, :, None]) ** 2)
    ss_b = Y * np.sum((m_b - m_g[..., None]) ** 2)
    resid = y - m_y[:, None, None, None, None] - m_b[None] + grand
    ss_e = np.sum(resid**2)
    ms_y = ss_y / (Y - 1)
    ms_c = ss_c / (C - 1)
    ms_t = ss_t / (C * (T - 1))
    ms_g = ss_g / (C * T * (G - 1))
    ms_b = ss_b / (C * T * G * (B - 1))
    ms_e = ss_e / ((Y - 1) * (C * T * G * B - 1))
    e = ms_e
    blk = (ms_b - e) / Y
    bg = (ms_g - ms_b) / (Y * B)
    tr = (ms_t - ms_g) / (Y * B * G)
    co = (ms_c - ms_t) / (Y * B * G * T)
    yr = (ms_y - e) / (C * T * G * B)
    return dict(year=yr, county=co, tract=tr, block_group=bg, block=blk, residual=e)


def balanced_bmr(rng: np.random.Generator, sigma: dict, shape=(20, 32, 2, 2, 8), mu: float = 5.0):
    """Balanced year × county/tract/block-group/block data.

    Random effects are centred within their parent and rescaled so each
    stratum's sum of squares equals its expectation under ``sigma``; this
    removes the between-replicate spread of the few coarse-level draws
    (only Y years and C counties exist) while keeping the design generic.
    Returns (years, blocks, values, array shaped ``shape``).
    """
    Y, C, T, G, B = shape

    def pinned(dims, target):
        z = rng.normal(size=dims)
        z -= z.mean(axis=-1, keepdims=True)
        return z * np.sqrt(target / np.sum(z**2))

    s = sigma
    v = pinned((Y,), (Y - 1) * s["year"])
    c = pinned((C,), (C - 1) * (s["county"] + s["tract"] / T + s["block_group"] / (T * G) + s["block"] / (T * G * B)))
    t = pinned((C, T), C * (T - 1) * (s["tract"] + s["block_group"] / G + s["block"] / (G * B)))
    g = pinned((C, T, G), C * T * (G - 1) * (s["block_group"] + s["block"] / B))
    b = pinned((C, T, G, B), C * T * G * (B - 1) * s["block"])
    spatial = c[:, None, None, None] + t[:, :, None, None] + g[..., None] + b
    y = mu + v[:, None, None, None, None] + spatial[None] + rng.normal(scale=np.sqrt(s["residual"]), size=shape)
    ids = [f"08{ic:03d}{it:06d}{ig + 1}{ib:03d}" for ic in range(C) for it in range(T) for ig in range(G) for ib in range(B)]
    years = np.repeat(np.arange(2000, 2000 + Y), len(ids))
    blocks = ids * Y
    return years, blocks, y.reshape(-1), y


ACCEPTANCE: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line."""
    line = f"C{n:<2} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok
