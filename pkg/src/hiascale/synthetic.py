"""Synthetic state generator for tests, demos and the acceptance suite.

The state is a rectangle of ``n`` × ``n`` one-unit grid cells split into a
regular county → tract → block-group → block hierarchy. Unit edges are not
aligned with cell edges, so zonal statistics see partial coverage.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import Unit, UnitLevel, UnitRegistry
from .grid import Grid, GridLayout, Polygon
from .ingest import Subgroup, write_ascii_grid

STATE = "08"
SUBGROUP_SHARES = {
    Subgroup.WHITE_NH: 0.80,
    Subgroup.HISPANIC_ALL: 0.12,
    Subgroup.BLACK_NH: 0.04,
    Subgroup.ASIAN_PACIFIC_NH: 0.02,
    Subgroup.AMERICAN_INDIAN_NH: 0.01,
    Subgroup.OTHER_NH: 0.01,
}


@dataclass
class SyntheticState:
    layout: GridLayout
    registries: dict[UnitLevel, UnitRegistry]
    centres: list[tuple[float, float, float]]

    def urban_weight(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=float)
        for cx, cy, scale in self.centres:
            out += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * scale**2))
        return out

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        lay = self.layout
        cols = np.arange(lay.n_cols)
        rows = np.arange(lay.n_rows)
        x = lay.x_origin + (cols + 0.5) * lay.cell_dx
        y = lay.y_top - (rows + 0.5) * lay.cell_dy
        return np.meshgrid(x, y)


def _split(x0, y0, x1, y1, nx, ny):
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    for j in range(ny):
        for i in range(nx):
            yield j * nx + i, (xs[i], ys[j], xs[i + 1], ys[j + 1])


def make_state(
    n: int = 100,
    counties: tuple[int, int] = (2, 2),
    tracts: tuple[int, int] = (4, 4),
    groups: tuple[int, int] = (2, 2),
    blocks: tuple[int, int] = (2, 2),
    origin: tuple[float, float] = (0.0, 0.0),
) -> SyntheticState:
    """Nested rectangular geography over an n × n unit-cell grid.

    Default: 4 counties, 64 tracts, 256 block groups, 1024 blocks.
    """
    x0, y0 = origin
    layout = GridLayout(x0, y0, 1.0, 1.0, n, n, "synthetic")
    regs = {lvl: UnitRegistry(lvl) for lvl in
            (UnitLevel.COUNTY, UnitLevel.TRACT, UnitLevel.BLOCK_GROUP, UnitLevel.BLOCK)}
    for ci, cb in _split(x0, y0, x0 + n, y0 + n, *counties):
        county = f"{STATE}{2 * ci + 1:03d}"
        regs[UnitLevel.COUNTY].add(Unit(county, [Polygon.box(*cb)]))
        for ti, tb in _split(*cb, *tracts):
            tract = f"{county}{(ti + 1) * 100:06d}"
            regs[UnitLevel.TRACT].add(Unit(tract, [Polygon.box(*tb)]))
            for gi, gb in _split(*tb, *groups):
                group = f"{tract}{gi + 1}"
                regs[UnitLevel.BLOCK_GROUP].add(Unit(group, [Polygon.box(*gb)]))
                for bi, bb in _split(*gb, *blocks):
                    regs[UnitLevel.BLOCK].add(Unit(f"{group}{bi:03d}", [Polygon.box(*bb)]))
    centres = [
        (x0 + 0.30 * n, y0 + 0.65 * n, 0.06 * n),
        (x0 + 0.70 * n, y0 + 0.30 * n, 0.04 * n),
    ]
    return SyntheticState(layout, regs, centres)


def population_grid(state: SyntheticState, year: int, base: float = 5.0, urban: float = 400.0) -> Grid:
    x, y = state.cell_centres()
    growth = 1.0 + 0.01 * (year - 2000)
    return Grid(state.layout, growth * (base + urban * state.urban_weight(x, y)))


def pm_like(state: SyntheticState, year: int = 2000, level: float = 6.0) -> Grid:
    """Smooth, low-contrast field (µg/m³) with a mild urban bump."""
    x, y = state.cell_centres()
    n = state.layout.n_cols
    trend = 1.0 - 0.01 * (year - 2000)
    field = level * (1.0 + 0.1 * np.sin(2 * np.pi * x / n) + 0.15 * state.urban_weight(x, y))
    return Grid(state.layout, trend * field)


def no2_like(state: SyntheticState, year: int = 2000, background: float = 1.0, peak: float = 30.0) -> Grid:
    """High-contrast field (ppbv) concentrated where people live."""
    x, y = state.cell_centres()
    trend = 1.0 - 0.02 * (year - 2000)
    return Grid(state.layout, trend * (background + peak * state.urban_weight(x, y)))


def block_populations(state: SyntheticState, pop: Grid) -> dict[str, float]:
    from .grid import compute_coverage, zonal_sum

    out = {}
    for geoid in state.registries[UnitLevel.BLOCK]:
        cov = compute_coverage(state.layout, state.registries[UnitLevel.BLOCK][geoid].geometry)
        out[geoid] = zonal_sum(pop, cov) or 0.0
    return out


def mortality_rows(
    state: SyntheticState,
    years: list[int],
    rng: np.random.Generator,
    bmr: float = 0.007,
    unknown_share: float = 0.04,
) -> list[tuple[int, str, str, int]]:
    """Poisson block × subgroup death counts; a share of rows lose their location."""
    rows = []
    block_bmr = {
        g: bmr * float(np.exp(rng.normal(0.0, 0.25))) for g in state.registries[UnitLevel.BLOCK]
    }
    for year in years:
        pops = block_populations(state, population_grid(state, year))
        for geoid, p in pops.items():
            for sub, share in SUBGROUP_SHARES.items():
                count = int(rng.poisson(p * share * block_bmr[geoid]))
                if count == 0:
                    continue
                where = "" if rng.random() < unknown_share else geoid
                rows.append((year, where, sub.value, count))
    return rows


def od_rows(state: SyntheticState, rng: np.random.Generator, workers_per_tract: int = 200):
    """Block-level LODES-style rows: commuters drawn towards urban tracts."""
    tracts = state.registries[UnitLevel.TRACT]
    blocks_by_tract: dict[str, list[str]] = {}
    for b in state.registries[UnitLevel.BLOCK]:
        blocks_by_tract.setdefault(b[:11], []).append(b)
    centroids = {}
    for t in tracts:
        xmin, ymin, xmax, ymax = tracts[t].geometry[0].bounds
        centroids[t] = ((xmin + xmax) / 2, (ymin + ymax) / 2)
    ids = list(tracts)
    cx = np.array([centroids[t][0] for t in ids])
    cy = np.array([centroids[t][1] for t in ids])
    attract = state.urban_weight(cx, cy) + 0.05
    rows = []
    for i, h in enumerate(ids):
        dist = np.hypot(cx - cx[i], cy - cy[i])
        w = attract * np.exp(-dist / (0.3 * state.layout.n_cols))
        w[i] += attract.mean()
        counts = rng.multinomial(workers_per_tract, w / w.sum())
        for j, n_jobs in enumerate(counts):
            if n_jobs:
                hb = blocks_by_tract[h][int(rng.integers(len(blocks_by_tract[h])))]
                wb = blocks_by_tract[ids[j]][int(rng.integers(len(blocks_by_tract[ids[j]])))]
                rows.append((wb, hb, int(n_jobs)))
    # one out-of-state flow that the reader must drop
    rows.append(("56001000100" + "1000", ids[0] + "1000", 7))
    return rows


def registry_geojson(reg: UnitRegistry, properties: dict[str, dict] | None = None) -> dict:
    feats = []
    for geoid in reg:
        unit = reg[geoid]
        props = {"GEOID": geoid}
        if properties and geoid in properties:
            props.update(properties[geoid])
        if len(unit.geometry) == 1:
            geom = {"type": "Polygon", "coordinates": unit.geometry[0].to_geojson()}
        else:
            geom = {"type": "MultiPolygon", "coordinates": [p.to_geojson() for p in unit.geometry]}
        feats.append({"type": "Feature", "properties": props, "geometry": geom})
    return {"type": "FeatureCollection", "features": feats}


def write_dataset(
    outdir: str | Path,
    seed: int = 0,
    years: tuple[int, ...] = (2000, 2005, 2010),
    n: int = 100,
    pollutant: str = "no2",
) -> Path:
    """Write a complete input set plus a sweep config; returns the config path."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    state = make_state(n)
    names = {UnitLevel.COUNTY: "county", UnitLevel.TRACT: "tract",
             UnitLevel.BLOCK_GROUP: "block_group", UnitLevel.BLOCK: "block"}
    for lvl, name in names.items():
        (out / f"{name}.geojson").write_text(json.dumps(registry_geojson(state.registries[lvl])))
    field = no2_like if pollutant == "no2" else pm_like
    for year in years:
        with open(out / f"{pollutant}_{year}.asc", "w") as fh:
            write_ascii_grid(field(state, year), fh)
    anchors = sorted(set(years) | {min(years), max(years)})
    with open(out / "population.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["geoid", "year", "population"])
        for year in anchors:
            for geoid, p in block_populations(state, population_grid(state, year)).items():
                w.writerow([geoid, year, repr(p)])
    with open(out / "mortality.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "geoid", "race", "count"])
        w.writerows(mortality_rows(state, list(years), rng))
    for year in years:
        with open(out / f"od_{year}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["w_geocode", "h_geocode", "S000"])
            w.writerows(od_rows(state, rng))
    units = "ppbv" if pollutant == "no2" else "ug_m3"
    lines = [
        f'scenario.name = "synthetic_{pollutant}"',
        f"scenario.years = [{', '.join(str(y) for y in years)}]",
        f'scenario.pollutant = "{pollutant}"',
        f'scenario.grid_units = "{units}"',
        'scenario.exposure_scale = "same"',
        'scenario.bmc_scale = "tract"',
        'scenario.crf_mode = "single"',
        'scenario.exposure_metric = "home"',
        'scenario.subgroups = ["All"]',
        'inputs.state_prefix = "08"',
        'inputs.mortality = "mortality.csv"',
        'inputs.population = "population.csv"',
    ]
    lines += [f'inputs.geography.{name} = "{name}.geojson"' for name in names.values()]
    lines += [f'inputs.grid.{y} = "{pollutant}_{y}.asc"' for y in years]
    lines += [f'inputs.od.{y} = "od_{y}.csv"' for y in years]
    lines += [
        'output.dir = "out"',
        'sweep.exposure_scale = ["same", "cell"]',
        'sweep.bmc_scale = ["block", "block_group", "tract", "county"]',
        'sweep.crf_mode = ["single", "subgroup"]',
        'sweep.exposure_metric = ["home", "home_work"]',
    ]
    cfg = out / "config.toml"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg
