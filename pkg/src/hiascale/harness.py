"""Scenario orchestration: config loading, runs, sweeps, comparisons and map output."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Hashable, Iterable, Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exposure import (
    ConcUnits,
    Pollutant,
    build_surface,
    cell_surface,
    home_work_surface,
)
from .geo import CENSUS_LEVELS, UnitLevel, UnitRegistry
from .grid import Grid, assign_to_cells, coverages_for, distribute_to_cells, zonal_sum
from .health import (
    AttributionResult,
    CRFMode,
    CRFSet,
    Deaths,
    attribute_surface,
    crf_comparison,
    main_crfs,
    subgroup_crfs,
    total_deaths,
    write_results_csv,
)
from .ingest import (
    ExclusionReport,
    Subgroup,
    interpolate_grids,
    mortality_counts,
    populations_at,
    read_ascii_grid,
    read_geojson_units,
    read_lodes_od,
    read_mortality_csv,
    read_population_csv,
)

log = logging.getLogger(__name__)

HOME = "home"
HOME_WORK = "home_work"
METRICS = (HOME, HOME_WORK)
CRF_SOURCES = ("main", "by_subgroup")
# per-10k rates are reported only at these levels
RATE_LEVELS = (UnitLevel.BLOCK_GROUP, UnitLevel.TRACT, UnitLevel.COUNTY)


class ConfigError(ValueError):
    pass


# -- config ---------------------------------------------------------------

CONFIG_KEYS = {
    "scenario.name": "run label, also the output sub-directory",
    "scenario.years": "list of years to analyse",
    "scenario.pollutant": "pm25 | no2",
    "scenario.grid_units": "units of the input grids: ug_m3 | ppbv",
    "scenario.exposure_scale": "cell | same | block | block_group | tract | county",
    "scenario.bmc_scale": "block | block_group | tract | county",
    "scenario.crf_mode": "single | subgroup",
    "scenario.crf_source": "main | by_subgroup (which table the single CRF comes from)",
    "scenario.exposure_metric": "home | home_work",
    "scenario.subgroups": "list of subgroup labels, default [\"All\"]",
    "scenario.min_concentration": "counterfactual concentration, default 0",
    "inputs.grid.<year>": "pollutant ESRI ASCII grid per year",
    "inputs.geography.<level>": "GeoJSON units per census level",
    "inputs.mortality": "mortality CSV (year,geoid,race,count)",
    "inputs.population": "population anchors CSV (geoid,year,population)",
    "inputs.population_grid.<year>": "population ASCII grid per anchor year",
    "inputs.od.<year>": "LODES OD CSV per year",
    "inputs.state_prefix": "two-digit state FIPS used to filter OD flows",
    "output.dir": "output directory",
    "sweep.exposure_scale": "list, swept axis",
    "sweep.bmc_scale": "list, swept axis",
    "sweep.crf_mode": "list, swept axis",
    "sweep.exposure_metric": "list, swept axis",
}


def config_help() -> str:
    width = max(len(k) for k in CONFIG_KEYS)
    return "\n".join(f"  {k.ljust(width)}  {v}" for k, v in CONFIG_KEYS.items())


@dataclass
class ScenarioConfig:
    name: str
    years: list[int]
    pollutant: Pollutant
    grid_units: ConcUnits
    exposure_scale: UnitLevel
    bmc_scale: UnitLevel
    crf_mode: CRFMode = CRFMode.SINGLE
    exposure_metric: str = HOME
    crf_source: str = "main"
    subgroups: list[Subgroup] = field(default_factory=lambda: [Subgroup.ALL])
    min_concentration: float = 0.0
    grids: dict[int, Path] = field(default_factory=dict)
    geographies: dict[UnitLevel, Path] = field(default_factory=dict)
    mortality: Path | None = None
    population: Path | None = None
    population_grids: dict[int, Path] = field(default_factory=dict)
    od: dict[int, Path] = field(default_factory=dict)
    state_prefix: str = ""
    output_dir: Path = Path("out")

    def problems(self, check_files: bool = True) -> list[str]:
        out = []
        if self.bmc_scale not in CENSUS_LEVELS:
            out.append(f"bmc_scale must be a census level, got {self.bmc_scale.value}")
        cell = self.exposure_scale is UnitLevel.CELL
        if not cell and self.bmc_scale in CENSUS_LEVELS and self.exposure_scale.rank < self.bmc_scale.rank:
            out.append("exposure scale is finer than the baseline-count scale")
        if self.exposure_metric not in METRICS:
            out.append(f"exposure_metric must be one of {METRICS}")
        if self.exposure_metric == HOME_WORK:
            if self.exposure_scale is not UnitLevel.TRACT:
                out.append("home_work needs tract exposure scale")
            if not self.od:
                out.append("home_work needs OD data")
        if cell:
            if self.population is None and not self.population_grids:
                out.append("cell exposure needs a population source to assign BMR to cells")
        if self.crf_source not in CRF_SOURCES:
            out.append(f"crf_source must be one of {CRF_SOURCES}")
        if self.mortality is None:
            out.append("inputs.mortality is required")
        if not self.grids:
            out.append("no pollutant grids configured")
        need = {self.bmc_scale}
        if not cell:
            need.add(self.exposure_scale)
        for lvl in sorted(need, key=lambda level: level.rank):
            if lvl not in self.geographies:
                out.append(f"no geography configured for {lvl.value}")
        if check_files:
            for path in self.input_paths():
                if not path.exists():
                    out.append(f"input not found: {path}")
        return out

    def validate(self, check_files: bool = True) -> "ScenarioConfig":
        probs = self.problems(check_files)
        if probs:
            raise ConfigError("; ".join(probs))
        return self

    def input_paths(self) -> list[Path]:
        paths = list(self.grids.values()) + list(self.geographies.values())
        paths += list(self.population_grids.values()) + list(self.od.values())
        paths += [p for p in (self.mortality, self.population) if p is not None]
        return paths

    def crfs(self) -> CRFSet:
        if self.crf_mode is CRFMode.SUBGROUP or self.crf_source == "by_subgroup":
            return subgroup_crfs(self.pollutant)
        return main_crfs(self.pollutant)

    def echo(self) -> list[str]:
        """Stable ``key = value`` lines describing the run."""
        lines = [
            f"scenario.name = {self.name}",
            f"scenario.years = {self.years}",
            f"scenario.pollutant = {self.pollutant.value}",
            f"scenario.grid_units = {self.grid_units.value}",
            f"scenario.exposure_scale = {self.exposure_scale.value}",
            f"scenario.bmc_scale = {self.bmc_scale.value}",
            f"scenario.crf_mode = {self.crf_mode.value}",
            f"scenario.crf_source = {self.crf_source}",
            f"scenario.exposure_metric = {self.exposure_metric}",
            f"scenario.subgroups = {[s.value for s in self.subgroups]}",
            f"scenario.min_concentration = {self.min_concentration!r}",
        ]
        for y in sorted(self.grids):
            lines.append(f"inputs.grid.{y} = {self.grids[y]}")
        for lvl in sorted(self.geographies, key=lambda level: level.rank):
            lines.append(f"inputs.geography.{lvl.value} = {self.geographies[lvl]}")
        lines.append(f"inputs.mortality = {self.mortality}")
        lines.append(f"inputs.population = {self.population}")
        for y in sorted(self.population_grids):
            lines.append(f"inputs.population_grid.{y} = {self.population_grids[y]}")
        for y in sorted(self.od):
            lines.append(f"inputs.od.{y} = {self.od[y]}")
        lines.append(f"inputs.state_prefix = {self.state_prefix}")
        return lines


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _resolve_scale(value: str, bmc: UnitLevel) -> UnitLevel:
    if str(value).lower() == "same":
        return bmc
    return UnitLevel.parse(value)


def config_from_mapping(flat: Mapping[str, object], base_dir: Path | None = None) -> tuple[ScenarioConfig, dict]:
    """Build a config (and the sweep axes) from flat dotted keys."""
    base_dir = Path(base_dir) if base_dir is not None else Path(".")

    def path(p) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else base_dir / p

    scenario, sweep = {}, {}
    grids, geos, pgrids, od = {}, {}, {}, {}
    inputs: dict[str, object] = {}
    for key, value in flat.items():
        section, _, rest = key.partition(".")
        if section == "scenario" and f"scenario.{rest}" in CONFIG_KEYS:
            scenario[rest] = value
        elif section == "sweep" and key in CONFIG_KEYS:
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{key} must be a non-empty list")
            sweep[rest] = value
        elif key.startswith("inputs.grid."):
            grids[int(rest.split(".", 1)[1])] = path(value)
        elif key.startswith("inputs.population_grid."):
            pgrids[int(rest.split(".", 1)[1])] = path(value)
        elif key.startswith("inputs.od."):
            od[int(rest.split(".", 1)[1])] = path(value)
        elif key.startswith("inputs.geography."):
            geos[UnitLevel.parse(rest.split(".", 1)[1])] = path(value)
        elif key in ("inputs.mortality", "inputs.population", "inputs.state_prefix", "output.dir"):
            inputs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        bmc = UnitLevel.parse(scenario.get("bmc_scale", "tract"))
        pollutant = Pollutant.parse(scenario.get("pollutant", "pm25"))
        default_units = "ppbv" if pollutant is Pollutant.NO2 else "ug_m3"
        cfg = ScenarioConfig(
            name=str(scenario.get("name", "scenario")),
            years=sorted(int(y) for y in scenario.get("years", sorted(grids))),
            pollutant=pollutant,
            grid_units=ConcUnits.parse(scenario.get("grid_units", default_units)),
            exposure_scale=_resolve_scale(scenario.get("exposure_scale", "same"), bmc),
            bmc_scale=bmc,
            crf_mode=CRFMode.parse(scenario.get("crf_mode", "single")),
            exposure_metric=str(scenario.get("exposure_metric", HOME)).lower(),
            crf_source=str(scenario.get("crf_source", "main")).lower(),
            subgroups=[Subgroup.parse(s) for s in scenario.get("subgroups", ["All"])],
            min_concentration=float(scenario.get("min_concentration", 0.0)),
            grids=grids,
            geographies=geos,
            mortality=path(inputs["inputs.mortality"]) if "inputs.mortality" in inputs else None,
            population=path(inputs["inputs.population"]) if "inputs.population" in inputs else None,
            population_grids=pgrids,
            od=od,
            state_prefix=str(inputs.get("inputs.state_prefix", "")),
            output_dir=path(inputs.get("output.dir", "out")),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, sweep


def load_config(path: str | Path) -> tuple[ScenarioConfig, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(_flatten(data), path.parent)


# -- scenario grid ----------------------------------------------------------

def scenario_label(cfg: ScenarioConfig) -> str:
    exp = "cell" if cfg.exposure_scale is UnitLevel.CELL else (
        "same" if cfg.exposure_scale is cfg.bmc_scale else cfg.exposure_scale.value
    )
    return f"{cfg.pollutant.value}_{cfg.bmc_scale.value}_{exp}_{cfg.crf_mode.value}_{cfg.exposure_metric}"


def expand_sweep(base: ScenarioConfig, sweep: Mapping[str, list]) -> tuple[list[ScenarioConfig], list[tuple[str, str]]]:
    """Cartesian product of the sweep axes over ``base``.

    Returns the valid configs and ``(label, reason)`` for skipped combinations.
    """
    axes = {
        "bmc_scale": sweep.get("bmc_scale", [base.bmc_scale.value]),
        "exposure_scale": sweep.get("exposure_scale", [
            "cell" if base.exposure_scale is UnitLevel.CELL else base.exposure_scale.value
        ]),
        "crf_mode": sweep.get("crf_mode", [base.crf_mode.value]),
        "exposure_metric": sweep.get("exposure_metric", [base.exposure_metric]),
    }
    configs, skipped = [], []
    seen = set()
    for bmc, exp, mode, metric in itertools.product(*axes.values()):
        bmc_level = UnitLevel.parse(bmc)
        cfg = replace(
            base,
            bmc_scale=bmc_level,
            exposure_scale=_resolve_scale(exp, bmc_level),
            crf_mode=CRFMode.parse(mode),
            exposure_metric=str(metric).lower(),
            subgroups=list(base.subgroups),
        )
        label = scenario_label(cfg)
        cfg.name = label
        if label in seen:
            continue
        seen.add(label)
        probs = cfg.problems(check_files=False)
        if probs:
            skipped.append((label, "; ".join(probs)))
        else:
            configs.append(cfg)
    return configs, skipped


FULL_GRID = {
    "bmc_scale": [lvl.value for lvl in CENSUS_LEVELS],
    "exposure_scale": ["cell", "same"],
    "crf_mode": [m.value for m in CRFMode],
    "exposure_metric": list(METRICS),
}


def enumerate_full_grid(base: ScenarioConfig):
    """Every combination of the four sensitivity axes (4 × 2 × 2 × 2)."""
    return expand_sweep(base, FULL_GRID)


# -- inputs ---------------------------------------------------------------

class InputStore:
    """Loads each input once and shares it between scenarios (thread-safe)."""

    def __init__(self):
        self._cache: dict[Hashable, object] = {}
        self._locks: dict[Hashable, threading.Lock] = {}
        self._guard = threading.Lock()

    def _get(self, key: Hashable, loader):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._cache:
                self._cache[key] = loader()
            return self._cache[key]

    def grid(self, path: Path) -> Grid:
        def load():
            with open(path) as fh:
                return read_ascii_grid(fh)
        return self._get(("grid", str(path)), load)

    def registry(self, path: Path, level: UnitLevel) -> UnitRegistry:
        def load():
            with open(path) as fh:
                return read_geojson_units(fh, level)
        return self._get(("geo", str(path), level), load)

    def coverages(self, path: Path, level: UnitLevel, grid: Grid):
        lay = grid.layout
        key = ("cov", str(path), level, lay.x_origin, lay.y_origin, lay.cell_dx, lay.cell_dy,
               lay.n_cols, lay.n_rows)
        reg = self.registry(path, level)
        return self._get(key, lambda: coverages_for(lay, reg.geometries()))

    def mortality(self, path: Path) -> tuple[list, ExclusionReport]:
        def load():
            with open(path) as fh:
                return read_mortality_csv(fh)
        return self._get(("mort", str(path)), load)

    def population(self, path: Path):
        def load():
            with open(path) as fh:
                return read_population_csv(fh)
        return self._get(("pop", str(path)), load)

    def od(self, path: Path, state_prefix: str, year: int):
        def load():
            with open(path) as fh:
                return read_lodes_od(fh, state_prefix, year)
        return self._get(("od", str(path), state_prefix, year), load)


# -- runs -----------------------------------------------------------------

@dataclass
class YearOutcome:
    year: int
    results: list[AttributionResult]
    notes: list[str]


@dataclass
class ScenarioResult:
    config: ScenarioConfig | None
    results: list[AttributionResult]
    totals: dict[tuple[int, Subgroup], Deaths]
    metadata: list[str] = field(default_factory=list)
    skipped_years: list[int] = field(default_factory=list)

    @property
    def years(self) -> list[int]:
        return sorted({y for y, _ in self.totals})

    @property
    def pollutant(self) -> Pollutant | None:
        if self.config is not None:
            return self.config.pollutant
        return self.results[0].pollutant if self.results else None

    def subgroups(self) -> list[Subgroup]:
        return sorted({s for _, s in self.totals}, key=lambda s: s.value)


def compute_totals(results: Iterable[AttributionResult]) -> dict[tuple[int, Subgroup], Deaths]:
    groups: dict[tuple[int, Subgroup], list[AttributionResult]] = {}
    for r in results:
        groups.setdefault((r.year, r.subgroup), []).append(r)
    return {k: total_deaths(groups[k]) for k in sorted(groups, key=lambda k: (k[0], k[1].value))}


def _unit_populations(cfg: ScenarioConfig, store: InputStore, year: int, level: UnitLevel, grid: Grid):
    """Population per unit at ``level``, or None when no source is configured."""
    if cfg.population is not None:
        return populations_at(store.population(cfg.population), year, level)
    if cfg.population_grids:
        pgrid = _population_grid(cfg, store, year)
        covs = store.coverages(cfg.geographies[level], level, pgrid)
        return {g: zonal_sum(pgrid, c) or 0.0 for g, c in covs.items()}
    return None


def _population_grid(cfg: ScenarioConfig, store: InputStore, year: int) -> Grid:
    anchors = {y: store.grid(p) for y, p in cfg.population_grids.items()}
    return interpolate_grids(anchors, year)


def _cell_counts(cfg, store, year, grid, counts, notes):
    """Baseline counts per cell: unit BMR assigned to cells × cell population."""
    level = cfg.bmc_scale
    pops = _unit_populations(cfg, store, year, level, grid)
    covs = store.coverages(cfg.geographies[level], level, grid)
    if cfg.population_grids:
        pgrid = _population_grid(cfg, store, year)
        if not pgrid.layout.same_as(grid.layout):
            raise ConfigError("population grid layout differs from the pollutant grid")
        cell_pop = np.nan_to_num(pgrid.valid_values())
    else:
        # spread population from the finest geography on hand, not the BMC units
        fine = max(cfg.geographies, key=lambda lvl: lvl.digits)
        fine_pops = pops if fine is level else _unit_populations(cfg, store, year, fine, grid)
        fine_covs = covs if fine is level else store.coverages(cfg.geographies[fine], fine, grid)
        cell_pop = distribute_to_cells(
            {g: fine_pops.get(g, 0.0) for g in fine_covs}, fine_covs, grid.layout
        )
    out = {}
    for sub in cfg.subgroups:
        rates, lost = {}, 0
        for geoid in covs:
            n = counts.get((geoid, sub), 0)
            p = pops.get(geoid, 0.0)
            if p > 0:
                rates[geoid] = n / p
            elif n > 0:
                lost += n
            else:
                rates[geoid] = 0.0
        if lost:
            notes.append(f"{year} {sub.value}: {lost} death(s) in zero-population units not assigned to cells")
        bmr = assign_to_cells(rates, covs, grid.layout).valid_values()
        for i in np.flatnonzero(~np.isnan(bmr) & (cell_pop > 0)):
            out[(int(i), sub)] = float(bmr[i] * cell_pop[i])
    return out


def _run_year(cfg: ScenarioConfig, store: InputStore, year: int, records: list) -> YearOutcome:
    notes: list[str] = []
    grid = store.grid(cfg.grids[year])
    level = cfg.bmc_scale
    raw = mortality_counts((r for r in records if r.year == year), level, cfg.subgroups)
    counts = {(g, s): n for (g, s, y), n in raw.items() if y == year}
    bmc_reg = store.registry(cfg.geographies[level], level)
    outside = sorted({g for g, _ in counts if g not in bmc_reg})
    if outside:
        notes.append(f"{year}: {len(outside)} {level.value} unit(s) with deaths but no geometry")
    for sub in cfg.subgroups:
        for g in bmc_reg:
            counts.setdefault((g, sub), 0)
    counts = {k: v for k, v in counts.items() if k[0] in bmc_reg}

    if cfg.exposure_scale is UnitLevel.CELL:
        surface = cell_surface(grid, cfg.pollutant, cfg.grid_units, year)
        bmc = _cell_counts(cfg, store, year, grid, counts, notes)
        bmc_level = UnitLevel.CELL
        population = None
    else:
        exp_level = cfg.exposure_scale
        covs = store.coverages(cfg.geographies[exp_level], exp_level, grid)
        reg = store.registry(cfg.geographies[exp_level], exp_level)
        surface = build_surface(grid, reg, cfg.pollutant, cfg.grid_units, year, coverages=covs)
        if cfg.exposure_metric == HOME_WORK:
            surface = home_work_surface(surface, store.od(cfg.od[year], cfg.state_prefix, year))
        bmc = counts
        bmc_level = level
        population = (
            _unit_populations(cfg, store, year, level, grid) if level in RATE_LEVELS else None
        )
    if surface.omitted:
        notes.append(f"{year}: {len(surface.omitted)} unit(s) without exposure: "
                     + ", ".join(str(u) for u in surface.omitted[:10]))
    results = attribute_surface(
        surface, bmc, cfg.crfs(), bmc_level=bmc_level, mode=cfg.crf_mode,
        exposure_metric=cfg.exposure_metric, population=population,
        min_concentration=cfg.min_concentration,
    )
    dropped = len(bmc) - len(results)
    if dropped:
        notes.append(f"{year}: {dropped} baseline count(s) had no exposure and were skipped")
    return YearOutcome(year, results, notes)


def run_scenario(
    cfg: ScenarioConfig, store: InputStore | None = None, threads: int = 1
) -> ScenarioResult:
    """ingest → exposure → (home-work) → attribution → totals, one year at a time.

    Years lacking a grid (or OD data for home-work) are skipped with a notice.
    Output does not depend on ``threads``.
    """
    cfg.validate()
    store = store or InputStore()
    records, report = store.mortality(cfg.mortality)
    years, skipped, notes = [], [], []
    for y in cfg.years:
        if y not in cfg.grids:
            skipped.append(y)
            notes.append(f"{y}: no {cfg.pollutant.value} grid, year skipped")
        elif cfg.exposure_metric == HOME_WORK and y not in cfg.od:
            skipped.append(y)
            notes.append(f"{y}: no OD data, year skipped")
        else:
            years.append(y)
    for n in notes:
        log.warning(n)
    if threads > 1 and len(years) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda y: _run_year(cfg, store, y, records), years))
    else:
        outcomes = [_run_year(cfg, store, y, records) for y in years]
    results = [r for o in outcomes for r in o.results]
    meta = cfg.echo()
    meta += [
        f"mortality.rows = {report.n_rows}",
        f"mortality.kept = {report.kept}",
        f"mortality.excluded_unknown_location = {report.excluded}",
        f"mortality.rejected = {report.rejected}",
        f"mortality.excluded_share_pct = {report.share_excluded!r}",
        f"mortality.excluded_deaths = {report.excluded_deaths}",
    ]
    meta += [f"mortality.excluded_share_pct.{s} = {v!r}" for s, v in report.subgroup_shares().items()]
    meta += [f"notice: {n}" for n in notes]
    meta += [f"notice: {n}" for o in outcomes for n in o.notes]
    return ScenarioResult(cfg, results, compute_totals(results), meta, skipped)


# -- output ---------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def format_deaths(d: Deaths) -> str:
    return f"{_round_half_up(d.central)} ({_round_half_up(d.low)}, {_round_half_up(d.high)})"


def write_totals_csv(totals: Mapping[tuple[int, Subgroup], Deaths], stream: IO[str], label: str | None = None):
    w = csv.writer(stream, lineterminator="\n")
    head = ["year", "subgroup", "deaths", "deaths_lo", "deaths_hi"]
    w.writerow(["scenario"] + head if label is not None else head)
    for (year, sub), d in totals.items():
        row = [year, sub.value, repr(d.central), repr(d.low), repr(d.high)]
        w.writerow([label] + row if label is not None else row)


def report_text(result: ScenarioResult) -> str:
    name = result.config.name if result.config else "scenario"
    lines = [f"Attributable deaths, {name}"]
    for (year, sub), d in result.totals.items():
        lines.append(f"{year}  {sub.value:<20} {format_deaths(d)}")
    for y in result.skipped_years:
        lines.append(f"{y}  skipped (missing input)")
    return "\n".join(lines) + "\n"


def write_outputs(result: ScenarioResult, outdir: str | Path) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        write_results_csv(result.results, fh)
    with open(out / "totals.csv", "w", newline="") as fh:
        write_totals_csv(result.totals, fh)
    (out / "report.txt").write_text(report_text(result))
    (out / "metadata.txt").write_text("\n".join(result.metadata) + "\n")
    return out


def run_sweep(
    base: ScenarioConfig, sweep: Mapping[str, list], threads: int = 1, outdir: str | Path | None = None
) -> tuple[list[ScenarioResult], list[tuple[str, str]]]:
    """Run every valid combination of the sweep axes; results keep enumeration order."""
    configs, skipped = expand_sweep(base, sweep)
    for label, reason in skipped:
        log.info("skipping %s: %s", label, reason)
    for cfg in configs:
        cfg.validate()
    store = InputStore()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: run_scenario(c, store), configs))
    else:
        results = [run_scenario(c, store) for c in configs]
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        for i, res in enumerate(results):
            write_outputs(res, out / res.config.name)
            part = io.StringIO()
            write_totals_csv(res.totals, part, label=res.config.name)
            text = part.getvalue()
            buf.write(text if i == 0 else text.split("\n", 1)[1])
        (out / "sweep_totals.csv").write_text(buf.getvalue())
        (out / "sweep_skipped.txt").write_text("".join(f"{a}: {b}\n" for a, b in skipped))
    return results, skipped


# -- comparison -----------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    year: int
    total_a: float
    total_b: float
    ratio: float | None
    pct_diff: float | None


@dataclass
class Comparison:
    subgroup: Subgroup
    rows: list[ComparisonRow]
    units: list[tuple[int, str, float, float, float | None]]

    def write_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["year", "total_a", "total_b", "ratio", "pct_diff"])
        for r in self.rows:
            w.writerow([r.year, repr(r.total_a), repr(r.total_b),
                        "" if r.ratio is None else repr(r.ratio),
                        "" if r.pct_diff is None else repr(r.pct_diff)])

    def write_units_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["year", "geoid", "deaths_a", "deaths_b", "pct_diff"])
        for year, geoid, a, b, pct in self.units:
            w.writerow([year, geoid, repr(a), repr(b), "" if pct is None else repr(pct)])


def _pick_subgroup(a: ScenarioResult, b: ScenarioResult, subgroup: Subgroup | None) -> Subgroup:
    if subgroup is not None:
        return Subgroup.parse(subgroup)
    common = sorted(set(a.subgroups()) & set(b.subgroups()), key=lambda s: s.value)
    if len(common) == 1:
        return common[0]
    if Subgroup.ALL in common:
        return Subgroup.ALL
    raise ValueError("results share several subgroups; choose one")


def _levels(res: ScenarioResult) -> set:
    return {(r.exposure_level, r.bmc_level) for r in res.results}


def compare_scenarios(
    a: ScenarioResult, b: ScenarioResult, subgroup: Subgroup | str | None = None
) -> Comparison:
    """Per-year ratio b/a and % difference of totals, plus a per-unit join when scales match."""
    if a.pollutant is not None and b.pollutant is not None and a.pollutant is not b.pollutant:
        raise ValueError("scenarios are for different pollutants")
    sub = _pick_subgroup(a, b, subgroup)
    ya = {y for y, s in a.totals if s is sub}
    yb = {y for y, s in b.totals if s is sub}
    years = sorted(ya & yb)
    if not years:
        raise ValueError("disjoint years")
    rows = []
    for y in years:
        ta, tb = a.totals[(y, sub)].central, b.totals[(y, sub)].central
        ratio = tb / ta if ta else None
        rows.append(ComparisonRow(y, ta, tb, ratio, crf_comparison(tb, ta)))
    units = []
    if {lvl for _, lvl in _levels(a)} == {lvl for _, lvl in _levels(b)}:
        ia = {(r.year, r.geoid): r.deaths_central for r in a.results if r.subgroup is sub}
        ib = {(r.year, r.geoid): r.deaths_central for r in b.results if r.subgroup is sub}
        for key in sorted(set(ia) & set(ib)):
            if key[0] in years:
                units.append((key[0], key[1], ia[key], ib[key], crf_comparison(ib[key], ia[key])))
    return Comparison(sub, rows, units)


def read_results_csv(stream: IO[str]) -> ScenarioResult:
    """Rebuild a result table (without config) from a results CSV."""
    from .health import RESULT_COLUMNS

    reader = csv.DictReader(stream)
    if reader.fieldnames is None or list(reader.fieldnames) != RESULT_COLUMNS:
        raise ValueError("not a results CSV")

    def opt(v):
        return float(v) if v else None

    results = []
    for row in reader:
        lv = row["level"].split("/")
        exp_level, bmc_level = UnitLevel.parse(lv[0]), UnitLevel.parse(lv[-1])
        results.append(AttributionResult(
            geoid=row["geoid"],
            year=int(row["year"]) if row["year"] else None,
            subgroup=Subgroup.parse(row["subgroup"]),
            pollutant=Pollutant.parse(row["pollutant"]),
            exposure_level=exp_level,
            bmc_level=bmc_level,
            crf_mode=CRFMode.parse(row["crf_mode"]),
            exposure_metric=row["exposure_metric"],
            exposure=math.nan,
            bmc=math.nan,
            deaths_central=float(row["deaths"]),
            deaths_low=float(row["deaths_lo"]),
            deaths_high=float(row["deaths_hi"]),
            attributable_fraction=float(row["attr_fraction"]),
            per_10k=opt(row["per_10k"]),
            pct_of_all_cause=opt(row["pct_all_cause"]),
        ))
    return ScenarioResult(None, results, compute_totals(results))


# -- maps -----------------------------------------------------------------

def classify_deciles(values: Mapping[str, float]) -> dict[str, int]:
    """Rank-based deciles: rank r of n (ascending, ties by GeoId) → ⌈10r/n⌉."""
    items = [(float(v), str(k)) for k, v in values.items() if v is not None and math.isfinite(v)]
    n = len(items)
    if n < 10:
        raise ValueError(f"too few units for deciles ({n} < 10)")
    items.sort()
    return {k: -(-10 * r // n) for r, (_, k) in enumerate(items, start=1)}


FIELDS = ("deaths", "deaths_lo", "deaths_hi", "attr_fraction", "per_10k", "pct_all_cause", "exposure")


def field_values(
    results: Iterable[AttributionResult],
    field_name: str,
    year: int | None = None,
    subgroup: Subgroup | str = Subgroup.ALL,
) -> dict[str, float]:
    attr = {
        "deaths": "deaths_central", "deaths_lo": "deaths_low", "deaths_hi": "deaths_high",
        "attr_fraction": "attributable_fraction", "per_10k": "per_10k",
        "pct_all_cause": "pct_of_all_cause", "exposure": "exposure",
    }
    if field_name not in attr:
        raise ValueError(f"unknown field {field_name!r}; choose from {FIELDS}")
    sub = Subgroup.parse(subgroup)
    out = {}
    for r in results:
        if r.subgroup is not sub or (year is not None and r.year != year):
            continue
        if r.geoid in out:
            raise ValueError("several years in results; pass year")
        v = getattr(r, attr[field_name])
        out[r.geoid] = math.nan if v is None else float(v)
    return out


def emit_geojson(values: Mapping[str, float], registry: UnitRegistry, field_name: str = "value") -> dict:
    """FeatureCollection with properties {geoid, value, decile} for each finite value.

    Units without geometry or with a non-finite value are skipped with a notice.
    Deciles are null when fewer than ten units remain.
    """
    kept, no_geom, bad = {}, [], []
    for geoid in sorted(values):
        v = values[geoid]
        if v is None or not math.isfinite(v):
            bad.append(geoid)
        elif geoid not in registry:
            no_geom.append(geoid)
        else:
            kept[geoid] = float(v)
    if no_geom:
        log.warning("%d unit(s) without geometry skipped: %s", len(no_geom), ", ".join(no_geom[:5]))
    if bad:
        log.info("%d unit(s) with non-finite %s skipped", len(bad), field_name)
    deciles = classify_deciles(kept) if len(kept) >= 10 else {}
    features = []
    for geoid, v in kept.items():
        polys = registry[geoid].geometry
        if len(polys) == 1:
            geom = {"type": "Polygon", "coordinates": polys[0].to_geojson()}
        else:
            geom = {"type": "MultiPolygon", "coordinates": [p.to_geojson() for p in polys]}
        features.append({
            "type": "Feature",
            "properties": {"geoid": geoid, "value": v, "decile": deciles.get(geoid)},
            "geometry": geom,
        })
    return {"type": "FeatureCollection", "name": field_name, "features": features}


def read_geojson_values(doc: str | Mapping) -> dict[str, float]:
    if isinstance(doc, str):
        doc = json.loads(doc)
    return {f["properties"]["geoid"]: f["properties"]["value"] for f in doc["features"]}
