"""Readers and validators for raster, boundary, mortality, population and LODES inputs."""
from __future__ import annotations

import bisect
import csv
import enum
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np
from scipy import stats

from .geo import GeoIdError, Unit, UnitLevel, UnitRegistry, level_of, validate_geoid
from .grid import DEFAULT_NODATA, Grid, GridLayout, Polygon

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


class Subgroup(enum.Enum):
    WHITE_NH = "WhiteNH"
    HISPANIC_ALL = "HispanicAll"
    BLACK_NH = "BlackNH"
    ASIAN_PACIFIC_NH = "AsianPacificNH"
    AMERICAN_INDIAN_NH = "AmericanIndianNH"
    OTHER_NH = "OtherNH"
    UNKNOWN = "Unknown"
    ALL = "All"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, label: "str | Subgroup", strict: bool = True) -> "Subgroup":
        if isinstance(label, Subgroup):
            return label
        key = "".join(ch for ch in str(label).lower() if ch.isalnum())
        found = _SUBGROUP_LOOKUP.get(key)
        if found is None:
            if strict:
                raise ValueError(f"unknown subgroup {label!r}")
            return cls.UNKNOWN
        return found


_SUBGROUP_LOOKUP = {s.value.lower(): s for s in Subgroup}
_SUBGROUP_LOOKUP.update(
    {
        "white": Subgroup.WHITE_NH,
        "whitenonhispanic": Subgroup.WHITE_NH,
        "black": Subgroup.BLACK_NH,
        "blacknonhispanic": Subgroup.BLACK_NH,
        "hispanic": Subgroup.HISPANIC_ALL,
        "hispanicallraces": Subgroup.HISPANIC_ALL,
        "asian": Subgroup.ASIAN_PACIFIC_NH,
        "asianorpacificislandernonhispanic": Subgroup.ASIAN_PACIFIC_NH,
        "nativeamerican": Subgroup.AMERICAN_INDIAN_NH,
        "americanindian": Subgroup.AMERICAN_INDIAN_NH,
        "americanindiannonhispanic": Subgroup.AMERICAN_INDIAN_NH,
        "other": Subgroup.OTHER_NH,
        "othernonhispanic": Subgroup.OTHER_NH,
        "total": Subgroup.ALL,
    }
)


# -- ESRI ASCII grid ----------------------------------------------------------

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def read_ascii_grid(stream: IO[str], crs_tag: str = "") -> Grid:
    """Parse an ESRI ASCII grid. Row 1 of the body is the northernmost row."""
    tokens = stream.read().split()
    header: dict[str, str] = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos].lower() in _HEADER_KEYS:
        header[tokens[pos].lower()] = tokens[pos + 1]
        pos += 2
    missing = [k for k in _HEADER_KEYS[:5] if k not in header]
    if missing:
        raise IngestError(f"missing header keys: {', '.join(missing)}")
    try:
        n_cols = int(header["ncols"])
        n_rows = int(header["nrows"])
        x0 = float(header["xllcorner"])
        y0 = float(header["yllcorner"])
        size = float(header["cellsize"])
        nodata = float(header.get("nodata_value", DEFAULT_NODATA))
    except ValueError as exc:
        raise IngestError(f"bad header value: {exc}") from None
    body = tokens[pos:]
    if len(body) != n_cols * n_rows:
        raise IngestError(
            f"truncated grid: expected {n_cols * n_rows} values, found {len(body)}"
        )
    values = np.empty(len(body))
    for i, tok in enumerate(body):
        try:
            values[i] = float(tok)
        except ValueError:
            row, col = divmod(i, n_cols)
            raise IngestError(f"parse error at row {row + 1}/col {col + 1}: {tok!r}") from None
    layout = GridLayout(x0, y0, size, size, n_cols, n_rows, crs_tag)
    return Grid(layout, values.reshape(n_rows, n_cols), nodata)


def write_ascii_grid(grid: Grid, stream: IO[str]) -> None:
    lay = grid.layout
    if lay.cell_dx != lay.cell_dy:
        raise ValueError("ESRI ASCII grids need square cells")
    stream.write(f"ncols {lay.n_cols}\nnrows {lay.n_rows}\n")
    stream.write(f"xllcorner {lay.x_origin!r}\nyllcorner {lay.y_origin!r}\n")
    stream.write(f"cellsize {lay.cell_dx!r}\nNODATA_value {grid.nodata!r}\n")
    for row in grid.values:
        stream.write(" ".join(repr(float(v)) for v in row))
        stream.write("\n")


# -- GeoJSON units ---------------------------------------------------------

def _polygon_parts(geometry: dict) -> list[Polygon]:
    gtype = geometry.get("type")
    coords = geometry.get("coordinates")
    if gtype == "Polygon":
        rings = [coords]
    elif gtype == "MultiPolygon":
        rings = coords
    else:
        raise IngestError(f"unsupported geometry type {gtype!r}")
    return [Polygon(part[0], tuple(part[1:])) for part in rings]


def read_geojson_units(
    stream: IO[str], level: UnitLevel, population_property: str | None = None
) -> UnitRegistry:
    level = UnitLevel.parse(level)
    doc = json.load(stream)
    if doc.get("type") != "FeatureCollection":
        raise IngestError("expected a GeoJSON FeatureCollection")
    registry = UnitRegistry(level)
    for n, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        geoid = props.get("GEOID")
        if geoid is None:
            log.warning("feature %d has no GEOID property; skipped", n)
            continue
        geoid = str(geoid)
        try:
            validate_geoid(geoid, level)
        except GeoIdError as exc:
            raise IngestError(str(exc)) from None
        if geoid in registry:
            raise IngestError(f"duplicate unit {geoid}")
        pop = props.get(population_property) if population_property else None
        extra = {k: v for k, v in props.items() if k != "GEOID"}
        registry.add(Unit(geoid, _polygon_parts(feat["geometry"]), pop, extra))
    return registry


# -- mortality --------------------------------------------------------------

@dataclass(frozen=True)
class MortalityRecord:
    year: int
    geoid: str
    subgroup: Subgroup
    count: int


@dataclass
class ExclusionReport:
    n_rows: int = 0
    kept: int = 0
    excluded: int = 0
    rejected: int = 0
    excluded_deaths: int = 0
    kept_deaths: int = 0
    diagnostics: list[str] = field(default_factory=list)
    excluded_by_subgroup: Counter = field(default_factory=Counter)
    rows_by_subgroup: Counter = field(default_factory=Counter)

    @property
    def share_excluded(self) -> float:
        """Percentage of input rows with an unknown location."""
        return 100.0 * self.excluded / self.n_rows if self.n_rows else 0.0

    def subgroup_shares(self) -> dict[str, float]:
        return {
            str(s): 100.0 * self.excluded_by_subgroup[s] / n
            for s, n in sorted(self.rows_by_subgroup.items(), key=lambda kv: kv[0].value)
            if n
        }


def read_mortality_csv(
    stream: IO[str], years: tuple[int, int] | None = None
) -> tuple[list[MortalityRecord], ExclusionReport]:
    """Read ``year,geoid,race,count`` rows.

    Rows with an empty geoid are unknown-location deaths: excluded from the
    returned records but counted in the report. Malformed rows are rejected
    with a diagnostic.
    """
    reader = csv.DictReader(stream)
    need = {"year", "geoid", "race", "count"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise IngestError(f"mortality CSV needs columns {sorted(need)}")
    report = ExclusionReport()
    records = []
    for lineno, row in enumerate(reader, start=2):
        report.n_rows += 1

        def reject(msg):
            text = f"line {lineno}: {msg}"
            log.warning("mortality row rejected, %s", text)
            report.diagnostics.append(text)
            report.rejected += 1

        try:
            year = int(row["year"])
            count = int(row["count"])
        except (TypeError, ValueError):
            reject(f"non-integer year/count {row['year']!r}/{row['count']!r}")
            continue
        if count < 0:
            reject(f"negative count {count}")
            continue
        if years is not None and not years[0] <= year <= years[1]:
            reject(f"year {year} outside {years[0]}-{years[1]}")
            continue
        label = (row["race"] or "").strip()
        subgroup = Subgroup.parse(label, strict=False)
        if subgroup is Subgroup.UNKNOWN and label.lower() != "unknown":
            log.warning("line %d: unknown race label %r mapped to Unknown", lineno, label)
        report.rows_by_subgroup[subgroup] += 1
        geoid = (row["geoid"] or "").strip()
        if not geoid:
            report.excluded += 1
            report.excluded_deaths += count
            report.excluded_by_subgroup[subgroup] += 1
            continue
        try:
            validate_geoid(geoid, UnitLevel.BLOCK)
        except GeoIdError as exc:
            report.rows_by_subgroup[subgroup] -= 1
            reject(str(exc))
            continue
        records.append(MortalityRecord(year, geoid, subgroup, count))
        report.kept += 1
        report.kept_deaths += count
    return records, report


def mortality_counts(
    records: Iterable[MortalityRecord],
    level: UnitLevel,
    subgroups: Iterable[Subgroup] | None = None,
) -> dict[tuple[str, Subgroup, int], int]:
    """Roll records up to ``level``. ``Subgroup.ALL`` collects every record."""
    level = UnitLevel.parse(level)
    wanted = set(subgroups) if subgroups is not None else None
    out: dict[tuple[str, Subgroup, int], int] = defaultdict(int)
    for rec in records:
        key = rec.geoid[: level.digits]
        if wanted is None or rec.subgroup in wanted:
            out[(key, rec.subgroup, rec.year)] += rec.count
        if (wanted is None or Subgroup.ALL in wanted) and rec.subgroup is not Subgroup.ALL:
            out[(key, Subgroup.ALL, rec.year)] += rec.count
    return dict(sorted(out.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])))


# -- population ----------------------------------------------------------------

@dataclass(frozen=True)
class PopulationSeries:
    years: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.years) != len(self.values) or not self.years:
            raise ValueError("population series needs matching, non-empty years and values")
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise ValueError("anchor years must be strictly increasing")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise ValueError("population values must be finite and non-negative")

    @classmethod
    def from_mapping(cls, anchors: Mapping[int, float]) -> "PopulationSeries":
        items = sorted(anchors.items())
        return cls(tuple(int(y) for y, _ in items), tuple(float(v) for _, v in items))


def interpolate_population(series: PopulationSeries, year: float) -> float:
    """Linear interpolation between the two anchors bracketing ``year``."""
    ys = series.years
    if year < ys[0] or year > ys[-1]:
        raise ValueError(f"extrapolation not supported: {year} outside {ys[0]}-{ys[-1]}")
    i = bisect.bisect_left(ys, year)
    if ys[i] == year:
        return series.values[i]
    y0, y1 = ys[i - 1], ys[i]
    v0, v1 = series.values[i - 1], series.values[i]
    t = (year - y0) / (y1 - y0)
    return v0 + t * (v1 - v0)


def interpolate_grids(anchors: Mapping[int, Grid], year: int) -> Grid:
    """Cell-wise linear interpolation between population grids for anchor years."""
    years = sorted(anchors)
    if year < years[0] or year > years[-1]:
        raise ValueError(f"extrapolation not supported: {year} outside {years[0]}-{years[-1]}")
    if year in anchors:
        return anchors[year]
    i = bisect.bisect_left(years, year)
    g0, g1 = anchors[years[i - 1]], anchors[years[i]]
    if not g0.layout.same_as(g1.layout):
        raise ValueError("population grids have different layouts")
    t = (year - years[i - 1]) / (years[i] - years[i - 1])
    v0, v1 = g0.valid_values(), g1.valid_values()
    out = v0 + t * (v1 - v0)
    out[np.isnan(out)] = g0.nodata
    return Grid(g0.layout, out, g0.nodata)


def read_population_csv(stream: IO[str]) -> dict[str, PopulationSeries]:
    """``geoid,year,population`` rows → one anchor series per unit."""
    reader = csv.DictReader(stream)
    need = {"geoid", "year", "population"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise IngestError(f"population CSV needs columns {sorted(need)}")
    anchors: dict[str, dict[int, float]] = defaultdict(dict)
    for lineno, row in enumerate(reader, start=2):
        geoid = row["geoid"].strip()
        try:
            level_of(geoid)
            year, pop = int(row["year"]), float(row["population"])
        except (GeoIdError, ValueError) as exc:
            raise IngestError(f"line {lineno}: {exc}") from None
        if year in anchors[geoid]:
            raise IngestError(f"line {lineno}: duplicate anchor {geoid}/{year}")
        anchors[geoid][year] = pop
    return {g: PopulationSeries.from_mapping(a) for g, a in sorted(anchors.items())}


def populations_at(
    series: Mapping[str, PopulationSeries], year: int, level: UnitLevel
) -> dict[str, float]:
    """Interpolate every unit to ``year`` and sum up to ``level``."""
    level = UnitLevel.parse(level)
    out: dict[str, float] = defaultdict(float)
    for geoid in sorted(series):
        if level_of(geoid).rank > level.rank:
            raise ValueError(f"population for {geoid} is coarser than {level.value}")
        out[geoid[: level.digits]] += interpolate_population(series[geoid], year)
    return dict(out)


# -- LODES ------------------------------------------------------------------

@dataclass
class ODMatrix:
    flows: dict[tuple[str, str], float]
    year: int | None = None
    dropped_out_of_state: int = 0
    rejected: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def home_totals(self) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for (h, _), n in self.flows.items():
            out[h] += n
        return dict(sorted(out.items()))

    def work_totals(self) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for (_, w), n in self.flows.items():
            out[w] += n
        return dict(sorted(out.items()))


def read_lodes_od(stream: IO[str], state_prefix: str, year: int | None = None) -> ODMatrix:
    """Read a LODES OD file and aggregate primary-job flows to tract pairs.

    Only flows with both ends inside ``state_prefix`` are kept.
    """
    reader = csv.DictReader(stream)
    need = {"w_geocode", "h_geocode", "S000"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise IngestError(f"LODES OD file needs columns {sorted(need)}")
    od = ODMatrix({}, year)
    flows: dict[tuple[str, str], float] = defaultdict(float)
    for lineno, row in enumerate(reader, start=2):
        w, h = row["w_geocode"].strip(), row["h_geocode"].strip()
        try:
            validate_geoid(w, UnitLevel.BLOCK)
            validate_geoid(h, UnitLevel.BLOCK)
            jobs = int(row["S000"])
            if jobs < 0:
                raise ValueError(f"negative S000 {jobs}")
        except (GeoIdError, ValueError) as exc:
            msg = f"line {lineno}: {exc}"
            log.warning("LODES row rejected, %s", msg)
            od.diagnostics.append(msg)
            od.rejected += 1
            continue
        if w[:2] != state_prefix or h[:2] != state_prefix:
            od.dropped_out_of_state += 1
            continue
        flows[(h[:11], w[:11])] += jobs
    od.flows = dict(sorted(flows.items()))
    return od


# -- source comparison -------------------------------------------------------

@dataclass(frozen=True)
class SourceComparison:
    n: int
    slope: float
    intercept: float
    r_squared: float


def compare_sources(series_a: Mapping, series_b: Mapping) -> SourceComparison:
    """OLS of ``series_b`` on ``series_a`` over their shared keys."""
    keys = sorted(set(series_a) & set(series_b))
    if len(keys) < 2:
        raise ValueError(f"need at least 2 shared keys, found {len(keys)}")
    a = np.array([float(series_a[k]) for k in keys])
    b = np.array([float(series_b[k]) for k in keys])
    if np.ptp(a) == 0:
        raise ValueError("degenerate regressor: series_a has zero variance")
    if np.ptp(b) == 0:
        fit_slope, fit_icpt, r2 = 0.0, float(b[0]), 0.0
    else:
        fit = stats.linregress(a, b)
        fit_slope, fit_icpt = float(fit.slope), float(fit.intercept)
        r2 = min(max(float(fit.rvalue) ** 2, 0.0), 1.0)
    return SourceComparison(len(keys), fit_slope, fit_icpt, r2)
