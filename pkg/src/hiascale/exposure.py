"""Pollutant exposure surfaces per spatial unit, unit conversion and commute-adjusted exposure."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Hashable, Mapping

from .geo import UnitLevel, UnitRegistry
from .grid import CoverageVector, Grid, compute_coverage, zonal_mean
from .ingest import ODMatrix

log = logging.getLogger(__name__)

NO2_UGM3_PER_PPBV = 1.88
# the same factor as an integer ratio: x * 188 / 100 rounds once, so 10 ppbv is exactly 18.8
_PPBV_NUM, _PPBV_DEN = 188.0, 100.0
HOME_SHARE = 0.794
WORK_SHARE = 0.206


class Pollutant(enum.Enum):
    PM25 = "pm25"
    NO2 = "no2"

    @classmethod
    def parse(cls, name: "str | Pollutant") -> "Pollutant":
        if isinstance(name, Pollutant):
            return name
        key = str(name).lower().replace(".", "").replace("_", "").replace("₂", "2")
        return cls(key)


class ConcUnits(enum.Enum):
    UG_M3 = "ug_m3"
    PPBV = "ppbv"

    @classmethod
    def parse(cls, name: "str | ConcUnits") -> "ConcUnits":
        if isinstance(name, ConcUnits):
            return name
        key = str(name).lower().replace("µ", "u").replace("/", "_").replace("³", "3")
        return cls({"ugm3": "ug_m3", "ppb": "ppbv"}.get(key, key))


class UnitMismatch(ValueError):
    pass


@dataclass
class ExposureSurface:
    pollutant: Pollutant
    units: ConcUnits
    year: int | None
    level: UnitLevel
    values: dict[Hashable, float]
    omitted: list = field(default_factory=list)

    def __post_init__(self):
        for key, val in self.values.items():
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"exposure for {key} must be finite and >= 0, got {val}")

    def __len__(self) -> int:
        return len(self.values)

    def write_csv(self, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["geoid", "value"])
        for key in sorted(self.values, key=str):
            w.writerow([key, repr(self.values[key])])


@dataclass(frozen=True)
class WeightedMean:
    value: float
    total_weight: float


def build_surface(
    grid: Grid,
    registry: UnitRegistry,
    pollutant: Pollutant | str = Pollutant.PM25,
    units: ConcUnits | str = ConcUnits.UG_M3,
    year: int | None = None,
    coverages: Mapping[str, CoverageVector] | None = None,
) -> ExposureSurface:
    """Area-weighted zonal mean of ``grid`` for every unit in ``registry``.

    Units without valid overlap are left out and listed in ``omitted``.
    Pre-computed ``coverages`` (on the grid's layout) can be passed to avoid
    re-clipping the same geometries for every year.
    """
    if len(registry) == 0:
        raise ValueError("empty registry")
    values, omitted = {}, []
    for geoid in registry:
        cov = coverages[geoid] if coverages is not None else compute_coverage(
            grid.layout, registry[geoid].geometry
        )
        mean = zonal_mean(grid, cov)
        if mean is None:
            omitted.append(geoid)
            continue
        values[geoid] = mean
    if omitted:
        log.info("%d unit(s) had no valid overlap with the grid", len(omitted))
    return ExposureSurface(
        Pollutant.parse(pollutant), ConcUnits.parse(units), year, registry.level, values, omitted
    )


def cell_surface(
    grid: Grid,
    pollutant: Pollutant | str,
    units: ConcUnits | str,
    year: int | None = None,
) -> ExposureSurface:
    """Native-resolution surface keyed by cell index (nodata cells left out)."""
    vals = grid.valid_values()
    values = {int(i): float(vals[i]) for i in range(len(vals)) if not math.isnan(vals[i])}
    return ExposureSurface(
        Pollutant.parse(pollutant), ConcUnits.parse(units), year, UnitLevel.CELL, values
    )


def convert_units(surface: ExposureSurface, target: ConcUnits | str) -> ExposureSurface:
    target = ConcUnits.parse(target)
    if target is surface.units:
        return surface
    if surface.pollutant is not Pollutant.NO2:
        raise UnitMismatch(f"unit mismatch: {surface.pollutant.value} is only defined in ug/m3")
    if target is ConcUnits.UG_M3:
        values = {k: v * _PPBV_NUM / _PPBV_DEN for k, v in surface.values.items()}
    else:
        values = {k: v * _PPBV_DEN / _PPBV_NUM for k, v in surface.values.items()}
    return replace(surface, units=target, values=values)


def population_weighted_mean(
    surface: ExposureSurface, weights: Mapping[Hashable, float]
) -> WeightedMean:
    """Σ C·p / Σ p over the weighted units."""
    missing = [k for k in weights if k not in surface.values]
    if missing:
        raise KeyError(f"weights for units without exposure: {missing[:5]}")
    keys = sorted(weights, key=str)
    if any(weights[k] < 0 for k in keys):
        raise ValueError("weights must be non-negative")
    total = math.fsum(weights[k] for k in keys)
    if total <= 0:
        raise ValueError("no population")
    num = math.fsum(surface.values[k] * weights[k] for k in keys)
    value = num / total
    used = [surface.values[k] for k in keys if weights[k] > 0]
    return WeightedMean(min(max(value, min(used)), max(used)), total)


def workplace_component(
    surface: ExposureSurface, od: ODMatrix
) -> tuple[dict[str, float], list[str]]:
    """Worker-weighted mean workplace concentration for each home tract.

    Returns the per-home values and the home tracts left out (no outgoing
    workers, or no exposure at any of their work tracts).
    """
    if surface.level is not UnitLevel.TRACT:
        raise ValueError("workplace exposure needs a tract-level surface")
    num: dict[str, list[float]] = {}
    den: dict[str, list[float]] = {}
    unknown = set()
    for (h, w), n in od.flows.items():
        if w not in surface.values:
            unknown.add(w)
            continue
        num.setdefault(h, []).append(n * surface.values[w])
        den.setdefault(h, []).append(n)
    if unknown:
        raise KeyError(f"OD work tracts missing from surface: {sorted(unknown)[:5]}")
    out, omitted = {}, []
    homes = sorted(set(surface.values) | set(den))
    for h in homes:
        d = math.fsum(den.get(h, ()))
        if d <= 0:
            omitted.append(h)
            continue
        out[h] = math.fsum(num[h]) / d
    return out, omitted


def home_work_surface(surface: ExposureSurface, od: ODMatrix) -> ExposureSurface:
    """Per home tract: 0.794 × home concentration + 0.206 × workplace concentration."""
    work, omitted = workplace_component(surface, od)
    values = {}
    for h in sorted(work):
        if h not in surface.values:
            omitted.append(h)
            continue
        c, w = surface.values[h], work[h]
        hw = HOME_SHARE * c + WORK_SHARE * w
        values[h] = min(max(hw, min(c, w)), max(c, w))
    if omitted:
        log.info("%d home tract(s) omitted from home-work exposure", len(omitted))
    return replace(surface, values=values, omitted=list(surface.omitted) + sorted(omitted))
