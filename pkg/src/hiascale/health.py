"""Concentration–response functions and pollution-attributable mortality."""
from __future__ import annotations

import csv
import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Hashable, Iterable, Mapping, NamedTuple

from .exposure import ConcUnits, ExposureSurface, Pollutant, UnitMismatch, convert_units
from .geo import UnitLevel, parent
from .ingest import Subgroup

log = logging.getLogger(__name__)


class CRFMode(enum.Enum):
    SINGLE = "single"
    SUBGROUP = "subgroup"

    @classmethod
    def parse(cls, name: "str | CRFMode") -> "CRFMode":
        return name if isinstance(name, CRFMode) else cls(str(name).lower())


class CRFWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CRF:
    """Relative risk per ``increment`` of concentration, with 95% CI bounds."""

    pollutant: Pollutant
    subgroup: Subgroup
    increment: float
    rr_central: float
    rr_low: float
    rr_high: float
    required_units: ConcUnits
    source: str = ""

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("CRF increment must be positive")
        if min(self.rr_low, self.rr_central, self.rr_high) <= 0:
            raise ValueError("relative risks must be positive")
        if not self.rr_low <= self.rr_central <= self.rr_high:
            warnings.warn(
                f"{self.pollutant.value}/{self.subgroup.value} CRF {self.rr_central} "
                f"({self.rr_low}, {self.rr_high}) has its central value outside the CI",
                CRFWarning,
                stacklevel=3,
            )

    def betas(self) -> "Beta":
        return Beta(
            beta_from_rr(self.rr_central, self.increment),
            beta_from_rr(self.rr_low, self.increment),
            beta_from_rr(self.rr_high, self.increment),
        )


class Beta(NamedTuple):
    central: float
    low: float
    high: float


class Deaths(NamedTuple):
    central: float
    low: float
    high: float


def beta_from_rr(rr: float, increment: float) -> float:
    """Log-linear slope ln(rr)/increment."""
    if rr <= 0:
        raise ValueError(f"relative risk must be positive, got {rr}")
    if increment <= 0:
        raise ValueError(f"increment must be positive, got {increment}")
    return math.log(rr) / increment


def attributable_fraction(beta: float, x: float) -> float:
    return -math.expm1(-beta * x)


def attributable_mortality(
    x: float,
    bmc: float,
    crf: CRF,
    units: ConcUnits | None = None,
    min_concentration: float = 0.0,
) -> Deaths:
    """(1 − exp(−βx)) × BMC for the central, low and high relative risks.

    ``units`` describes ``x``; when given it must match the CRF's units.
    ``min_concentration`` is an optional counterfactual level (default: none).
    """
    if units is not None and ConcUnits.parse(units) is not crf.required_units:
        raise UnitMismatch(
            f"unit mismatch: exposure in {ConcUnits.parse(units).value}, CRF needs {crf.required_units.value}"
        )
    if x < 0 or not math.isfinite(x):
        raise ValueError(f"exposure must be finite and >= 0, got {x}")
    if bmc < 0:
        raise ValueError(f"baseline count must be >= 0, got {bmc}")
    dx = max(x - min_concentration, 0.0)
    b = crf.betas()
    return Deaths(
        attributable_fraction(b.central, dx) * bmc,
        attributable_fraction(b.low, dx) * bmc,
        attributable_fraction(b.high, dx) * bmc,
    )


# -- CRF tables ---------------------------------------------------------------

def _crf(pollutant, subgroup, rr, lo, hi, units, source, increment=10.0):
    return CRF(pollutant, subgroup, increment, rr, lo, hi, units, source)


@dataclass(frozen=True)
class CRFSet:
    single: CRF
    by_subgroup: Mapping[Subgroup, CRF] = field(default_factory=dict)

    def select(self, subgroup: Subgroup, mode: CRFMode) -> CRF:
        if mode is CRFMode.SINGLE:
            return self.single
        try:
            return self.by_subgroup[subgroup]
        except KeyError:
            raise KeyError(f"no subgroup CRF for {subgroup.value}") from None


PM25 = Pollutant.PM25
NO2 = Pollutant.NO2
UG = ConcUnits.UG_M3
PPB = ConcUnits.PPBV

MAIN_CRFS = {
    PM25: _crf(PM25, Subgroup.ALL, 1.06, 1.04, 1.08, UG, "Turner et al. 2016"),
    NO2: _crf(NO2, Subgroup.ALL, 1.02, 1.01, 1.04, UG, "Huangfu and Atkinson 2020"),
}

_T1_PM = "Di et al. 2017"
_T1_NO2 = "Eum et al. 2022"
_TABLE1_ROWS = {
    PM25: [
        (Subgroup.ALL, 1.073, 1.071, 1.075),
        (Subgroup.WHITE_NH, 1.063, 1.060, 1.065),
        (Subgroup.BLACK_NH, 1.208, 1.199, 1.217),
        (Subgroup.HISPANIC_ALL, 1.096, 1.075, 1.117),
        (Subgroup.ASIAN_PACIFIC_NH, 1.116, 1.100, 1.133),
        (Subgroup.AMERICAN_INDIAN_NH, 1.100, 1.060, 1.140),
    ],
    NO2: [
        (Subgroup.ALL, 1.06, 1.06, 1.07),
        (Subgroup.WHITE_NH, 1.08, 1.08, 1.09),
        (Subgroup.BLACK_NH, 1.13, 1.13, 1.14),
        (Subgroup.HISPANIC_ALL, 1.02, 1.01, 1.03),
        # printed with the central value above its CI; kept as printed
        (Subgroup.ASIAN_PACIFIC_NH, 1.05, 1.01, 1.03),
    ],
}


def main_crfs(pollutant: Pollutant | str) -> CRFSet:
    """Single overall CRF of the main analysis (no subgroup CRFs)."""
    return CRFSet(MAIN_CRFS[Pollutant.parse(pollutant)], {})


def subgroup_crfs(pollutant: Pollutant | str) -> CRFSet:
    """Subgroup-specific CRFs; the overall ("All") row doubles as the single CRF.

    PM2.5 rows are per 10 µg/m³, NO2 rows per 10 ppbv.
    """
    pollutant = Pollutant.parse(pollutant)
    units, source = (UG, _T1_PM) if pollutant is PM25 else (PPB, _T1_NO2)
    rows = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CRFWarning)
        for sub, rr, lo, hi in _TABLE1_ROWS[pollutant]:
            rows[sub] = _crf(pollutant, sub, rr, lo, hi, units, source)
    for w in caught:
        log.warning("CRF validation: %s", w.message)
    return CRFSet(rows[Subgroup.ALL], rows)


# -- per-unit attribution -------------------------------------------------------

@dataclass
class AttributionResult:
    geoid: str
    year: int | None
    subgroup: Subgroup
    pollutant: Pollutant
    exposure_level: UnitLevel
    bmc_level: UnitLevel
    crf_mode: CRFMode
    exposure_metric: str
    exposure: float
    bmc: float
    deaths_central: float
    deaths_low: float
    deaths_high: float
    attributable_fraction: float
    per_10k: float | None = None
    pct_of_all_cause: float | None = None


RESULT_COLUMNS = [
    "year", "geoid", "level", "pollutant", "subgroup", "crf_mode", "exposure_metric",
    "deaths", "deaths_lo", "deaths_hi", "attr_fraction", "per_10k", "pct_all_cause",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def result_row(r: AttributionResult) -> list[str]:
    level = r.bmc_level.value if r.exposure_level is r.bmc_level else (
        f"{r.exposure_level.value}/{r.bmc_level.value}"
    )
    return [
        _fmt(r.year), r.geoid, level, r.pollutant.value, r.subgroup.value, r.crf_mode.value,
        r.exposure_metric, _fmt(r.deaths_central), _fmt(r.deaths_low), _fmt(r.deaths_high),
        _fmt(r.attributable_fraction), _fmt(r.per_10k), _fmt(r.pct_of_all_cause),
    ]


def write_results_csv(results: Iterable[AttributionResult], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow(result_row(r))


def percent_attributable(deaths: float, all_cause: float) -> float | None:
    """Attributable deaths as a percentage of all-cause deaths (None if all_cause is 0)."""
    deaths = getattr(deaths, "deaths_central", deaths)
    if all_cause <= 0:
        log.warning("all-cause mortality is zero; percentage undefined")
        return None
    pct = 100.0 * deaths / all_cause
    if pct >= 100.0:
        log.warning("attributable deaths reach all-cause deaths (%.1f%%); implausible", pct)
    return pct


def rate_per_10k(deaths: float, population: float) -> float | None:
    deaths = getattr(deaths, "deaths_central", deaths)
    if population <= 0:
        log.warning("population is zero; rate per 10,000 undefined")
        return None
    return 10000.0 * deaths / population


def crf_comparison(mort_subgroup_crf: float, mort_single_crf: float) -> float | None:
    """Percent difference of the subgroup-CRF estimate relative to the single-CRF one."""
    if mort_single_crf == 0:
        return None
    return 100.0 * (mort_subgroup_crf - mort_single_crf) / mort_single_crf


def _exposure_key(unit: Hashable, exposure_level: UnitLevel, bmc_level: UnitLevel) -> Hashable:
    if exposure_level is bmc_level or exposure_level is UnitLevel.CELL:
        return unit
    return parent(unit, exposure_level)


def attribute_surface(
    surface: ExposureSurface,
    bmc: Mapping[tuple[Hashable, Subgroup], float],
    crfs: CRFSet,
    bmc_level: UnitLevel | None = None,
    mode: CRFMode | str = CRFMode.SINGLE,
    exposure_metric: str = "home",
    population: Mapping[Hashable, float] | None = None,
    all_cause: Mapping[Hashable, float] | None = None,
    convert: bool = True,
    min_concentration: float = 0.0,
) -> list[AttributionResult]:
    """Attributable deaths for every (unit, subgroup) baseline count in ``bmc``.

    ``bmc`` is keyed by (unit, subgroup) at ``bmc_level``. The exposure surface
    may be at the same level or a coarser census level (units then take their
    ancestor's concentration). When ``convert`` is set, NO2 surfaces are
    converted to the CRF's units explicitly; otherwise a mismatch raises.
    Units with no exposure are skipped and logged.
    """
    mode = CRFMode.parse(mode)
    bmc_level = surface.level if bmc_level is None else UnitLevel.parse(bmc_level)
    if surface.level is not UnitLevel.CELL and bmc_level is not UnitLevel.CELL:
        if surface.level.rank < bmc_level.rank:
            raise ValueError(
                f"exposure at {surface.level.value} is finer than baseline counts at {bmc_level.value}"
            )
    needed = sorted({sub for _, sub in bmc}, key=lambda s: s.value)
    missing = [s.value for s in needed if mode is CRFMode.SUBGROUP and s not in crfs.by_subgroup]
    if missing:
        raise KeyError(f"missing CRF for subgroup(s): {', '.join(missing)}")
    chosen = {sub: crfs.select(sub, mode) for sub in needed}
    converted = {}
    for crf in chosen.values():
        if crf.required_units not in converted:
            if crf.required_units is surface.units:
                converted[crf.required_units] = surface
            elif convert:
                log.info(
                    "converting %s exposure from %s to %s",
                    surface.pollutant.value, surface.units.value, crf.required_units.value,
                )
                converted[crf.required_units] = convert_units(surface, crf.required_units)
            else:
                raise UnitMismatch(
                    f"unit mismatch: surface in {surface.units.value}, CRF needs {crf.required_units.value}"
                )
    results = []
    skipped = 0
    for (unit, sub) in sorted(bmc, key=lambda k: (str(k[0]), k[1].value)):
        crf = chosen[sub]
        surf = converted[crf.required_units]
        key = _exposure_key(unit, surf.level, bmc_level)
        if key not in surf.values:
            skipped += 1
            continue
        x = surf.values[key]
        count = float(bmc[(unit, sub)])
        deaths = attributable_mortality(x, count, crf, min_concentration=min_concentration)
        beta = crf.betas().central
        pop = population.get(unit) if population is not None else None
        allc = all_cause.get(unit) if all_cause is not None else count
        results.append(
            AttributionResult(
                geoid=str(unit),
                year=surface.year,
                subgroup=sub,
                pollutant=surface.pollutant,
                exposure_level=surface.level,
                bmc_level=bmc_level,
                crf_mode=mode,
                exposure_metric=exposure_metric,
                exposure=x,
                bmc=count,
                deaths_central=deaths.central,
                deaths_low=deaths.low,
                deaths_high=deaths.high,
                attributable_fraction=attributable_fraction(beta, max(x - min_concentration, 0.0)),
                per_10k=rate_per_10k(deaths.central, pop) if pop else None,
                pct_of_all_cause=(
                    100.0 * deaths.central / allc if allc else None
                ),
            )
        )
    if skipped:
        log.info("%d unit(s) had no exposure value and were skipped", skipped)
    return results


def total_deaths(results: Iterable[AttributionResult]) -> Deaths:
    """Order-independent exact totals (fsum) of central/low/high deaths."""
    rs = list(results)
    return Deaths(
        math.fsum(r.deaths_central for r in rs),
        math.fsum(r.deaths_low for r in rs),
        math.fsum(r.deaths_high for r in rs),
    )
