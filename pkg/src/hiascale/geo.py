"""Census FIPS identifiers, the block → county hierarchy and count roll-ups."""
from __future__ import annotations

import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Iterator

from .grid import Polygon

log = logging.getLogger(__name__)

DEFAULT_VINTAGE = "2010"


class UnitLevel(enum.Enum):
    BLOCK = "block"
    BLOCK_GROUP = "block_group"
    TRACT = "tract"
    COUNTY = "county"
    STATE = "state"
    CELL = "cell"

    @property
    def digits(self) -> int:
        if self is UnitLevel.CELL:
            raise ValueError("grid cells have no FIPS identifier")
        return _DIGITS[self]

    @property
    def rank(self) -> int:
        if self is UnitLevel.CELL:
            raise ValueError("cell level is not ordered against census levels")
        return _RANK[self]

    def coarser_than(self, other: "UnitLevel") -> bool:
        return self.rank > other.rank

    @classmethod
    def parse(cls, name: "str | UnitLevel") -> "UnitLevel":
        if isinstance(name, UnitLevel):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown unit level {name!r}") from None


_DIGITS = {
    UnitLevel.STATE: 2,
    UnitLevel.COUNTY: 5,
    UnitLevel.TRACT: 11,
    UnitLevel.BLOCK_GROUP: 12,
    UnitLevel.BLOCK: 15,
}
_RANK = {
    UnitLevel.BLOCK: 0,
    UnitLevel.BLOCK_GROUP: 1,
    UnitLevel.TRACT: 2,
    UnitLevel.COUNTY: 3,
    UnitLevel.STATE: 4,
}
_BY_LENGTH = {n: lvl for lvl, n in _DIGITS.items()}
_ALIASES = {"blockgroup": "block_group", "bg": "block_group", "census_tract": "tract", "grid": "cell"}

CENSUS_LEVELS = (UnitLevel.BLOCK, UnitLevel.BLOCK_GROUP, UnitLevel.TRACT, UnitLevel.COUNTY)


class GeoIdError(ValueError):
    pass


def level_of(geoid: str) -> UnitLevel:
    if not isinstance(geoid, str) or not geoid.isdigit() or not geoid.isascii():
        raise GeoIdError(f"malformed GeoId {geoid!r}: digits only")
    try:
        return _BY_LENGTH[len(geoid)]
    except KeyError:
        raise GeoIdError(f"malformed GeoId {geoid!r}: length {len(geoid)}") from None


def validate_geoid(geoid: str, level: UnitLevel | None = None) -> str:
    found = level_of(geoid)
    if level is not None and found is not level:
        raise GeoIdError(f"GeoId {geoid!r} is a {found.value}, expected {level.value}")
    return geoid


def parent(geoid: str, target_level: UnitLevel) -> str:
    """Truncate ``geoid`` to the identifier of its ancestor at ``target_level``."""
    level = level_of(geoid)
    target_level = UnitLevel.parse(target_level)
    if target_level.rank < level.rank:
        raise GeoIdError(
            f"cannot refine {level.value} {geoid} to {target_level.value}"
        )
    return geoid[: target_level.digits]


@dataclass
class CountTable:
    counts: dict[tuple[str, Hashable, int], int]
    level: UnitLevel
    rejected: list[tuple[Any, str]] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)

    def total(self) -> int:
        return sum(self.counts.values())


def aggregate_counts(
    records: Iterable[tuple[str, Hashable, int, int]], target_level: UnitLevel
) -> CountTable:
    """Sum (geoid, subgroup, year, count) records up to ``target_level``.

    Records whose GeoId is malformed (or finer than nothing can fix) are
    rejected with a logged diagnostic; the rest are summed by truncated id.
    """
    target_level = UnitLevel.parse(target_level)
    counts: dict[tuple[str, Hashable, int], int] = defaultdict(int)
    rejected = []
    for rec in records:
        geoid, subgroup, year, count = rec
        try:
            key = parent(geoid, target_level)
        except GeoIdError as exc:
            log.warning("rejected record %r: %s", rec, exc)
            rejected.append((rec, str(exc)))
            continue
        counts[(key, subgroup, int(year))] += int(count)
    return CountTable(dict(sorted(counts.items(), key=_count_key)), target_level, rejected)


def _count_key(item):
    (geoid, subgroup, year), _ = item
    return (geoid, str(subgroup), year)


def table_records(table: CountTable) -> Iterator[tuple[str, Hashable, int, int]]:
    for (geoid, subgroup, year), count in table.counts.items():
        yield geoid, subgroup, year, count


@dataclass
class Unit:
    geoid: str
    geometry: list[Polygon]
    population: float | None = None
    attributes: dict[str, Any] = field(default_factory=dict)

    @property
    def area(self) -> float:
        return sum(p.area for p in self.geometry)


class UnitRegistry:
    """Units of one census level keyed by GeoId. Treat as read-only once built."""

    def __init__(self, level: UnitLevel, units: Iterable[Unit] = (), vintage: str = DEFAULT_VINTAGE):
        self.level = UnitLevel.parse(level)
        self.vintage = vintage
        self._units: dict[str, Unit] = {}
        for unit in units:
            self.add(unit)

    def add(self, unit: Unit) -> None:
        if self.level is not UnitLevel.CELL:
            validate_geoid(unit.geoid, self.level)
        if unit.geoid in self._units:
            raise ValueError(f"duplicate unit {unit.geoid}")
        self._units[unit.geoid] = unit

    def check_vintage(self, vintage: str) -> None:
        if vintage != self.vintage:
            raise ValueError(f"geography vintage {vintage} does not match registry vintage {self.vintage}")

    def __len__(self) -> int:
        return len(self._units)

    def __contains__(self, geoid: str) -> bool:
        return geoid in self._units

    def __getitem__(self, geoid: str) -> Unit:
        return self._units[geoid]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._units))

    def units(self) -> list[Unit]:
        return [self._units[k] for k in sorted(self._units)]

    def geometries(self) -> dict[str, list[Polygon]]:
        return {k: self._units[k].geometry for k in sorted(self._units)}

    def populations(self) -> dict[str, float]:
        return {
            k: u.population for k, u in sorted(self._units.items()) if u.population is not None
        }
