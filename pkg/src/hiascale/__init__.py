"""Multi-scale health-impact assessment for gridded air-pollution exposure."""
from .exposure import ConcUnits, ExposureSurface, Pollutant, build_surface, convert_units, home_work_surface
from .geo import UnitLevel, UnitRegistry, parent, validate_geoid
from .grid import CoverageVector, Grid, GridLayout, Polygon, compute_coverage, zonal_mean
from .harness import ScenarioConfig, ScenarioResult, classify_deciles, compare_scenarios, run_scenario
from .health import CRF, CRFMode, attributable_mortality, attribute_surface, beta_from_rr
from .ingest import Subgroup
from .variance import VarianceDecomposition, decompose

__version__ = "0.1.0"

__all__ = [
    "CRF", "CRFMode", "ConcUnits", "CoverageVector", "ExposureSurface", "Grid", "GridLayout",
    "Pollutant", "Polygon", "ScenarioConfig", "ScenarioResult", "Subgroup", "UnitLevel",
    "UnitRegistry", "VarianceDecomposition", "attributable_mortality", "attribute_surface",
    "beta_from_rr", "build_surface", "classify_deciles", "compare_scenarios", "compute_coverage",
    "convert_units", "decompose", "home_work_surface", "parent", "run_scenario", "validate_geoid",
    "zonal_mean",
]
