import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hiascale import harness
from hiascale.geo import Unit, UnitLevel, UnitRegistry
from hiascale.grid import Polygon
from hiascale.health import CRFMode, Deaths, crf_comparison
from hiascale.ingest import Subgroup


def load(cfg_path, **changes):
    cfg, sweep = harness.load_config(cfg_path)
    for k, v in changes.items():
        setattr(cfg, k, v)
    return cfg, sweep


# -- config -----------------------------------------------------------------

def test_config_resolves_relative_paths(dataset):
    path = dataset()
    cfg, sweep = harness.load_config(path)
    assert cfg.mortality == path.parent / "mortality.csv"
    assert cfg.grids[2000] == path.parent / "pm25_2000.asc"
    assert cfg.geographies[UnitLevel.BLOCK_GROUP].name == "block_group.geojson"
    assert cfg.exposure_scale is UnitLevel.TRACT and cfg.bmc_scale is UnitLevel.TRACT
    assert sweep["bmc_scale"] == ["block", "block_group", "tract", "county"]
    cfg.validate()


def test_config_nested_tables_and_unknown_keys(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[scenario]\npollutant = "no2"\nbmc_scale = "county"\n[inputs]\nmortality = "m.csv"\n')
    cfg, _ = harness.load_config(p)
    assert cfg.pollutant.value == "no2" and cfg.grid_units.value == "ppbv"
    p.write_text('scenario.colour = "red"\n')
    with pytest.raises(harness.ConfigError, match="unknown config key"):
        harness.load_config(p)
    p.write_text('scenario.pollutant = \n')
    with pytest.raises(harness.ConfigError):
        harness.load_config(p)


def test_config_help_lists_every_key():
    text = harness.config_help()
    for key in harness.CONFIG_KEYS:
        assert key in text


def test_validation_rules(dataset):
    path = dataset()
    cfg, _ = harness.load_config(path)
    hw = harness.ScenarioConfig(**{**cfg.__dict__, "exposure_metric": "home_work", "bmc_scale": UnitLevel.COUNTY,
                                   "exposure_scale": UnitLevel.COUNTY})
    assert any("tract" in p for p in hw.problems())
    no_od = harness.ScenarioConfig(**{**cfg.__dict__, "exposure_metric": "home_work", "od": {}})
    assert any("OD" in p for p in no_od.problems())
    cell = harness.ScenarioConfig(**{**cfg.__dict__, "exposure_scale": UnitLevel.CELL, "population": None})
    assert any("population" in p for p in cell.problems())
    gone = harness.ScenarioConfig(**{**cfg.__dict__, "mortality": path.parent / "nope.csv"})
    with pytest.raises(harness.ConfigError, match="input not found"):
        gone.validate()
    finer = harness.ScenarioConfig(**{**cfg.__dict__, "exposure_scale": UnitLevel.BLOCK})
    assert any("finer" in p for p in finer.problems())


def test_full_grid_enumeration(dataset):
    base, _ = harness.load_config(dataset())
    configs, skipped = harness.enumerate_full_grid(base)
    assert len(configs) + len(skipped) == 4 * 2 * 2 * 2
    labels = {c.name for c in configs}
    # the headline tables: four baseline-count scales × {native cell, same scale}
    for bmc in ("block", "block_group", "tract", "county"):
        for exp in ("cell", "same"):
            assert sum(1 for c in configs if c.name == f"pm25_{bmc}_{exp}_single_home") == 1
    assert "pm25_tract_same_single_home_work" in labels
    assert all("home_work" in s[0] for s in skipped)
    assert len(configs) == 18


# -- runs --------------------------------------------------------------------

def test_constant_exposure_identical_across_scales(dataset):
    path = dataset(constant=7.5)
    totals = []
    for lvl in ("block", "block_group", "tract", "county"):
        cfg, _ = load(path, bmc_scale=UnitLevel.parse(lvl), exposure_scale=UnitLevel.parse(lvl))
        res = harness.run_scenario(cfg)
        totals.append([d.central for d in res.totals.values()])
    for t in totals[1:]:
        np.testing.assert_allclose(t, totals[0], rtol=1e-9)


def test_cell_scale_matches_when_units_align(dataset):
    """32 cells over 16 blocks per side: each block is 2 × 2 whole cells."""
    path = dataset(constant=7.5, n=32)
    cfg, _ = load(path, bmc_scale=UnitLevel.BLOCK, exposure_scale=UnitLevel.BLOCK)
    same = harness.run_scenario(cfg)
    cfg_cell, _ = load(path, bmc_scale=UnitLevel.BLOCK, exposure_scale=UnitLevel.CELL)
    cell = harness.run_scenario(cfg_cell)
    for key in same.totals:
        assert cell.totals[key].central == pytest.approx(same.totals[key].central, rel=1e-9)
    assert all(r.per_10k is None for r in cell.results)


def test_home_work_with_stay_at_home_od(dataset):
    path = dataset(diagonal_od=True)
    home = harness.run_scenario(load(path)[0])
    hw = harness.run_scenario(load(path, exposure_metric="home_work")[0])
    for key in home.totals:
        assert hw.totals[key].central == pytest.approx(home.totals[key].central, rel=1e-12)


def test_home_work_differs_with_commuting(dataset):
    path = dataset()
    home = harness.run_scenario(load(path)[0])
    hw = harness.run_scenario(load(path, exposure_metric="home_work")[0])
    assert hw.totals != home.totals


def test_hispanic_no2_subgroup_over_single(dataset):
    path = dataset(pollutant="no2", constant=17.2)
    kw = dict(subgroups=[Subgroup.HISPANIC_ALL], crf_source="by_subgroup")
    single = harness.run_scenario(load(path, **kw)[0])
    sub = harness.run_scenario(load(path, crf_mode=CRFMode.SUBGROUP, **kw)[0])
    cmp = harness.compare_scenarios(single, sub)
    for row in cmp.rows:
        assert row.ratio == pytest.approx(0.3511, abs=1e-4)
        assert 1 / row.ratio == pytest.approx(2.848, abs=1e-3)
    # unit-wise join reproduces the percent-difference helper
    for year, geoid, a, b, pct in cmp.units:
        assert pct == pytest.approx(crf_comparison(b, a))


def test_missing_year_is_skipped_with_notice(dataset):
    path = dataset()
    res = harness.run_scenario(load(path, years=[2000, 2003, 2005])[0])
    assert res.skipped_years == [2003]
    assert res.years == [2000, 2005]
    assert any("2003" in line and "skipped" in line for line in res.metadata)


def test_ingest_error_aborts_with_diagnostic(dataset):
    path = dataset()
    (path.parent / "pm25_2005.asc").write_text("ncols 3\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n")
    with pytest.raises(ValueError, match="truncated grid"):
        harness.run_scenario(load(path)[0])


def test_totals_are_fixed_order_sums(dataset):
    res = harness.run_scenario(load(dataset())[0])
    for (year, sub), d in res.totals.items():
        rows = [r for r in res.results if r.year == year and r.subgroup is sub]
        assert d.central == pytest.approx(math.fsum(r.deaths_central for r in rows), rel=1e-9)


def test_metadata_reports_exclusions(dataset):
    res = harness.run_scenario(load(dataset())[0])
    text = "\n".join(res.metadata)
    assert "mortality.excluded_unknown_location" in text
    assert "scenario.bmc_scale = tract" in text


def test_per_10k_only_at_block_group_and_coarser(dataset):
    path = dataset()
    blk = harness.run_scenario(load(path, bmc_scale=UnitLevel.BLOCK, exposure_scale=UnitLevel.BLOCK)[0])
    bg = harness.run_scenario(load(path, bmc_scale=UnitLevel.BLOCK_GROUP, exposure_scale=UnitLevel.BLOCK_GROUP)[0])
    assert all(r.per_10k is None for r in blk.results)
    assert all(r.per_10k is not None for r in bg.results)


def test_sweep_is_thread_independent(dataset, tmp_path):
    path = dataset()
    base, sweep = harness.load_config(path)
    sweep = {"bmc_scale": ["tract", "county"], "exposure_scale": ["same", "cell"]}
    r1, _ = harness.run_sweep(base, sweep, threads=1, outdir=tmp_path / "a")
    r4, _ = harness.run_sweep(base, sweep, threads=4, outdir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_outputs_and_results_round_trip(dataset, tmp_path):
    res = harness.run_scenario(load(dataset())[0], threads=2)
    out = harness.write_outputs(res, tmp_path / "run")
    with open(out / "results.csv") as fh:
        back = harness.read_results_csv(fh)
    assert back.totals == res.totals
    report = (out / "report.txt").read_text()
    d = next(iter(res.totals.values()))
    assert harness.format_deaths(d) in report


# -- comparisons ---------------------------------------------------------------

def fake_result(totals: dict):
    return harness.ScenarioResult(None, [], {(y, Subgroup.ALL): Deaths(v, v, v) for y, v in totals.items()})


def test_compare_identical_and_half():
    a = fake_result({2000: 100.0, 2001: 80.0})
    cmp = harness.compare_scenarios(a, a)
    assert [r.ratio for r in cmp.rows] == [1.0, 1.0]
    b = fake_result({2000: 50.0, 2001: 40.0})
    cmp2 = harness.compare_scenarios(a, b)
    assert [r.ratio for r in cmp2.rows] == [0.5, 0.5]
    assert [r.pct_diff for r in cmp2.rows] == [-50.0, -50.0]
    buf = io.StringIO()
    cmp2.write_csv(buf)
    assert buf.getvalue().splitlines()[0] == "year,total_a,total_b,ratio,pct_diff"


def test_compare_disjoint_years():
    with pytest.raises(ValueError, match="disjoint years"):
        harness.compare_scenarios(fake_result({2000: 1.0}), fake_result({2001: 1.0}))


def test_format_deaths():
    assert harness.format_deaths(Deaths(1079.5, 719.4, 1436.51)) == "1080 (719, 1437)"


# -- deciles and maps ------------------------------------------------------------

def test_deciles_examples():
    ten = {f"g{i:02d}": float(i) for i in range(10)}
    assert sorted(harness.classify_deciles(ten).values()) == list(range(1, 11))
    twenty = {f"g{i:02d}": float(i) for i in range(20)}
    d = harness.classify_deciles(twenty)
    assert all(list(d.values()).count(k) == 2 for k in range(1, 11))
    ties = {f"g{i}": 3.0 for i in reversed(range(10))}
    assert harness.classify_deciles(ties) == {f"g{i}": i + 1 for i in range(10)}
    with pytest.raises(ValueError, match="too few units"):
        harness.classify_deciles({f"g{i}": 1.0 for i in range(9)})


@given(st.lists(st.floats(-1e6, 1e6), min_size=10, max_size=300))
def test_decile_occupancy(vals):
    d = harness.classify_deciles({f"u{i:04d}": v for i, v in enumerate(vals)})
    n = len(vals)
    counts = [list(d.values()).count(k) for k in range(1, 11)]
    assert all(n // 10 <= c <= -(-n // 10) for c in counts)


def _registry(n):
    return UnitRegistry(
        UnitLevel.TRACT, [Unit(f"080310041{i:02d}", [Polygon.box(i, 0, i + 1, 1)]) for i in range(n)]
    )


def test_geojson_single_unit():
    doc = harness.emit_geojson({"08031004100": 2.5}, _registry(1))
    assert len(doc["features"]) == 1
    assert set(doc["features"][0]["properties"]) == {"geoid", "value", "decile"}


def test_geojson_skips_nan_and_missing_geometry(caplog):
    doc = harness.emit_geojson({"08031004100": math.nan, "08031004101": 1.0, "08031009999": 4.0}, _registry(2))
    assert [f["properties"]["geoid"] for f in doc["features"]] == ["08031004101"]
    assert "without geometry" in caplog.text


def test_geojson_round_trip():
    vals = {f"080310041{i:02d}": 0.1 * i + 1 / 3 for i in range(12)}
    doc = harness.emit_geojson(vals, _registry(12), "per_10k")
    back = harness.read_geojson_values(json.dumps(doc))
    assert back == vals
    assert sorted(f["properties"]["decile"] for f in doc["features"])[0] == 1


def test_cell_counts_conserve_and_follow_population(dataset):
    """County BMR spread over cells by block population, not by area."""
    path = dataset(n=40)
    cfg, _ = load(path, bmc_scale=UnitLevel.COUNTY, exposure_scale=UnitLevel.CELL, years=[2000])
    res = harness.run_scenario(cfg)
    county, _ = load(path, bmc_scale=UnitLevel.COUNTY, exposure_scale=UnitLevel.COUNTY, years=[2000])
    same = harness.run_scenario(county)
    assert math.fsum(r.bmc for r in res.results) == pytest.approx(math.fsum(r.bmc for r in same.results), rel=1e-9)
    bmc = np.array([r.bmc for r in res.results])
    assert bmc.max() / bmc.min() > 10
