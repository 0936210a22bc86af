import csv
import io
import json

import pytest
from click.testing import CliRunner

from hiascale.cli import main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    res = CliRunner().invoke(main, ["--seed", "3", "synth", str(root / "d"), "--size", "32",
                                    "--pollutant", "pm25", "--years", "2000,2005"])
    assert res.exit_code == 0, res.output
    return root / "d"


def run(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == 0, res.output
    return res


def test_help_lists_commands_and_config_keys():
    out = run("--help").output
    for cmd in ("aggregate", "exposure", "attribute", "sensitivity", "compare", "variance", "geojson", "synth"):
        assert cmd in out
    assert "scenario.bmc_scale" in run("attribute", "--help").output


def test_aggregate(data):
    out = run("aggregate", "--grid", data / "pm25_2000.asc", "--units", data / "county.geojson",
              "--level", "county").output
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["geoid"] for r in rows] == ["08001", "08003", "08005", "08007"]
    assert all(float(r["value"]) > 0 for r in rows)
    total = run("aggregate", "--grid", data / "pm25_2000.asc", "--units", data / "county.geojson",
                "--level", "county", "--stat", "sum").output
    assert len(total.splitlines()) == 5


def test_exposure_and_home_work(data, tmp_path):
    run("exposure", "--grid", data / "pm25_2000.asc", "--units", data / "tract.geojson", "--level", "tract",
        "-o", tmp_path / "home.csv")
    run("exposure", "--grid", data / "pm25_2000.asc", "--units", data / "tract.geojson", "--level", "tract",
        "--home-work", "--od", data / "od_2000.csv", "--state-prefix", "08", "-o", tmp_path / "hw.csv")
    home = (tmp_path / "home.csv").read_text().splitlines()
    hw = (tmp_path / "hw.csv").read_text().splitlines()
    assert len(home) == len(hw) == 65 and home != hw


def test_exposure_home_work_needs_tracts(data):
    res = CliRunner().invoke(main, ["exposure", "--grid", str(data / "pm25_2000.asc"), "--units",
                                    str(data / "county.geojson"), "--level", "county", "--home-work"])
    assert res.exit_code != 0 and "--home-work needs" in res.output


def test_attribute_compare_and_geojson(data, tmp_path):
    out_a = tmp_path / "a"
    res = run("attribute", data / "config.toml", "-o", out_a)
    assert "2000" in res.output
    assert {p.name for p in out_a.iterdir()} == {"results.csv", "totals.csv", "report.txt", "metadata.txt"}
    cmp = run("compare", out_a, out_a / "results.csv", "--units-output", tmp_path / "units.csv").output
    rows = list(csv.DictReader(io.StringIO(cmp)))
    assert [float(r["ratio"]) for r in rows] == [1.0, 1.0]
    assert (tmp_path / "units.csv").exists()
    geo = tmp_path / "map.geojson"
    run("geojson", out_a / "results.csv", "--units", data / "tract.geojson", "--level", "tract",
        "--year", "2000", "-o", geo)
    doc = json.loads(geo.read_text())
    assert len(doc["features"]) == 64
    assert {f["properties"]["decile"] for f in doc["features"]} == set(range(1, 11))


def test_attribute_bad_config(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('scenario.bmc_scale = "galaxy"\n')
    res = CliRunner().invoke(main, ["attribute", str(cfg)])
    assert res.exit_code != 0 and "Error" in res.output


def test_sensitivity(data, tmp_path):
    res = run("sensitivity", data / "config.toml", "-o", tmp_path / "s")
    assert "pm25_county_cell_subgroup_home" in res.output
    assert (tmp_path / "s" / "sweep_totals.csv").exists()
    assert "home_work" in (tmp_path / "s" / "sweep_skipped.txt").read_text()


def test_variance_from_inputs_and_observations(data, tmp_path):
    res = CliRunner().invoke(
        main, ["variance", "--mortality", str(data / "mortality.csv"), "--population", str(data / "population.csv")]
    )
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader(io.StringIO(res.stdout)))
    assert len(rows) == 1
    pct = sum(float(rows[0][f"pct_{k}"]) for k in ("year", "county", "tract", "block_group", "block"))
    assert pct == pytest.approx(100.0, abs=1e-9)
    assert int(rows[0]["n_obs"]) == 2 * 1024
    obs = tmp_path / "obs.csv"
    lines = ["year,block,bmr"]
    for y in (2000, 2001, 2002):
        for c in (1, 3):
            for b in range(4):
                lines.append(f"{y},08{c:03d}000100{b % 2 + 1}00{b},{(y - 2000) * 0.1 + c * 0.01 + b * 0.003}")
    obs.write_text("\n".join(lines) + "\n")
    res = CliRunner().invoke(main, ["variance", "--observations", str(obs)])
    assert res.exit_code == 0, res.output
    res = CliRunner().invoke(main, ["variance"])
    assert res.exit_code != 0
