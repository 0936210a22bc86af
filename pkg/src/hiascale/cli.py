"""Command-line entry point (``hiascale``)."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import harness
from .exposure import ConcUnits, Pollutant, build_surface, home_work_surface
from .geo import UnitLevel
from .grid import coverages_for, zonal_mean, zonal_sum
from .ingest import (
    IngestError,
    Subgroup,
    mortality_counts,
    populations_at,
    read_ascii_grid,
    read_geojson_units,
    read_lodes_od,
    read_mortality_csv,
    read_population_csv,
)
from .variance import bmr_observations, decompose, read_observations_csv

LEVEL = click.Choice(["block", "block_group", "tract", "county"])


def _out(path):
    return open(path, "w", newline="") if path else sys.stdout


def _fail(exc: Exception):
    raise click.ClickException(str(exc)) from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--threads", default=1, show_default=True, help="Worker threads for scenario runs.")
@click.option("--seed", default=0, show_default=True, help="Seed for synthetic-data generation.")
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
@click.pass_context
def main(ctx, threads, seed, verbose):
    """Multi-scale attributable-mortality engine."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"threads": max(1, threads), "seed": seed}


@main.command()
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--units", "units_path", required=True, type=click.Path(exists=True), help="GeoJSON units.")
@click.option("--level", required=True, type=LEVEL)
@click.option("--stat", type=click.Choice(["mean", "sum"]), default="mean", show_default=True)
@click.option("-o", "--output", type=click.Path(), help="CSV output (default stdout).")
def aggregate(grid_path, units_path, level, stat, output):
    """Aggregate a grid onto census units (area-weighted mean or sum)."""
    try:
        with open(grid_path) as fh:
            grid = read_ascii_grid(fh)
        with open(units_path) as fh:
            reg = read_geojson_units(fh, UnitLevel.parse(level))
    except (IngestError, ValueError) as exc:
        _fail(exc)
    covs = coverages_for(grid.layout, reg.geometries())
    with _out(output) as fh:
        fh.write("geoid,value\n")
        for geoid, cov in covs.items():
            v = zonal_sum(grid, cov) if stat == "sum" else zonal_mean(grid, cov)
            fh.write(f"{geoid},{'' if v is None else repr(v)}\n")


@main.command()
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--units", "units_path", required=True, type=click.Path(exists=True))
@click.option("--level", required=True, type=LEVEL)
@click.option("--pollutant", type=click.Choice(["pm25", "no2"]), default="pm25", show_default=True)
@click.option("--grid-units", type=click.Choice(["ug_m3", "ppbv"]), default=None,
              help="Units of the grid (default ug_m3 for pm25, ppbv for no2).")
@click.option("--home-work", is_flag=True, help="Blend home and workplace exposure (tract level).")
@click.option("--od", "od_path", type=click.Path(exists=True), help="LODES OD CSV for --home-work.")
@click.option("--state-prefix", default="", help="State FIPS for filtering OD flows.")
@click.option("-o", "--output", type=click.Path())
def exposure(grid_path, units_path, level, pollutant, grid_units, home_work, od_path, state_prefix, output):
    """Build a per-unit exposure surface, optionally commute-adjusted."""
    if home_work and (level != "tract" or not od_path or not state_prefix):
        raise click.UsageError("--home-work needs --level tract, --od and --state-prefix")
    units = grid_units or ("ppbv" if pollutant == "no2" else "ug_m3")
    try:
        with open(grid_path) as fh:
            grid = read_ascii_grid(fh)
        with open(units_path) as fh:
            reg = read_geojson_units(fh, UnitLevel.parse(level))
        surface = build_surface(grid, reg, Pollutant.parse(pollutant), ConcUnits.parse(units))
        if home_work:
            with open(od_path) as fh:
                surface = home_work_surface(surface, read_lodes_od(fh, state_prefix))
    except (IngestError, ValueError, KeyError) as exc:
        _fail(exc)
    with _out(output) as fh:
        surface.write_csv(fh)
    if surface.omitted:
        click.echo(f"{len(surface.omitted)} unit(s) omitted (no exposure)", err=True)


def _load(config):
    try:
        return harness.load_config(config)
    except harness.ConfigError as exc:
        _fail(exc)


@main.command()
@click.argument("config", type=click.Path(exists=True))
@click.option("-o", "--outdir", type=click.Path(), help="Override output.dir.")
@click.pass_context
def attribute(ctx, config, outdir):
    """Run one scenario from a config file.

    \b
    Config keys (TOML, flat dotted keys; paths relative to the config file):
    """
    cfg, _ = _load(config)
    try:
        result = harness.run_scenario(cfg, threads=ctx.obj["threads"])
    except (harness.ConfigError, IngestError, ValueError, KeyError) as exc:
        _fail(exc)
    out = harness.write_outputs(result, Path(outdir) if outdir else cfg.output_dir / cfg.name)
    click.echo(harness.report_text(result), nl=False)
    click.echo(f"outputs written to {out}", err=True)


attribute.help += "\n" + harness.config_help()


@main.command()
@click.argument("config", type=click.Path(exists=True))
@click.option("-o", "--outdir", type=click.Path(), help="Override output.dir.")
@click.option("--full-grid", is_flag=True, help="Ignore sweep.* keys and run every axis combination.")
@click.pass_context
def sensitivity(ctx, config, outdir, full_grid):
    """Run the scenario sweep described by the config's sweep.* keys."""
    cfg, sweep = _load(config)
    if full_grid:
        sweep = harness.FULL_GRID
    try:
        results, skipped = harness.run_sweep(
            cfg, sweep, threads=ctx.obj["threads"], outdir=Path(outdir) if outdir else cfg.output_dir
        )
    except (harness.ConfigError, IngestError, ValueError, KeyError) as exc:
        _fail(exc)
    for res in results:
        for (year, sub), d in res.totals.items():
            click.echo(f"{res.config.name:<45} {year} {sub.value:<12} {harness.format_deaths(d)}")
    for label, reason in skipped:
        click.echo(f"skipped {label}: {reason}", err=True)


@main.command()
@click.argument("results_a", type=click.Path(exists=True))
@click.argument("results_b", type=click.Path(exists=True))
@click.option("--subgroup", default=None, help="Subgroup to compare (default: the shared one, or All).")
@click.option("-o", "--output", type=click.Path(), help="Comparison CSV (default stdout).")
@click.option("--units-output", type=click.Path(), help="Per-unit join CSV when scales match.")
def compare(results_a, results_b, subgroup, output, units_output):
    """Compare two results CSVs (or scenario output directories)."""
    def load(p):
        p = Path(p)
        if p.is_dir():
            p = p / "results.csv"
        with open(p) as fh:
            return harness.read_results_csv(fh)

    try:
        cmp = harness.compare_scenarios(load(results_a), load(results_b), subgroup)
    except ValueError as exc:
        _fail(exc)
    with _out(output) as fh:
        cmp.write_csv(fh)
    if units_output:
        with open(units_output, "w", newline="") as fh:
            cmp.write_units_csv(fh)


@main.command()
@click.option("--observations", type=click.Path(exists=True), help="CSV of year,block,bmr.")
@click.option("--mortality", type=click.Path(exists=True), help="Mortality CSV (with --population).")
@click.option("--population", type=click.Path(exists=True), help="Block population anchors CSV.")
@click.option("-o", "--output", type=click.Path())
def variance(observations, mortality, population, output):
    """Decompose block BMR variance across year, county, tract, block group and block."""
    try:
        if observations:
            with open(observations) as fh:
                obs = read_observations_csv(fh)
        elif mortality and population:
            with open(mortality) as fh:
                records, _ = read_mortality_csv(fh)
            with open(population) as fh:
                series = read_population_csv(fh)
            counts = mortality_counts(records, UnitLevel.BLOCK, [Subgroup.ALL])
            deaths = {(g, y): n for (g, _, y), n in counts.items()}
            years = sorted({y for _, y in deaths})
            pops = {y: populations_at(series, y, UnitLevel.BLOCK) for y in years}
            obs = bmr_observations(deaths, pops)
        else:
            raise click.UsageError("give --observations, or --mortality with --population")
        result = decompose(obs)
    except (IngestError, ValueError) as exc:
        _fail(exc)
    with _out(output) as fh:
        result.write_csv(fh)
    if not result.converged:
        click.echo(f"warning: not converged after {result.iterations} iterations", err=True)


@main.command()
@click.argument("results", type=click.Path(exists=True))
@click.option("--units", "units_path", required=True, type=click.Path(exists=True))
@click.option("--level", required=True, type=LEVEL)
@click.option("--field", "field_name", type=click.Choice(harness.FIELDS), default="deaths", show_default=True)
@click.option("--year", type=int, default=None)
@click.option("--subgroup", default="All", show_default=True)
@click.option("-o", "--output", type=click.Path())
def geojson(results, units_path, level, field_name, year, subgroup, output):
    """Write one result field as GeoJSON with decile classes."""
    try:
        with open(results) as fh:
            res = harness.read_results_csv(fh)
        with open(units_path) as fh:
            reg = read_geojson_units(fh, UnitLevel.parse(level))
        values = harness.field_values(res.results, field_name, year, subgroup)
        doc = harness.emit_geojson(values, reg, field_name)
    except (IngestError, ValueError) as exc:
        _fail(exc)
    with _out(output) as fh:
        json.dump(doc, fh)


@main.command()
@click.argument("outdir", type=click.Path())
@click.option("--pollutant", type=click.Choice(["pm25", "no2"]), default="no2", show_default=True)
@click.option("--size", default=100, show_default=True, help="Grid cells per side.")
@click.option("--years", default="2000,2005,2010", show_default=True)
@click.pass_context
def synth(ctx, outdir, pollutant, size, years):
    """Generate a synthetic state and a ready-to-run config."""
    from .synthetic import write_dataset

    ys = tuple(int(y) for y in years.split(","))
    cfg = write_dataset(outdir, seed=ctx.obj["seed"], years=ys, n=size, pollutant=pollutant)
    click.echo(str(cfg))


if __name__ == "__main__":
    main()
