from pathlib import Path

import pytest

from hiascale.grid import Grid
from hiascale.ingest import write_ascii_grid
from hiascale.synthetic import make_state, write_dataset


def make_dataset(
    root: Path,
    n: int = 32,
    pollutant: str = "pm25",
    constant: float | None = None,
    diagonal_od: bool = False,
    years=(2000, 2005),
    seed: int = 0,
) -> Path:
    """Synthetic input set; optionally a constant field or a stay-at-home OD."""
    cfg = write_dataset(root, seed=seed, years=years, n=n, pollutant=pollutant)
    if constant is not None:
        state = make_state(n)
        for y in years:
            with open(root / f"{pollutant}_{y}.asc", "w") as fh:
                write_ascii_grid(Grid.full(state.layout, constant), fh)
    if diagonal_od:
        for y in years:
            path = root / f"od_{y}.csv"
            lines = path.read_text().splitlines()
            out = [lines[0]]
            for line in lines[1:]:
                w, h, jobs = line.split(",")
                if w[:2] == "08":
                    out.append(f"{h},{h},{jobs}")
            path.write_text("\n".join(out) + "\n")
    return cfg


@pytest.fixture
def dataset(tmp_path):
    def build(**kw):
        return make_dataset(tmp_path / f"d{len(list(tmp_path.iterdir()))}", **kw)
    return build


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
