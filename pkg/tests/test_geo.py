import pytest
from hypothesis import given, strategies as st

from hiascale.geo import (
    CENSUS_LEVELS,
    GeoIdError,
    Unit,
    UnitLevel,
    UnitRegistry,
    aggregate_counts,
    level_of,
    parent,
    table_records,
    validate_geoid,
)
from hiascale.grid import Polygon

BLOCK = "080310041011001"


def test_parent_examples():
    assert parent(BLOCK, UnitLevel.COUNTY) == "08031"
    assert parent(BLOCK, UnitLevel.BLOCK_GROUP) == "080310041011"
    assert parent("08031004101", UnitLevel.TRACT) == "08031004101"
    assert parent(BLOCK, "state") == "08"


def test_parent_cannot_refine():
    with pytest.raises(GeoIdError, match="cannot refine"):
        parent("08031004101", UnitLevel.BLOCK)


@pytest.mark.parametrize("bad", ["0803100410", "08031x041011001", "", "０８"])
def test_malformed_geoids(bad):
    with pytest.raises(GeoIdError):
        level_of(bad)


def test_level_lengths_and_order():
    assert [lvl.digits for lvl in CENSUS_LEVELS] == [15, 12, 11, 5]
    assert UnitLevel.COUNTY.coarser_than(UnitLevel.TRACT)
    assert not UnitLevel.BLOCK.coarser_than(UnitLevel.BLOCK_GROUP)
    with pytest.raises(ValueError):
        UnitLevel.CELL.rank
    assert UnitLevel.parse("Block-Group") is UnitLevel.BLOCK_GROUP
    assert UnitLevel.parse("bg") is UnitLevel.BLOCK_GROUP


def test_validate_geoid_level_mismatch():
    assert validate_geoid(BLOCK, UnitLevel.BLOCK) == BLOCK
    with pytest.raises(GeoIdError):
        validate_geoid(BLOCK, UnitLevel.TRACT)


def test_aggregate_examples():
    recs = [("080310041011001", "All", 2000, 3), ("080310041011002", "All", 2000, 4)]
    assert aggregate_counts(recs, UnitLevel.TRACT).counts == {("08031004101", "All", 2000): 7}
    one = [("080310041011001", "All", 2000, 3)]
    assert aggregate_counts(one, UnitLevel.BLOCK).counts == {(BLOCK, "All", 2000): 3}
    two = [("080010000001001", "All", 2000, 2), ("080310041011001", "All", 2000, 5)]
    assert aggregate_counts(two, UnitLevel.STATE).counts == {("08", "All", 2000): 7}


def test_aggregate_rejects_malformed_and_continues():
    recs = [("0803100410110", "All", 2000, 9), (BLOCK, "All", 2000, 1)]
    table = aggregate_counts(recs, UnitLevel.COUNTY)
    assert table.n_rejected == 1
    assert table.total() == 1


block_ids = st.builds(
    lambda c, t, g, b: f"08{c:03d}{t:06d}{g}{b:03d}",
    st.integers(1, 3), st.integers(0, 4), st.integers(0, 3), st.integers(0, 5),
)
records = st.lists(
    st.tuples(block_ids, st.sampled_from(["All", "WhiteNH"]), st.integers(2000, 2002), st.integers(0, 50)),
    max_size=60,
)


@given(records, st.sampled_from(CENSUS_LEVELS))
def test_conservation_and_idempotence(recs, level):
    table = aggregate_counts(recs, level)
    assert table.total() == sum(r[3] for r in recs)
    again = aggregate_counts(list(table_records(table)), level)
    assert again.counts == table.counts


@given(records)
def test_composition(recs):
    via_tract = aggregate_counts(list(table_records(aggregate_counts(recs, "tract"))), "county")
    direct = aggregate_counts(recs, "county")
    assert via_tract.counts == direct.counts


def test_registry():
    reg = UnitRegistry(UnitLevel.TRACT)
    reg.add(Unit("08031004102", [Polygon.box(1, 0, 2, 1)], 20.0))
    reg.add(Unit("08031004101", [Polygon.box(0, 0, 1, 1)]))
    assert list(reg) == ["08031004101", "08031004102"]
    assert reg.populations() == {"08031004102": 20.0}
    assert reg["08031004101"].area == 1.0
    with pytest.raises(ValueError, match="duplicate unit"):
        reg.add(Unit("08031004101", [Polygon.box(0, 0, 1, 1)]))
    with pytest.raises(GeoIdError):
        reg.add(Unit(BLOCK, [Polygon.box(0, 0, 1, 1)]))
    reg.check_vintage("2010")
    with pytest.raises(ValueError):
        reg.check_vintage("2020")
