"""Relations, deltas, apply/diff, and CSV interchange."""

from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sketchd.algebra import (
    DELETE,
    INSERT,
    BagRelation,
    DeltaRelation,
    Schema,
    apply_delta,
    diff,
    read_csv,
    write_csv,
)
from sketchd.errors import IllFormedDelta, SchemaMismatch

from .conftest import S8, SALES_SCHEMA
from .oracles import bag_counter, counter_apply_delta, counter_diff, delta_as_nets


def test_apply_delta_inserts_s8(sales, s8_delta):
    updated = apply_delta({"sales": sales}, {"sales": s8_delta})
    assert updated["sales"].total() == 8
    assert updated["sales"].rows[S8] == 1
    # input untouched
    assert sales.total() == 7


def test_apply_empty_delta_is_identity(sales):
    assert apply_delta({"sales": sales}, {}) == {"sales": sales}


def test_apply_delta_net_zero():
    # Expected value computed with the counter oracle: inserting and deleting
    # the same row twice leaves the multiplicity unchanged.
    schema = Schema("t", (("x", "i64"),))
    rel = BagRelation(schema, {(7,): 2})
    delta = DeltaRelation(schema)
    delta.add(INSERT, (7,), 2)
    delta.add(DELETE, (7,), 2)
    oracle = counter_apply_delta(bag_counter(rel), delta)
    updated = apply_delta({"t": rel}, {"t": delta})
    assert dict(updated["t"].rows) == dict(oracle)
    assert updated["t"].rows[(7,)] == 2


def test_apply_delta_rejects_overdelete():
    schema = Schema("t", (("x", "i64"),))
    rel = BagRelation(schema, {(1,): 1})
    delta = DeltaRelation(schema)
    delta.add(DELETE, (1,), 2)
    with pytest.raises(IllFormedDelta):
        apply_delta({"t": rel}, {"t": delta})


def test_diff_finds_inserted_row(sales, s8_delta):
    after = apply_delta({"sales": sales}, {"sales": s8_delta})
    delta = diff({"sales": sales}, after)
    assert delta["sales"].entries == {(INSERT, S8): 1}


def test_diff_identical_databases_is_empty(sales):
    assert diff({"sales": sales}, {"sales": sales.copy()}) == {}


def test_diff_requires_same_relations(sales):
    with pytest.raises(SchemaMismatch):
        diff({"sales": sales}, {})


rows_strategy = st.dictionaries(
    st.tuples(st.integers(-3, 3), st.integers(-3, 3)),
    st.integers(1, 4),
    max_size=12,
)


@given(rows_strategy, rows_strategy)
def test_diff_round_trip_property(rows1, rows2):
    schema = Schema("t", (("a", "i64"), ("b", "i64")))
    d1 = {"t": BagRelation(schema, rows1)}
    d2 = {"t": BagRelation(schema, rows2)}
    delta = diff(d1, d2)
    assert apply_delta(d1, delta) == d2
    # tags agree with the counter oracle
    nets = counter_diff(Counter(rows1), Counter(rows2))
    got = delta_as_nets(delta["t"]) if "t" in delta else {}
    assert got == nets


def test_csv_round_trip(tmp_path, sales):
    path = tmp_path / "sales.csv"
    write_csv(sales, path)
    back = read_csv(path, "sales")
    assert back.schema.columns == SALES_SCHEMA.columns
    assert back.rows == sales.rows


def test_csv_materializes_multiplicities(tmp_path):
    schema = Schema("t", (("a", "i64"), ("s", "str")))
    rel = BagRelation(schema, {(1, "x"): 3})
    path = tmp_path / "t.csv"
    write_csv(rel, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "a:i64,s:str"
    assert len(lines) == 4  # header + 3 repeated rows
    assert read_csv(path, "t").rows == {(1, "x"): 3}


def test_csv_header_kinds(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("a:i64,b:f64,c:str\n1,2.5,hello\n")
    rel = read_csv(path, "k")
    assert rel.rows == {(1, 2.5, "hello"): 1}


def test_delta_well_formed_helper(sales, s8_delta):
    from sketchd.algebra import delta_well_formed

    assert delta_well_formed({"sales": sales}, {"sales": s8_delta})
    over = DeltaRelation(SALES_SCHEMA)
    over.add(DELETE, S8, 1)
    assert not delta_well_formed({"sales": sales}, {"sales": over})
    assert not delta_well_formed({}, {"sales": s8_delta})
