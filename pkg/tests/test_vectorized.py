"""Columnar fast path agrees with the object path, state and results alike."""

from __future__ import annotations

import numpy as np
import pytest

from sketchd.algebra import INSERT, BagRelation, DeltaRelation, Schema
from sketchd.engine import EngineOptions, EngineState, init_state
from sketchd.eval import evaluate
from sketchd.partitions import PartitionCatalog, RangePartition
from sketchd.plans import (
    Aggregate,
    AggSpec,
    Arith,
    Attr,
    Cmp,
    Merge,
    Project,
    Select,
    TableAccess,
    TopK,
    const,
)
from sketchd.store import TableStore
from sketchd.vectorized import try_vec_capture, try_vec_eval

from .conftest import SALES_ROWS, SALES_SCHEMA, make_top_brand_plan

RNG = np.random.default_rng(11)
SCHEMA = Schema("t", (("id", "i64"), ("g", "i64"), ("v", "i64"), ("w", "f64")))


def random_store(rows=400, groups=12) -> TableStore:
    store = TableStore()
    store.create_table(SCHEMA)
    ids = np.arange(rows, dtype=np.int64)
    g = RNG.integers(0, groups, rows)
    v = RNG.integers(0, 100, rows)
    w = RNG.integers(0, 64, rows) / 4.0  # dyadic: sums are exact in any order
    store.load_columns("t", {"id": ids, "g": g, "v": v, "w": w})
    return store


def catalog_for(store, fragments=8) -> PartitionCatalog:
    return PartitionCatalog.build(
        [RangePartition("t", "g", "i64", [0, *range(2, 12, 2), 12][: fragments + 1])]
    )


PLANS = {
    "plain": Aggregate(TableAccess("t"), ("g",), (AggSpec("sum", "v", "s"),)),
    "where": Aggregate(
        Select(TableAccess("t"), Cmp("<", Attr("v"), const(50))),
        ("g",),
        (AggSpec("sum", "v", "s"), AggSpec("count", "v", "c")),
    ),
    "project": Aggregate(
        Project(
            TableAccess("t"),
            ((Attr("g"), "g"), (Arith("*", Attr("v"), const(3)), "v3")),
        ),
        ("g",),
        (AggSpec("sum", "v3", "s"),),
    ),
    "having": Select(
        Aggregate(TableAccess("t"), ("g",), (AggSpec("avg", "w", "aw"),)),
        Cmp(">", Attr("aw"), const(7.0)),
    ),
    "topk": TopK(
        Select(
            Aggregate(TableAccess("t"), ("g",), (AggSpec("sum", "v", "s"),)),
            Cmp(">", Attr("s"), const(100)),
        ),
        3,
        (("s", "desc"),),
    ),
}


@pytest.mark.parametrize("name", sorted(PLANS))
def test_vec_eval_matches_object_eval(name):
    store = random_store()
    plan = PLANS[name]
    vec = try_vec_eval(plan, store, 0)
    assert vec is not None, "expected the columnar path to cover this shape"
    obj = evaluate(plan, {"t": store.scan("t", 0)})
    assert vec == obj


@pytest.mark.parametrize("name", sorted(PLANS))
def test_vec_capture_matches_object_capture(name):
    store = random_store()
    catalog = catalog_for(store)
    plan = Merge(PLANS[name])
    vec_state = EngineState(plan, store, catalog, 0, EngineOptions())
    vec_sketch = try_vec_capture(vec_state, plan)
    assert vec_sketch is not None
    obj_state = EngineState(plan, store, catalog, 0, EngineOptions())
    obj_sketch = obj_state.capture()
    assert vec_sketch == obj_sketch
    assert vec_state.to_dict() == obj_state.to_dict()


def test_vec_capture_continues_incrementally():
    store = random_store()
    catalog = catalog_for(store)
    plan = Merge(PLANS["having"])
    state, _ = init_state(plan, store, catalog, 0)
    batch = DeltaRelation(SCHEMA)
    batch.add(INSERT, (1000, 3, 10, 9.5))
    version = store.commit_delta({"t": batch})
    annotated = {"t": catalog.annotate_delta(store.extract_delta("t", 0, version))}
    state.process_delta(annotated, new_version=version)
    _, oracle = init_state(plan, store, catalog, version)
    assert state.sketch() == oracle


def test_unsupported_shapes_fall_back():
    store = random_store()
    # min aggregate needs ordered state: not columnar
    plan = Aggregate(TableAccess("t"), ("g",), (AggSpec("min", "v", "m"),))
    assert try_vec_eval(plan, store, 0) is None
    # multi-attribute grouping: not columnar
    plan = Aggregate(TableAccess("t"), ("g", "v"), (AggSpec("count", "v", "c"),))
    assert try_vec_eval(plan, store, 0) is None


def test_projection_of_running_example_not_vectorized_without_columns(price_catalog):
    # object-backed providers (no .columns) always use the object path
    from sketchd.engine import StaticProvider

    db = {"sales": BagRelation.from_rows(SALES_SCHEMA, SALES_ROWS)}
    plan = make_top_brand_plan(with_merge=True)
    state, sketch = init_state(plan, StaticProvider(db), price_catalog, 0)
    assert sketch == 0b1100


def test_int_guard_falls_back_not_wrong():
    store = TableStore()
    store.create_table(SCHEMA)
    big = 2**40
    store.load_columns(
        "t",
        {
            "id": np.array([0, 1], dtype=np.int64),
            "g": np.array([0, 1], dtype=np.int64),
            "v": np.array([big, big], dtype=np.int64),
            "w": np.array([0.0, 0.0]),
        },
    )
    plan = Aggregate(
        Select(TableAccess("t"), Cmp(">", Arith("*", Attr("v"), Attr("v")), const(0))),
        ("g",),
        (AggSpec("count", "v", "c"),),
    )
    vec = try_vec_eval(plan, store, 0)
    if vec is not None:  # if it claims support, it must be right
        assert vec == evaluate(plan, {"t": store.scan("t", 0)})
