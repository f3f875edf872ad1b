"""Shared fixtures: the laptop-sales running example and its price partition."""

from __future__ import annotations

import pytest

from sketchd.algebra import INSERT, BagRelation, DeltaRelation, Schema
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
    const,
)

SALES_SCHEMA = Schema(
    "sales",
    (
        ("sid", "i64"),
        ("brand", "str"),
        ("product", "str"),
        ("price", "i64"),
        ("num_sold", "i64"),
    ),
)

S1 = (1, "Lenovo", "ThinkPad T14s Gen 2", 349, 1)
S2 = (2, "Lenovo", "ThinkPad T14s Gen 2", 449, 2)
S3 = (3, "Apple", "MacBook Air 13-inch", 1199, 1)
S4 = (4, "Apple", "MacBook Pro 14-inch", 3875, 1)
S5 = (5, "Dell", "Dell XPS 13 Laptop", 1345, 1)
S6 = (6, "HP", "HP ProBook 450 G9", 999, 4)
S7 = (7, "HP", "HP ProBook 550 G9", 899, 1)
S8 = (8, "HP", "HP ProBook 650 G10", 1299, 1)

SALES_ROWS = (S1, S2, S3, S4, S5, S6, S7)

# Price ranges [1,600], [601,1000], [1001,1500], [1501,10000] -> fragments 0..3.
PRICE_BOUNDARIES = [1, 601, 1001, 1501, 10000]
RHO1, RHO2, RHO3, RHO4 = 0, 1, 2, 3


@pytest.fixture
def sales() -> BagRelation:
    return BagRelation.from_rows(SALES_SCHEMA, SALES_ROWS)


@pytest.fixture
def sales_db(sales):
    return {"sales": sales}


@pytest.fixture
def price_catalog() -> PartitionCatalog:
    return PartitionCatalog.build(
        [RangePartition("sales", "price", "i64", PRICE_BOUNDARIES)]
    )


@pytest.fixture
def s8_delta() -> DeltaRelation:
    delta = DeltaRelation(SALES_SCHEMA)
    delta.add(INSERT, S8)
    return delta


def make_top_brand_plan(threshold: int = 5000, with_merge: bool = False):
    """Revenue-per-brand query: group by brand, sum price*num_sold, keep > threshold."""
    plan = Select(
        Aggregate(
            Project(
                TableAccess("sales"),
                ((Attr("brand"), "brand"), (Arith("*", Attr("price"), Attr("num_sold")), "rev0")),
            ),
            ("brand",),
            (AggSpec("sum", "rev0", "rev"),),
        ),
        Cmp(">", Attr("rev"), const(threshold)),
    )
    return Merge(plan) if with_merge else plan


@pytest.fixture
def top_brand_plan():
    return make_top_brand_plan()


@pytest.fixture
def top_brand_capture_plan():
    return make_top_brand_plan(with_merge=True)
