"""Plain and annotated evaluation, extraction functions."""

from __future__ import annotations

import pytest

from sketchd.algebra import BagRelation, Schema, apply_delta
from sketchd.errors import Overflow, TypeMismatch, UnknownRelation
from sketchd.eval import (
    evaluate,
    evaluate_annotated,
    frag_set,
    frags_in,
    tuples_in,
)
from sketchd.partitions import AnnotatedRelation, sketch_from_frags
from sketchd.plans import (
    Aggregate,
    AggSpec,
    Attr,
    Cmp,
    Join,
    Merge,
    Select,
    TableAccess,
    TopK,
    const,
)

from .conftest import RHO2, RHO3, RHO4, SALES_SCHEMA
from .oracles import brute_force_group_having_sketch


class TestPlainEval:
    def test_top_brand_over_sales(self, sales_db, top_brand_plan):
        result = evaluate(top_brand_plan, sales_db)
        assert result.rows == {("Apple", 5074): 1}

    def test_empty_database(self, top_brand_plan):
        empty = {"sales": BagRelation(SALES_SCHEMA)}
        assert evaluate(top_brand_plan, empty).rows == {}

    def test_top_brand_after_insert(self, sales, s8_delta, top_brand_plan):
        updated = apply_delta({"sales": sales}, {"sales": s8_delta})
        result = evaluate(top_brand_plan, updated)
        assert result.rows == {("Apple", 5074): 1, ("HP", 6194): 1}

    def test_unknown_relation(self):
        with pytest.raises(UnknownRelation):
            evaluate(TableAccess("nope"), {})

    def test_predicate_type_mismatch(self, sales_db):
        plan = Select(TableAccess("sales"), Cmp(">", Attr("brand"), const(5)))
        with pytest.raises(TypeMismatch):
            evaluate(plan, sales_db)

    def test_merge_root_rejected(self, sales_db, top_brand_capture_plan):
        with pytest.raises(TypeMismatch):
            evaluate(top_brand_capture_plan, sales_db)

    def test_sum_overflow_detected(self):
        schema = Schema("t", (("g", "i64"), ("v", "i64")))
        rel = BagRelation(schema, {(1, 2**62): 2})
        plan = Aggregate(TableAccess("t"), ("g",), (AggSpec("sum", "v", "s"),))
        with pytest.raises(Overflow):
            evaluate(plan, {"t": rel})


class TestTopK:
    schema = Schema("t", (("a", "i64"), ("b", "i64")))

    def run(self, rows, k, order):
        rel = BagRelation(self.schema, rows)
        return evaluate(TopK(TableAccess("t"), k, order), {"t": rel})

    def test_boundary_split(self):
        # A row with multiplicity 3 straddling k=2 keeps min(mult, k - pos).
        out = self.run({(1, 0): 3, (2, 0): 1}, 2, (("a", "asc"),))
        assert out.rows == {(1, 0): 2}

    def test_total_is_min_k_size(self):
        rows = {(i, 0): 2 for i in range(5)}
        for k in (1, 3, 7, 10, 30):
            out = self.run(rows, k, (("a", "asc"),))
            assert out.total() == min(k, 10)

    def test_desc_order(self):
        out = self.run({(1, 0): 1, (5, 0): 1, (3, 0): 1}, 1, (("a", "desc"),))
        assert out.rows == {(5, 0): 1}

    def test_deterministic_tie_break(self):
        # equal order values: lexicographic full-tuple order decides
        out = self.run({(1, 9): 1, (1, 2): 1}, 1, (("a", "asc"),))
        assert out.rows == {(1, 2): 1}


class TestAnnotatedEval:
    def test_capture_sketch_is_rho3_rho4(self, sales, price_catalog, top_brand_capture_plan):
        adb = {"sales": price_catalog.annotate(sales)}
        sketch = evaluate_annotated(top_brand_capture_plan, adb)
        assert sketch == sketch_from_frags([RHO3, RHO4])

    def test_table_access_merge_is_all_present_fragments(self, sales, price_catalog):
        adb = {"sales": price_catalog.annotate(sales)}
        sketch = evaluate_annotated(Merge(TableAccess("sales")), adb)
        # every base row is its own provenance: all four price ranges hold rows
        assert sketch == price_catalog.full_sketch()

    def test_capture_after_insert(self, sales, s8_delta, price_catalog, top_brand_capture_plan):
        # Expected value from the brute-force oracle: enumerate groups passing
        # the HAVING threshold and collect their member rows' fragments.
        updated = apply_delta({"sales": sales}, {"sales": s8_delta})["sales"]
        part = price_catalog.partition_for("sales")
        expected = brute_force_group_having_sketch(
            updated.rows.items(),
            group_of=lambda r: r[1],
            value_of=lambda r: r[3] * r[4],
            frag_of=lambda r: part.fragment_of(r[3]),
            passes=lambda total: total > 5000,
        )
        assert expected == {RHO2, RHO3, RHO4}  # frozen oracle output
        adb = {"sales": price_catalog.annotate(updated)}
        sketch = evaluate_annotated(top_brand_capture_plan, adb)
        assert sketch == sketch_from_frags(expected)

    def test_agreement_with_plain_eval(self, sales, price_catalog, top_brand_plan):
        adb = {"sales": price_catalog.annotate(sales)}
        annotated = evaluate_annotated(top_brand_plan, adb)
        assert tuples_in(annotated) == evaluate(top_brand_plan, {"sales": sales})

    def test_join_unions_sketches(self, price_catalog):
        r = Schema("r", (("a", "i64"), ("b", "i64")))
        s = Schema("s", (("c", "i64"), ("d", "i64")))
        ar = AnnotatedRelation(r, {((1, 7), 0b01): 1})
        asr = AnnotatedRelation(s, {((9, 7), 0b10): 2})
        plan = Join(TableAccess("r"), TableAccess("s"), Cmp("=", Attr("b"), Attr("d")))
        out = evaluate_annotated(plan, {"r": ar, "s": asr})
        assert out.entries == {((1, 7, 9, 7), 0b11): 2}


class TestExtraction:
    def test_frags_in_bag(self):
        schema = Schema("t", (("x", "i64"),))
        rel = AnnotatedRelation(schema, {((1,), 0b001): 1, ((2,), 0b011): 2})
        assert frags_in(rel) == {0b001: 1, 0b011: 2}

    def test_frags_in_annotated_sales(self, sales, price_catalog):
        bag = frags_in(price_catalog.annotate(sales))
        # one singleton sketch per row; S3 sits in range rho3
        assert bag[1 << RHO3] == 2  # S3 and S5
        assert sum(bag.values()) == 7

    def test_frag_set_matches_merge_capture(self, sales, price_catalog, top_brand_plan):
        adb = {"sales": price_catalog.annotate(sales)}
        annotated = evaluate_annotated(top_brand_plan, adb)
        merged = evaluate_annotated(Merge(top_brand_plan), adb)
        assert frag_set(frags_in(annotated)) == merged

    def test_tuples_in_empty(self):
        schema = Schema("t", (("x", "i64"),))
        assert tuples_in(AnnotatedRelation(schema)).rows == {}

    def test_extraction_distributes_over_union(self):
        schema = Schema("t", (("x", "i64"),))
        a = AnnotatedRelation(schema, {((1,), 0b1): 2})
        b = AnnotatedRelation(schema, {((1,), 0b1): 1, ((2,), 0b10): 1})
        union = AnnotatedRelation(schema, dict(a.entries))
        for (row, sk), mult in b:
            union.add(row, sk, mult)
        got = tuples_in(union)
        expect = tuples_in(a)
        for row, mult in tuples_in(b).rows.items():
            expect.add(row, mult)
        assert got == expect
