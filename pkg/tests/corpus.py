"""Randomized engine scenarios: plan + tables + partitions + delta.

Configurations are generated so the partitions are safe for instrumented
evaluation (the answer over the sketch instance equals the full answer):

  * single-table aggregation plans partition on the group-by attribute, so
    fragments never split a group and any aggregate/having/top-k combination
    is safe;
  * join plans restrict aggregates to sum/count/max over non-negative
    arguments with upward-monotone having predicates (and desc-ordered top-k),
    so a partially covered group can never fake its way into the result;
  * plans without aggregation are safe under any partition.

Deletes are drawn without replacement from distinct pre-state rows and inserts
are brand-new rows, so every interleaving of the delta is well-formed. Float
values are quarters (k/4): sums are exact in any evaluation order.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from sketchd.algebra import DELETE, INSERT, DeltaRelation, Schema
from sketchd.partitions import PartitionCatalog, RangePartition
from sketchd.plans import (
    Aggregate,
    AggSpec,
    Arith,
    Attr,
    Cmp,
    Join,
    Merge,
    Plan,
    Project,
    Select,
    TableAccess,
    TopK,
    const,
)
from sketchd.store import TableStore

R_SCHEMA = Schema(
    "r", (("k", "i64"), ("g", "i64"), ("b", "i64"), ("c", "i64"), ("x", "f64"))
)
S_SCHEMA = Schema("s", (("e", "i64"), ("h", "i64"), ("y", "i64")))

G_MAX = 12  # group domain [0, G_MAX]
J_MAX = 8  # join key domain
C_MAX = 100
Y_MAX = 50


@dataclass
class Case:
    seed: int
    plan: Plan  # Merge-rooted
    base_rows: dict[str, list[tuple]]
    catalog: PartitionCatalog
    delta: dict[str, DeltaRelation]

    def build_store(self) -> TableStore:
        store = TableStore()
        for name, rows in self.base_rows.items():
            store.create_table(R_SCHEMA if name == "r" else S_SCHEMA)
            store.load_rows(name, rows)
        return store


def _r_row(rng: random.Random, key: int) -> tuple:
    return (
        key,
        rng.randint(0, G_MAX),
        rng.randint(0, J_MAX),
        rng.randint(0, C_MAX),
        rng.randint(0, 4 * C_MAX) / 4.0,
    )


def _s_row(rng: random.Random, key: int) -> tuple:
    return (rng.randint(0, J_MAX), rng.randint(0, G_MAX), rng.randint(0, Y_MAX))


def _boundaries(rng: random.Random, low: int, high: int) -> list[int]:
    fragments = rng.randint(4, 16)
    cuts = sorted(rng.sample(range(low + 1, high), min(fragments - 1, high - low - 1)))
    return [low, *cuts, high]


def _where_pred(rng: random.Random, schema: Schema) -> Cmp:
    attr, kind = rng.choice([c for c in schema.columns if c[1] == "i64"])
    op = rng.choice(["<", "<=", ">", ">=", "!="])
    return Cmp(op, Attr(attr), const(rng.randint(0, C_MAX)))


def _single_table_plan(rng: random.Random) -> Plan:
    node: Plan = TableAccess("r")
    if rng.random() < 0.5:
        node = Select(node, _where_pred(rng, R_SCHEMA))
    group_attr = "g"
    if rng.random() < 0.3:
        # pass-through projection, possibly renaming and adding a computed column
        node = Select(node, _where_pred(rng, R_SCHEMA)) if rng.random() < 0.2 else node
        node = Project(
            node,
            (
                (Attr("g"), "g"),
                (Attr("c"), "c"),
                (Arith("*", Attr("c"), const(2)), "c2"),
                (Attr("x"), "x"),
            ),
        )
        arg_pool = ["c", "c2", "x"]
    else:
        arg_pool = ["c", "x"]
    n_aggs = rng.randint(1, 3)
    aggs = []
    for i in range(n_aggs):
        fn = rng.choice(["sum", "count", "avg", "min", "max"])
        aggs.append(AggSpec(fn, rng.choice(arg_pool), f"o{i}"))
    node = Aggregate(node, (group_attr,), tuple(aggs))
    if rng.random() < 0.7:
        spec = rng.choice(aggs)
        op = rng.choice(["<", "<=", ">", ">="])
        threshold = rng.randint(0, 600 if spec.fn == "sum" else 200)
        # the constant kind must match the aggregate's output kind
        if spec.fn == "avg" or (spec.fn != "count" and _is_float_arg(spec)):
            ref = const(threshold / 2.0)
        else:
            ref = const(threshold)
        node = Select(node, Cmp(op, Attr(spec.out), ref))
    if rng.random() < 0.4:
        order_attr = rng.choice(["g"] + [s.out for s in aggs])
        node = TopK(node, rng.randint(1, 5), ((order_attr, rng.choice(["asc", "desc"])),))
    return Merge(node)


def _is_float_arg(spec: AggSpec) -> bool:
    return spec.arg == "x"


def _join_plan(rng: random.Random) -> Plan:
    left: Plan = TableAccess("r")
    if rng.random() < 0.5:
        left = Select(left, _where_pred(rng, R_SCHEMA))
    right: Plan = TableAccess("s")
    if rng.random() < 0.4:
        right = Select(right, Cmp(rng.choice(["<", ">"]), Attr("y"), const(rng.randint(0, Y_MAX))))
    node: Plan = Join(left, right, Cmp("=", Attr("b"), Attr("e")))
    n_aggs = rng.randint(1, 2)
    aggs = []
    for i in range(n_aggs):
        fn = rng.choice(["sum", "count", "max"])
        arg = rng.choice(["c", "y"])
        aggs.append(AggSpec(fn, arg, f"o{i}"))
    node = Aggregate(node, ("g",), tuple(aggs))
    if rng.random() < 0.7:
        spec = rng.choice(aggs)
        node = Select(node, Cmp(">", Attr(spec.out), const(rng.randint(0, 400))))
    if rng.random() < 0.3:
        node = TopK(node, rng.randint(1, 4), ((aggs[0].out, "desc"),))
    return Merge(node)


def _stateless_plan(rng: random.Random) -> Plan:
    table = rng.choice(["r", "s"])
    schema = R_SCHEMA if table == "r" else S_SCHEMA
    node: Plan = TableAccess(table)
    if rng.random() < 0.7:
        node = Select(node, _where_pred(rng, schema))
    if rng.random() < 0.4:
        names = schema.attribute_names
        keep = [n for n in names if rng.random() < 0.8] or [names[0]]
        node = Project(node, tuple((Attr(n), n) for n in keep))
        order_pool = keep
    else:
        order_pool = list(schema.attribute_names)
    if rng.random() < 0.5:
        order_attr = rng.choice([n for n in order_pool])
        node = TopK(node, rng.randint(1, 6), ((order_attr, rng.choice(["asc", "desc"])),))
    return Merge(node)


def make_case(seed: int) -> Case:
    rng = random.Random(seed)
    family = rng.choice(["single", "single", "join", "stateless"])
    n_r = rng.randint(5, 500)
    rows_r = [_r_row(rng, k) for k in range(n_r)]
    base_rows = {"r": rows_r}
    parts = [RangePartition("r", "g", "i64", _boundaries(rng, 0, G_MAX + 1))]
    if family == "join":
        n_s = rng.randint(5, 300)
        base_rows["s"] = [_s_row(rng, k) for k in range(n_s)]
        s_attr = rng.choice(["e", "h"])
        high = (J_MAX if s_attr == "e" else G_MAX) + 1
        parts.append(RangePartition("s", s_attr, "i64", _boundaries(rng, 0, high)))
        plan = _join_plan(rng)
    elif family == "single":
        plan = _single_table_plan(rng)
    else:
        plan = _stateless_plan(rng)
        if "s" in _plan_tables(plan):
            n_s = rng.randint(5, 300)
            base_rows["s"] = [_s_row(rng, k) for k in range(n_s)]
            parts.append(RangePartition("s", "e", "i64", _boundaries(rng, 0, J_MAX + 1)))

    catalog = PartitionCatalog.build(parts)
    delta = _make_delta(rng, base_rows)
    return Case(seed, plan, base_rows, catalog, delta)


def _plan_tables(plan) -> set[str]:
    from sketchd.plans import base_relations

    return base_relations(plan)


def _make_delta(rng: random.Random, base_rows: dict[str, list[tuple]]) -> dict[str, DeltaRelation]:
    total = rng.randint(1, 50)
    out: dict[str, DeltaRelation] = {}
    tables = list(base_rows)
    next_key = 10_000
    deletable = {name: list(dict.fromkeys(rows)) for name, rows in base_rows.items()}
    for name in tables:
        rng.shuffle(deletable[name])
    for _ in range(total):
        name = rng.choice(tables)
        schema = R_SCHEMA if name == "r" else S_SCHEMA
        delta = out.setdefault(name, DeltaRelation(schema))
        if rng.random() < 0.6 or not deletable[name]:
            row = _r_row(rng, next_key) if name == "r" else _s_row(rng, next_key)
            next_key += 1
            delta.add(INSERT, row, rng.randint(1, 2))
        else:
            row = deletable[name].pop()
            mult = base_rows[name].count(row)
            delta.add(DELETE, row, rng.randint(1, mult))
    return out


def delta_entries(delta: dict[str, DeltaRelation]) -> list[tuple[str, int, tuple, int]]:
    """Flatten to (relation, tag, row, mult) in deterministic order."""
    out = []
    for name in sorted(delta):
        for (tag, row), mult in delta[name].entries.items():
            out.append((name, tag, row, mult))
    return out
