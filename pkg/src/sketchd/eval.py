"""Bag-semantics evaluation of plans, plain and sketch-annotated.

The annotated evaluator is the capture / full-maintenance path: each output
row carries the union of the sketches of the input rows it was derived from.
With a Merge root it returns the accurate sketch (the union over all result
rows). It is deliberately simple row-at-a-time code; it doubles as the oracle
the incremental engine is tested against.
"""

from __future__ import annotations

from .algebra import (
    DELETE,
    INT,
    INT64_MAX,
    INT64_MIN,
    BagRelation,
    Database,
    DeltaRelation,
    Schema,
)
from .errors import IllFormedDelta, Overflow, TypeMismatch, UnknownRelation
from .partitions import AnnotatedDelta, AnnotatedRelation, Sketch
from .plans import (
    Aggregate,
    And,
    Attr,
    Cmp,
    Join,
    Merge,
    Plan,
    Project,
    Select,
    TableAccess,
    TopK,
    compile_expr,
    compile_pred,
    output_schema,
)

# --------------------------------------------------------------------------
# Ordering helpers shared with the incremental top-k state
# --------------------------------------------------------------------------


class Desc:
    """Wrapper inverting comparisons, for descending sort components."""

    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __lt__(self, other):
        return other.v < self.v

    def __le__(self, other):
        return other.v <= self.v

    def __eq__(self, other):
        return isinstance(other, Desc) and self.v == other.v

    def __hash__(self):
        return hash(("desc", self.v))

    def __repr__(self):
        return f"Desc({self.v!r})"


def order_key_fn(order, schema: Schema):
    """Row -> sort key implementing the order-by list (with directions)."""
    parts = []
    for attr, direction in order:
        pos = schema.position(attr)
        parts.append((pos, direction == "desc"))

    def key(row):
        return tuple(Desc(row[p]) if d else row[p] for p, d in parts)

    return key


def take_first_k(sorted_entries, k: int):
    """First k rows (by multiplicity) of an already sorted entry stream.

    Entries are (payload, mult); the boundary entry is split so the output
    counts exactly min(k, total) rows.
    """
    out = []
    pos = 0
    for payload, mult in sorted_entries:
        if pos >= k:
            break
        take = min(mult, k - pos)
        out.append((payload, take))
        pos += take
    return out


# --------------------------------------------------------------------------
# Plain evaluation
# --------------------------------------------------------------------------


def _equi_keys(predicate, left_schema: Schema, right_schema: Schema):
    """Split a join predicate into hashable equality key positions + residual.

    Returns (left_positions, right_positions, residual_pred or None), or None
    when the predicate has no usable equality conjunct.
    """
    conjuncts = list(predicate.parts) if isinstance(predicate, And) else [predicate]
    left_names = set(left_schema.attribute_names)
    right_names = set(right_schema.attribute_names)
    lpos, rpos, residual = [], [], []
    for part in conjuncts:
        if (
            isinstance(part, Cmp)
            and part.op == "="
            and isinstance(part.left, Attr)
            and isinstance(part.right, Attr)
        ):
            a, b = part.left.name, part.right.name
            if a in left_names and b in right_names:
                lpos.append(left_schema.position(a))
                rpos.append(right_schema.position(b))
                continue
            if b in left_names and a in right_names:
                lpos.append(left_schema.position(b))
                rpos.append(right_schema.position(a))
                continue
        residual.append(part)
    if not lpos:
        return None
    residual_pred = None
    if residual:
        residual_pred = residual[0] if len(residual) == 1 else And(tuple(residual))
    return lpos, rpos, residual_pred


def _agg_value(fn: str, arg_kind: str, values):
    """Fold (value, mult) pairs into one aggregate value."""
    if fn == "count":
        return sum(m for _, m in values)
    if fn == "min":
        return min(v for v, _ in values)
    if fn == "max":
        return max(v for v, _ in values)
    total = 0 if arg_kind == INT else 0.0
    cnt = 0
    for v, m in values:
        total += v * m
        cnt += m
    if arg_kind == INT and not (INT64_MIN <= total <= INT64_MAX):
        raise Overflow(f"sum left the 64-bit integer range: {total}")
    if fn == "sum":
        return total
    return total / cnt  # avg


def evaluate(plan: Plan, db: Database) -> BagRelation:
    """Evaluate a Merge-free plan over a plain database."""
    if isinstance(plan, Merge):
        raise TypeMismatch("plain evaluation does not accept a Merge root")
    schemas = {name: rel.schema for name, rel in db.items()}
    out_schema = output_schema(plan, schemas)  # full type-check up front
    return _eval(plan, db, out_schema)


def _eval(plan: Plan, db: Database, schema: Schema) -> BagRelation:
    schemas = {name: rel.schema for name, rel in db.items()}
    if isinstance(plan, TableAccess):
        rel = db.get(plan.relation)
        if rel is None:
            raise UnknownRelation(plan.relation)
        return rel
    if isinstance(plan, Select):
        child_schema = output_schema(plan.input, schemas)
        child = _eval(plan.input, db, child_schema)
        pred = compile_pred(plan.predicate, child_schema)
        out = BagRelation(schema)
        for row, mult in child.rows.items():
            if pred(row):
                out.add(row, mult)
        return out
    if isinstance(plan, Project):
        child_schema = output_schema(plan.input, schemas)
        child = _eval(plan.input, db, child_schema)
        fns = [compile_expr(e, child_schema)[0] for e, _ in plan.items]
        out = BagRelation(schema)
        for row, mult in child.rows.items():
            out.add(tuple(f(row) for f in fns), mult)
        return out
    if isinstance(plan, Join):
        ls = output_schema(plan.left, schemas)
        rs = output_schema(plan.right, schemas)
        left = _eval(plan.left, db, ls)
        right = _eval(plan.right, db, rs)
        out = BagRelation(schema)
        keys = _equi_keys(plan.predicate, ls, rs)
        if keys is not None:
            lpos, rpos, residual = keys
            res_fn = compile_pred(residual, schema) if residual else None
            index: dict = {}
            for rrow, rmult in right.rows.items():
                index.setdefault(tuple(rrow[p] for p in rpos), []).append((rrow, rmult))
            for lrow, lmult in left.rows.items():
                for rrow, rmult in index.get(tuple(lrow[p] for p in lpos), ()):
                    joined = lrow + rrow
                    if res_fn is None or res_fn(joined):
                        out.add(joined, lmult * rmult)
        else:
            pred = compile_pred(plan.predicate, schema)
            for lrow, lmult in left.rows.items():
                for rrow, rmult in right.rows.items():
                    joined = lrow + rrow
                    if pred(joined):
                        out.add(joined, lmult * rmult)
        return out
    if isinstance(plan, Aggregate):
        child_schema = output_schema(plan.input, schemas)
        child = _eval(plan.input, db, child_schema)
        gpos = [child_schema.position(g) for g in plan.group_by]
        apos = [(child_schema.position(s.arg), child_schema.kind_of(s.arg)) for s in plan.aggs]
        groups: dict[tuple, list] = {}
        for row, mult in child.rows.items():
            groups.setdefault(tuple(row[p] for p in gpos), []).append((row, mult))
        out = BagRelation(schema)
        for key, members in groups.items():
            aggs = tuple(
                _agg_value(spec.fn, kind, [(row[pos], m) for row, m in members])
                for spec, (pos, kind) in zip(plan.aggs, apos)
            )
            out.add(key + aggs, 1)
        return out
    if isinstance(plan, TopK):
        child = _eval(plan.input, db, schema)
        key = order_key_fn(plan.order, schema)
        ordered = sorted(child.rows.items(), key=lambda kv: (key(kv[0]), kv[0]))
        out = BagRelation(schema)
        for row, mult in take_first_k(ordered, plan.k):
            out.add(row, mult)
        return out
    raise TypeMismatch(f"not a plan node: {plan!r}")


# --------------------------------------------------------------------------
# Annotated evaluation
# --------------------------------------------------------------------------

AnnotatedDatabase = dict[str, AnnotatedRelation]


def evaluate_annotated(plan: Plan, adb: AnnotatedDatabase):
    """Evaluate over an annotated database.

    Returns an AnnotatedRelation, or the accurate sketch (int bitmask) when
    the plan root is a Merge node.
    """
    if isinstance(plan, Merge):
        result = evaluate_annotated(plan.input, adb)
        sketch = 0
        for (_, s), _ in result:
            sketch |= s
        return sketch
    schemas = {name: rel.schema for name, rel in adb.items()}
    schema = output_schema(plan, schemas)
    return _eval_annotated(plan, adb, schema)


def _eval_annotated(plan: Plan, adb: AnnotatedDatabase, schema: Schema) -> AnnotatedRelation:
    schemas = {name: rel.schema for name, rel in adb.items()}
    if isinstance(plan, TableAccess):
        rel = adb.get(plan.relation)
        if rel is None:
            raise UnknownRelation(plan.relation)
        return rel
    if isinstance(plan, Select):
        child_schema = output_schema(plan.input, schemas)
        child = _eval_annotated(plan.input, adb, child_schema)
        pred = compile_pred(plan.predicate, child_schema)
        out = AnnotatedRelation(schema)
        for (row, sketch), mult in child:
            if pred(row):
                out.add(row, sketch, mult)
        return out
    if isinstance(plan, Project):
        child_schema = output_schema(plan.input, schemas)
        child = _eval_annotated(plan.input, adb, child_schema)
        fns = [compile_expr(e, child_schema)[0] for e, _ in plan.items]
        out = AnnotatedRelation(schema)
        for (row, sketch), mult in child:
            out.add(tuple(f(row) for f in fns), sketch, mult)
        return out
    if isinstance(plan, Join):
        ls = output_schema(plan.left, schemas)
        rs = output_schema(plan.right, schemas)
        left = _eval_annotated(plan.left, adb, ls)
        right = _eval_annotated(plan.right, adb, rs)
        out = AnnotatedRelation(schema)
        keys = _equi_keys(plan.predicate, ls, rs)
        if keys is not None:
            lpos, rpos, residual = keys
            res_fn = compile_pred(residual, schema) if residual else None
            index: dict = {}
            for (rrow, rsk), rmult in right:
                index.setdefault(tuple(rrow[p] for p in rpos), []).append((rrow, rsk, rmult))
            for (lrow, lsk), lmult in left:
                for rrow, rsk, rmult in index.get(tuple(lrow[p] for p in lpos), ()):
                    joined = lrow + rrow
                    if res_fn is None or res_fn(joined):
                        out.add(joined, lsk | rsk, lmult * rmult)
        else:
            pred = compile_pred(plan.predicate, schema)
            for (lrow, lsk), lmult in left:
                for (rrow, rsk), rmult in right:
                    joined = lrow + rrow
                    if pred(joined):
                        out.add(joined, lsk | rsk, lmult * rmult)
        return out
    if isinstance(plan, Aggregate):
        child_schema = output_schema(plan.input, schemas)
        child = _eval_annotated(plan.input, adb, child_schema)
        gpos = [child_schema.position(g) for g in plan.group_by]
        apos = [(child_schema.position(s.arg), child_schema.kind_of(s.arg)) for s in plan.aggs]
        groups: dict[tuple, list] = {}
        for (row, sketch), mult in child:
            groups.setdefault(tuple(row[p] for p in gpos), []).append((row, sketch, mult))
        out = AnnotatedRelation(schema)
        for key, members in groups.items():
            sketch = 0
            for _, s, _ in members:
                sketch |= s
            aggs = tuple(
                _agg_value(spec.fn, kind, [(row[pos], m) for row, _, m in members])
                for spec, (pos, kind) in zip(plan.aggs, apos)
            )
            out.add(key + aggs, sketch, 1)
        return out
    if isinstance(plan, TopK):
        child = _eval_annotated(plan.input, adb, schema)
        key = order_key_fn(plan.order, schema)
        ordered = sorted(child, key=lambda kv: (key(kv[0][0]), kv[0][0], kv[0][1]))
        out = AnnotatedRelation(schema)
        for (row, sketch), mult in take_first_k(ordered, plan.k):
            out.add(row, sketch, mult)
        return out
    raise TypeMismatch(f"not a plan node: {plan!r}")


# --------------------------------------------------------------------------
# Extraction: drop sketches / keep only sketches
# --------------------------------------------------------------------------


def tuples_in(x):
    """Project the tuple component, preserving tags and multiplicities."""
    if isinstance(x, AnnotatedRelation):
        out = BagRelation(x.schema)
        for (row, _), mult in x:
            out.add(row, mult)
        return out
    if isinstance(x, AnnotatedDelta):
        out = DeltaRelation(x.schema)
        for (tag, row, _), mult in x:
            out.add(tag, row, mult)
        return out
    raise TypeMismatch(f"tuples_in expects an annotated relation/delta, got {type(x)}")


def frags_in(x) -> dict:
    """Bag of sketches: {sketch: mult} or {(tag, sketch): mult} for deltas."""
    out: dict = {}
    if isinstance(x, AnnotatedRelation):
        for (_, sketch), mult in x:
            out[sketch] = out.get(sketch, 0) + mult
        return out
    if isinstance(x, AnnotatedDelta):
        for (tag, _, sketch), mult in x:
            key = (tag, sketch)
            out[key] = out.get(key, 0) + mult
        return out
    raise TypeMismatch(f"frags_in expects an annotated relation/delta, got {type(x)}")


def frag_set(frag_bag: dict) -> Sketch:
    """Union of a bag of sketches into one fragment set."""
    out = 0
    for key in frag_bag:
        sketch = key[1] if isinstance(key, tuple) else key
        out |= sketch
    return out


def annotated_apply_delta(rel: AnnotatedRelation, delta: AnnotatedDelta) -> AnnotatedRelation:
    """Apply a tagged annotated delta to an annotated bag (for oracle checks)."""
    out = AnnotatedRelation(rel.schema, dict(rel.entries))
    for (tag, row, sketch), mult in delta.inserts_first():
        key = (row, sketch)
        if tag == DELETE:
            have = out.entries.get(key, 0)
            if have < mult:
                raise IllFormedDelta(f"annotated delete exceeds multiplicity for {key!r}")
            if have == mult:
                del out.entries[key]
            else:
                out.entries[key] = have - mult
        else:
            out.entries[key] = out.entries.get(key, 0) + mult
    return out
