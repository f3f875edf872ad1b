"""The incremental maintenance processor.

An EngineState pairs a capture plan (Merge root) with per-operator state:
fragment counters at the merge root, per-group aggregate state, ordered
multisets for min/max, a nested ordered map for top-k. `init_state` builds the
state by annotated evaluation of the whole query (this is also the full
recapture path); `process_delta` pushes an annotated delta through the
operator tree bottom-up, updates state in place, and emits the sketch delta.

Exactly one `process_delta` call may run at a time per state; distinct states
are independent. If `RecaptureRequired` escapes, the state is stale and must
be rebuilt with `init_state`.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass

import numpy as np

from .algebra import (
    DELETE,
    INSERT,
    INT,
    INT64_MAX,
    INT64_MIN,
    BagRelation,
    Database,
    Schema,
)
from .errors import InconsistentDelta, Overflow, RecaptureRequired, TypeMismatch
from .eval import (
    Desc,
    _equi_keys,
    evaluate_annotated,
    order_key_fn,
    take_first_k,
)
from .optimize import BloomFilter, bloom_build
from .partitions import AnnotatedDelta, AnnotatedRelation, PartitionCatalog, SketchDelta
from .plans import (
    Aggregate,
    AggSpec,
    Join,
    Merge,
    Plan,
    Project,
    Select,
    TableAccess,
    TopK,
    base_relations,
    compile_expr,
    compile_pred,
    output_schema,
)


TOPK_BUFFER_AUTO = "auto"  # five rows of buffer per requested result row
AUTO_TOPK_FACTOR = 5
DEFAULT_MINMAX_BUFFER = 16


@dataclass
class EngineOptions:
    """Knobs for the optional work-reduction machinery.

    Buffers of None keep exact (unbounded) operator state; bounded buffers
    trade memory for occasional full recaptures. A top-k buffer of
    TOPK_BUFFER_AUTO resolves to 5*k per operator.
    """

    bloom: bool = False
    bloom_fpr: float = 0.01
    topk_buffer: int | str | None = None
    minmax_buffer: int | None = None

    def resolve_topk_buffer(self, k: int) -> int | None:
        if self.topk_buffer == TOPK_BUFFER_AUTO:
            return AUTO_TOPK_FACTOR * k
        return self.topk_buffer


class StaticProvider:
    """Table provider over a fixed in-memory database (ignores versions)."""

    def __init__(self, db: Database):
        self.db = db

    def scan(self, relation: str, version: int) -> BagRelation:
        return self.db[relation]

    def schemas(self) -> dict[str, Schema]:
        return {name: rel.schema for name, rel in self.db.items()}


def _iter_bits(sketch: int):
    while sketch:
        low = sketch & -sketch
        yield low.bit_length() - 1
        sketch ^= low


# ---------------------------------------------------------------------------
# Operator states
# ---------------------------------------------------------------------------


class MergeState:
    """Per-fragment counters of result rows referencing the fragment."""

    __slots__ = ("counts",)

    def __init__(self, total_fragments: int):
        self.counts = np.zeros(total_fragments, dtype=np.int64)

    def sketch(self) -> int:
        out = 0
        for f in np.flatnonzero(self.counts).tolist():
            out |= 1 << f
        return out

    def apply(self, delta: AnnotatedDelta) -> SketchDelta:
        changed: dict[int, int] = {}
        counts = self.counts
        for (tag, _, sketch), mult in delta.inserts_first():
            step = tag * mult
            for f in _iter_bits(sketch):
                if f not in changed:
                    changed[f] = int(counts[f])
                counts[f] += step
        inserts = 0
        deletes = 0
        for f, before in changed.items():
            after = int(counts[f])
            if after < 0:
                raise InconsistentDelta(f"merge count for fragment {f} fell below zero")
            if before == 0 and after > 0:
                inserts |= 1 << f
            elif before > 0 and after == 0:
                deletes |= 1 << f
        return SketchDelta(inserts, deletes)


class BoundedMultiset:
    """Ordered (value -> multiplicity) map, optionally keeping only the
    extreme end.

    When bounded, `threshold` splits the domain: values strictly on the kept
    side are stored exactly, all others are only counted (`overflow`). The
    extreme is provable while the buffer is non-empty; an empty buffer with a
    positive overflow means the state must be recaptured.
    """

    __slots__ = ("mode", "capacity", "values", "mults", "total", "overflow", "threshold")

    def __init__(self, mode: str, capacity: int | None):
        if mode not in ("min", "max"):
            raise ValueError("mode must be min or max")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.mode = mode
        self.capacity = capacity
        self.values: list = []
        self.mults: dict = {}
        self.total = 0
        self.overflow = 0
        self.threshold = None

    def _buffered_side(self, value) -> bool:
        if self.threshold is None:
            return True
        return value < self.threshold if self.mode == "min" else value > self.threshold

    def insert(self, value, mult: int) -> None:
        if self._buffered_side(value):
            if value not in self.mults:
                bisect.insort(self.values, value)
                self.mults[value] = mult
            else:
                self.mults[value] += mult
            self.total += mult
        else:
            self.overflow += mult

    def delete(self, value, mult: int) -> None:
        if self._buffered_side(value):
            have = self.mults.get(value, 0)
            if have < mult:
                raise InconsistentDelta(f"delete of unbuffered value {value!r}")
            if have == mult:
                del self.mults[value]
                self.values.remove(value)
            else:
                self.mults[value] -= mult
            self.total -= mult
        else:
            if self.overflow < mult:
                raise InconsistentDelta("delete exceeds tracked overflow count")
            self.overflow -= mult

    def evict_to_capacity(self) -> None:
        if self.capacity is None:
            return
        while self.values:
            far = self.values[-1] if self.mode == "min" else self.values[0]
            far_mult = self.mults[far]
            if self.total - far_mult < self.capacity:
                break
            self.values.pop(-1 if self.mode == "min" else 0)
            del self.mults[far]
            self.total -= far_mult
            self.overflow += far_mult
            self.threshold = far

    def live_total(self) -> int:
        return self.total + self.overflow

    def extreme(self):
        if self.values:
            return self.values[0] if self.mode == "min" else self.values[-1]
        if self.overflow:
            raise RecaptureRequired(f"{self.mode} buffer exhausted with live rows remaining")
        return None


class AggGroup:
    """State for one group: live row count, per-fragment counters, and one
    slot per aggregate function."""

    __slots__ = ("cnt", "frag_counts", "sketch", "fn_states")

    def __init__(self, specs: tuple[AggSpec, ...], arg_kinds: list[str], minmax_capacity: int | None):
        self.cnt = 0
        self.frag_counts: dict[int, int] = {}
        self.sketch = 0
        self.fn_states: list = []
        for spec, kind in zip(specs, arg_kinds):
            if spec.fn in ("sum", "avg"):
                self.fn_states.append(0 if kind == INT else 0.0)
            elif spec.fn == "count":
                self.fn_states.append(None)
            else:
                self.fn_states.append(BoundedMultiset(spec.fn, minmax_capacity))

    def apply(self, tag: int, sketch: int, mult: int, specs, arg_values, arg_kinds) -> None:
        step = tag * mult
        self.cnt += step
        if self.cnt < 0:
            raise InconsistentDelta("group count fell below zero")
        for f in _iter_bits(sketch):
            new = self.frag_counts.get(f, 0) + step
            if new < 0:
                raise InconsistentDelta(f"fragment counter for {f} fell below zero")
            if new == 0:
                del self.frag_counts[f]
                self.sketch &= ~(1 << f)
            else:
                self.frag_counts[f] = new
                self.sketch |= 1 << f
        for i, spec in enumerate(specs):
            if spec.fn in ("sum", "avg"):
                total = self.fn_states[i] + step * arg_values[i]
                if arg_kinds[i] == INT and not (INT64_MIN <= total <= INT64_MAX):
                    raise Overflow(f"running sum left the 64-bit range: {total}")
                self.fn_states[i] = total
            elif spec.fn == "count":
                pass
            else:
                ms: BoundedMultiset = self.fn_states[i]
                if tag == INSERT:
                    ms.insert(arg_values[i], mult)
                else:
                    ms.delete(arg_values[i], mult)

    def evict_to_capacity(self) -> None:
        for state in self.fn_states:
            if isinstance(state, BoundedMultiset):
                state.evict_to_capacity()

    def output_values(self, specs) -> tuple:
        out = []
        for spec, state in zip(specs, self.fn_states):
            if spec.fn == "sum":
                out.append(state)
            elif spec.fn == "count":
                out.append(self.cnt)
            elif spec.fn == "avg":
                out.append(state / self.cnt)
            else:
                out.append(state.extreme())
        return tuple(out)

    def signature(self, specs) -> tuple:
        """Exact comparison key for no-op suppression: sketch plus one exact
        value per function. Averages compare as (sum, count) rationals rather
        than the emitted float, so a changed group is never mistaken for an
        unchanged one."""
        parts: list = [self.sketch]
        for spec, state in zip(specs, self.fn_states):
            if spec.fn == "sum":
                parts.append(state)
            elif spec.fn == "count":
                parts.append(self.cnt)
            elif spec.fn == "avg":
                parts.append((state, self.cnt))
            else:
                parts.append(state.extreme())
        return tuple(parts)


class TopKState:
    """Nested ordered map: order key -> (row, sketch) -> multiplicity.

    Bounded variants keep only a prefix of the order (at least `capacity`
    rows); `threshold` marks the first unbuffered order key and `overflow`
    counts the rows beyond it.
    """

    __slots__ = ("k", "capacity", "okeys", "inner", "total", "overflow", "threshold", "key_fn")

    def __init__(self, k: int, capacity: int | None, key_fn):
        if capacity is not None and capacity < k:
            raise ValueError("top-k buffer must hold at least k rows")
        self.k = k
        self.capacity = capacity
        self.okeys: list = []
        self.inner: dict = {}
        self.total = 0
        self.overflow = 0
        self.threshold = None
        self.key_fn = key_fn

    def _buffered_side(self, okey) -> bool:
        return self.threshold is None or okey < self.threshold

    def insert(self, row, sketch: int, mult: int) -> None:
        okey = self.key_fn(row)
        if self._buffered_side(okey):
            group = self.inner.get(okey)
            if group is None:
                bisect.insort(self.okeys, okey)
                group = self.inner[okey] = {}
            entry = (row, sketch)
            group[entry] = group.get(entry, 0) + mult
            self.total += mult
        else:
            self.overflow += mult

    def delete(self, row, sketch: int, mult: int) -> None:
        okey = self.key_fn(row)
        if self._buffered_side(okey):
            group = self.inner.get(okey)
            have = group.get((row, sketch), 0) if group else 0
            if have < mult:
                raise InconsistentDelta(f"top-k delete of unbuffered row {row!r}")
            if have == mult:
                del group[(row, sketch)]
                if not group:
                    del self.inner[okey]
                    self.okeys.remove(okey)
            else:
                group[(row, sketch)] -= mult
            self.total -= mult
        else:
            if self.overflow < mult:
                raise InconsistentDelta("top-k delete exceeds tracked overflow")
            self.overflow -= mult

    def evict_to_capacity(self) -> None:
        if self.capacity is None:
            return
        while self.okeys:
            last = self.okeys[-1]
            last_total = sum(self.inner[last].values())
            if self.total - last_total < self.capacity:
                break
            self.okeys.pop()
            self.total -= last_total
            self.overflow += last_total
            del self.inner[last]
            self.threshold = last

    def current_topk(self) -> list:
        """First k buffered rows, or RecaptureRequired when unprovable."""
        if self.total < self.k and self.overflow > 0:
            raise RecaptureRequired("top-k buffer holds fewer than k rows")

        def entries():
            for okey in self.okeys:
                for entry in sorted(self.inner[okey]):
                    yield entry, self.inner[okey][entry]

        return take_first_k(entries(), self.k)


# ---------------------------------------------------------------------------
# Engine state
# ---------------------------------------------------------------------------

STATE_FORMAT = 1


class EngineState:
    """Composite per-query state; see module docstring."""

    def __init__(self, plan: Plan, provider, catalog: PartitionCatalog, version: int, options: EngineOptions):
        if not isinstance(plan, Merge):
            raise TypeMismatch("maintenance plans need a Merge root")
        self.plan = plan
        self.provider = provider
        self.catalog = catalog
        self.version = version
        self.options = options
        self.schemas = provider.schemas()
        self.merge = MergeState(catalog.total_fragments)
        self.node_states: dict[tuple, object] = {}
        self.blooms: dict[tuple[str, str], BloomFilter] = {}
        self._info: dict[tuple, dict] = {}
        self._compile(plan.input, (0,))

    # -- plan compilation ---------------------------------------------------

    def _compile(self, node: Plan, path: tuple) -> Schema:
        info: dict = {}
        if isinstance(node, TableAccess):
            schema = self.schemas[node.relation]
            info["relation"] = node.relation
        elif isinstance(node, Select):
            schema = self._compile(node.input, path + (0,))
            info["pred"] = compile_pred(node.predicate, schema)
        elif isinstance(node, Project):
            child = self._compile(node.input, path + (0,))
            info["fns"] = [compile_expr(e, child)[0] for e, _ in node.items]
            schema = output_schema(node, self.schemas)
        elif isinstance(node, Join):
            ls = self._compile(node.left, path + (0,))
            rs = self._compile(node.right, path + (1,))
            schema = Schema("", ls.columns + rs.columns)
            info["left_schema"], info["right_schema"] = ls, rs
            info["equi"] = _equi_keys(node.predicate, ls, rs)
            if info["equi"] is not None and info["equi"][2] is not None:
                info["residual_fn"] = compile_pred(info["equi"][2], schema)
            else:
                info["residual_fn"] = None
            info["pred_fn"] = compile_pred(node.predicate, schema)
        elif isinstance(node, Aggregate):
            child = self._compile(node.input, path + (0,))
            info["gpos"] = [child.position(g) for g in node.group_by]
            info["apos"] = [child.position(s.arg) for s in node.aggs]
            info["akinds"] = [child.kind_of(s.arg) for s in node.aggs]
            schema = output_schema(node, self.schemas)
            self.node_states.setdefault(path, {})
        elif isinstance(node, TopK):
            schema = self._compile(node.input, path + (0,))
            key_fn = order_key_fn(node.order, schema)
            info["key_fn"] = key_fn
            self.node_states.setdefault(
                path, TopKState(node.k, self.options.resolve_topk_buffer(node.k), key_fn)
            )
        else:
            raise TypeMismatch(f"unexpected node under Merge: {node!r}")
        info["schema"] = schema
        self._info[path] = info
        return schema

    def schema_at(self, path: tuple) -> Schema:
        return self._info[path]["schema"]

    def sketch(self) -> int:
        return self.merge.sketch()

    # -- capture (annotated evaluation that also fills the state) -------------

    def rebuild(self) -> int:
        """(Re)build state at self.version, columnar fast path when it fits."""
        if hasattr(self.provider, "columns"):
            from .vectorized import try_vec_capture

            self.blooms = {}
            sketch = try_vec_capture(self, self.plan)
            if sketch is not None:
                return sketch
        return self.capture()

    def capture(self) -> int:
        """(Re)build all operator state from the provider at self.version."""
        self.merge = MergeState(self.catalog.total_fragments)
        self.blooms = {}
        for path in list(self.node_states):
            node = self._node_at(path)
            if isinstance(node, Aggregate):
                self.node_states[path] = {}
            elif isinstance(node, TopK):
                self.node_states[path] = TopKState(
                    node.k, self.options.resolve_topk_buffer(node.k), self._info[path]["key_fn"]
                )
        result = self._capture_node(self.plan.input, (0,))
        for (_, sketch), mult in result:
            for f in _iter_bits(sketch):
                self.merge.counts[f] += mult
        return self.merge.sketch()

    def _node_at(self, path: tuple) -> Plan:
        node: Plan = self.plan.input
        for step in path[1:]:
            node = (node.left, node.right)[step] if isinstance(node, Join) else node.input
        return node

    def _capture_node(self, node: Plan, path: tuple) -> AnnotatedRelation:
        info = self._info[path]
        schema = info["schema"]
        if isinstance(node, TableAccess):
            return self.catalog.annotate(self.provider.scan(node.relation, self.version))
        if isinstance(node, Select):
            child = self._capture_node(node.input, path + (0,))
            pred = info["pred"]
            out = AnnotatedRelation(schema)
            for (row, sketch), mult in child:
                if pred(row):
                    out.add(row, sketch, mult)
            return out
        if isinstance(node, Project):
            child = self._capture_node(node.input, path + (0,))
            fns = info["fns"]
            out = AnnotatedRelation(schema)
            for (row, sketch), mult in child:
                out.add(tuple(f(row) for f in fns), sketch, mult)
            return out
        if isinstance(node, Join):
            left = self._capture_node(node.left, path + (0,))
            right = self._capture_node(node.right, path + (1,))
            return self._join_full(node, info, left, right)
        if isinstance(node, Aggregate):
            child = self._capture_node(node.input, path + (0,))
            groups: dict[tuple, AggGroup] = {}
            gpos, apos, akinds = info["gpos"], info["apos"], info["akinds"]
            for (row, sketch), mult in child:
                key = tuple(row[p] for p in gpos)
                group = groups.get(key)
                if group is None:
                    group = groups[key] = AggGroup(node.aggs, akinds, self.options.minmax_buffer)
                group.apply(INSERT, sketch, mult, node.aggs, [row[p] for p in apos], akinds)
            out = AnnotatedRelation(schema)
            for key, group in groups.items():
                group.evict_to_capacity()
                out.add(key + group.output_values(node.aggs), group.sketch, 1)
            self.node_states[path] = groups
            return out
        if isinstance(node, TopK):
            child = self._capture_node(node.input, path + (0,))
            state = TopKState(node.k, self.options.resolve_topk_buffer(node.k), info["key_fn"])
            for (row, sketch), mult in child:
                state.insert(row, sketch, mult)
            state.evict_to_capacity()
            self.node_states[path] = state
            out = AnnotatedRelation(schema)
            for (row, sketch), mult in state.current_topk():
                out.add(row, sketch, mult)
            return out
        raise TypeMismatch(f"unexpected node: {node!r}")

    def _join_full(self, node: Join, info, left: AnnotatedRelation, right: AnnotatedRelation) -> AnnotatedRelation:
        out = AnnotatedRelation(info["schema"])
        equi = info["equi"]
        if equi is not None:
            lpos, rpos, _ = equi
            res_fn = info["residual_fn"]
            index: dict = {}
            for (rrow, rsk), rmult in right:
                index.setdefault(tuple(rrow[p] for p in rpos), []).append((rrow, rsk, rmult))
            for (lrow, lsk), lmult in left:
                for rrow, rsk, rmult in index.get(tuple(lrow[p] for p in lpos), ()):
                    joined = lrow + rrow
                    if res_fn is None or res_fn(joined):
                        out.add(joined, lsk | rsk, lmult * rmult)
        else:
            pred = info["pred_fn"]
            for (lrow, lsk), lmult in left:
                for (rrow, rsk), rmult in right:
                    joined = lrow + rrow
                    if pred(joined):
                        out.add(joined, lsk | rsk, lmult * rmult)
        return out

    # -- incremental processing ------------------------------------------------

    def process_delta(self, delta_db: dict[str, AnnotatedDelta], new_version: int | None = None, trace=None) -> SketchDelta:
        """Push one annotated delta batch through the tree; returns the sketch delta.

        On RecaptureRequired the state is left inconsistent on purpose; the
        caller rebuilds it via `capture`.
        """
        root_delta = self._process(self.plan.input, (0,), delta_db, trace)
        if trace is not None:
            trace.append(((), root_delta))
        result = self.merge.apply(root_delta)
        self._feed_blooms(delta_db)
        self.version = new_version if new_version is not None else self.version + 1
        return result

    def _process(self, node: Plan, path: tuple, delta_db, trace) -> AnnotatedDelta:
        info = self._info[path]
        schema = info["schema"]
        if isinstance(node, TableAccess):
            out = delta_db.get(node.relation) or AnnotatedDelta(schema)
        elif isinstance(node, Select):
            child = self._process(node.input, path + (0,), delta_db, trace)
            pred = info["pred"]
            out = AnnotatedDelta(schema)
            for (tag, row, sketch), mult in child:
                if pred(row):
                    out.add(tag, row, sketch, mult)
        elif isinstance(node, Project):
            child = self._process(node.input, path + (0,), delta_db, trace)
            fns = info["fns"]
            out = AnnotatedDelta(schema)
            for (tag, row, sketch), mult in child:
                out.add(tag, tuple(f(row) for f in fns), sketch, mult)
        elif isinstance(node, Join):
            out = self._process_join(node, path, info, delta_db, trace)
        elif isinstance(node, Aggregate):
            child = self._process(node.input, path + (0,), delta_db, trace)
            out = self._process_aggregate(node, path, info, child)
        elif isinstance(node, TopK):
            child = self._process(node.input, path + (0,), delta_db, trace)
            out = self._process_topk(node, path, child)
        else:
            raise TypeMismatch(f"unexpected node: {node!r}")
        if trace is not None:
            trace.append((path, out))
        return out

    # -- join ---------------------------------------------------------------

    def _process_join(self, node: Join, path, info, delta_db, trace) -> AnnotatedDelta:
        left_delta = self._process(node.left, path + (0,), delta_db, trace)
        right_delta = self._process(node.right, path + (1,), delta_db, trace)
        out = AnnotatedDelta(info["schema"])
        if not left_delta and not right_delta:
            return out
        if left_delta:
            self._join_delta_vs_current(node, info, left_delta, side="left", out=out)
        if right_delta:
            self._join_delta_vs_current(node, info, right_delta, side="right", out=out)
        if left_delta and right_delta:
            self._join_delta_vs_delta(info, left_delta, right_delta, out)
        return out

    def _join_delta_vs_delta(self, info, left_delta, right_delta, out) -> None:
        # Insert x insert and delete x delete both insert the combined row;
        # mixed tags delete it.
        equi = info["equi"]
        if equi is not None:
            lpos, rpos, _ = equi
            res_fn = info["residual_fn"]
            index: dict = {}
            for (rtag, rrow, rsk), rmult in right_delta:
                index.setdefault(tuple(rrow[p] for p in rpos), []).append((rtag, rrow, rsk, rmult))
            for (ltag, lrow, lsk), lmult in left_delta:
                for rtag, rrow, rsk, rmult in index.get(tuple(lrow[p] for p in lpos), ()):
                    joined = lrow + rrow
                    if res_fn is None or res_fn(joined):
                        out.add(ltag * rtag, joined, lsk | rsk, lmult * rmult)
        else:
            pred = info["pred_fn"]
            for (ltag, lrow, lsk), lmult in left_delta:
                for (rtag, rrow, rsk), rmult in right_delta:
                    joined = lrow + rrow
                    if pred(joined):
                        out.add(ltag * rtag, joined, lsk | rsk, lmult * rmult)

    def _join_delta_vs_current(self, node: Join, info, delta: AnnotatedDelta, side: str, out: AnnotatedDelta) -> None:
        other = node.right if side == "left" else node.left
        delta = self._maybe_bloom_filter(info, delta, side, other)
        if not delta:
            return
        if isinstance(other, TableAccess) and hasattr(self.provider, "join_delta_with_table"):
            joined = self.provider.join_delta_with_table(
                delta, other.relation, side, self.version, node.predicate, self.catalog
            )
            for entry, mult in joined:
                out.add(*entry, mult)
            return
        current = self._current_annotated(other)
        equi = info["equi"]
        if equi is not None:
            lpos, rpos, _ = equi
            res_fn = info["residual_fn"]
            dpos, cpos = (lpos, rpos) if side == "left" else (rpos, lpos)
            index: dict = {}
            for (crow, csk), cmult in current:
                index.setdefault(tuple(crow[p] for p in cpos), []).append((crow, csk, cmult))
            for (tag, drow, dsk), dmult in delta:
                for crow, csk, cmult in index.get(tuple(drow[p] for p in dpos), ()):
                    joined = drow + crow if side == "left" else crow + drow
                    if res_fn is None or res_fn(joined):
                        out.add(tag, joined, dsk | csk, dmult * cmult)
        else:
            pred = info["pred_fn"]
            for (tag, drow, dsk), dmult in delta:
                for (crow, csk), cmult in current:
                    joined = drow + crow if side == "left" else crow + drow
                    if pred(joined):
                        out.add(tag, joined, dsk | csk, dmult * cmult)

    def _current_annotated(self, subplan: Plan) -> AnnotatedRelation:
        adb = {
            rel: self.catalog.annotate(self.provider.scan(rel, self.version))
            for rel in base_relations(subplan)
        }
        return evaluate_annotated(subplan, adb)

    def _maybe_bloom_filter(self, info, delta: AnnotatedDelta, side: str, other: Plan) -> AnnotatedDelta:
        """Drop delta rows with provably no join partner on the other side."""
        if not self.options.bloom or not isinstance(other, TableAccess):
            return delta
        equi = info["equi"]
        if equi is None or len(equi[0]) != 1:
            return delta
        lpos, rpos, _ = equi
        if side == "left":
            delta_pos, other_pos = lpos[0], rpos[0]
        else:
            delta_pos, other_pos = rpos[0], lpos[0]
        other_schema = self.schemas[other.relation]
        attr = other_schema.columns[other_pos][0]
        bloom = self.blooms.get((other.relation, attr))
        if bloom is None:
            rel = self.provider.scan(other.relation, self.version)
            keys = {row[other_pos] for row in rel.rows}
            bloom = bloom_build(keys, self.options.bloom_fpr)
            self.blooms[(other.relation, attr)] = bloom
        kept = {
            entry: mult
            for entry, mult in delta.entries.items()
            if bloom.may_contain(entry[1][delta_pos])
        }
        return AnnotatedDelta(delta.schema, kept)

    def _feed_blooms(self, delta_db: dict[str, AnnotatedDelta]) -> None:
        # Deletions are ignored on purpose: stale positives cost work only.
        for (relation, attr), bloom in self.blooms.items():
            delta = delta_db.get(relation)
            if not delta:
                continue
            pos = self.schemas[relation].position(attr)
            for (tag, row, _), _ in delta:
                if tag == INSERT:
                    bloom.insert(row[pos])

    # -- aggregate -------------------------------------------------------------

    def _process_aggregate(self, node: Aggregate, path, info, child: AnnotatedDelta) -> AnnotatedDelta:
        schema = info["schema"]
        out = AnnotatedDelta(schema)
        if not child:
            return out
        groups: dict[tuple, AggGroup] = self.node_states[path]
        gpos, apos, akinds = info["gpos"], info["apos"], info["akinds"]
        snapshot: dict[tuple, tuple | None] = {}
        for (tag, row, sketch), mult in child.inserts_first():
            key = tuple(row[p] for p in gpos)
            group = groups.get(key)
            if key not in snapshot:
                snapshot[key] = (
                    (key + group.output_values(node.aggs), group.sketch, group.signature(node.aggs))
                    if group
                    else None
                )
            if group is None:
                group = groups[key] = AggGroup(node.aggs, akinds, self.options.minmax_buffer)
            group.apply(tag, sketch, mult, node.aggs, [row[p] for p in apos], akinds)
        for key, old in snapshot.items():
            group = groups[key]
            if group.cnt == 0:
                del groups[key]
                new = None
            else:
                group.evict_to_capacity()
                new = (key + group.output_values(node.aggs), group.sketch, group.signature(node.aggs))
            if old is not None and new is not None and old[2] == new[2]:
                continue
            if old is not None:
                out.add(DELETE, old[0], old[1], 1)
            if new is not None:
                out.add(INSERT, new[0], new[1], 1)
        return out

    # -- top-k -------------------------------------------------------------------

    def _process_topk(self, node: TopK, path, child: AnnotatedDelta) -> AnnotatedDelta:
        schema = self._info[path]["schema"]
        out = AnnotatedDelta(schema)
        if not child:
            return out
        state: TopKState = self.node_states[path]
        old = dict(state.current_topk())
        for (tag, row, sketch), mult in child.inserts_first():
            if tag == INSERT:
                state.insert(row, sketch, mult)
            else:
                state.delete(row, sketch, mult)
        state.evict_to_capacity()
        new = dict(state.current_topk())
        # net difference: identical (row, sketch) portions cancel
        for entry in set(old) | set(new):
            change = new.get(entry, 0) - old.get(entry, 0)
            if change > 0:
                out.add(INSERT, entry[0], entry[1], change)
            elif change < 0:
                out.add(DELETE, entry[0], entry[1], -change)
        return out

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        nodes: dict[str, dict] = {}
        for path, state in self.node_states.items():
            key = ".".join(map(str, path))
            node = self._node_at(path)
            if isinstance(node, Aggregate):
                groups = []
                for gkey, group in state.items():
                    fns = []
                    for spec, fstate in zip(node.aggs, group.fn_states):
                        if spec.fn in ("sum", "avg"):
                            fns.append(fstate)
                        elif spec.fn == "count":
                            fns.append(None)
                        else:
                            fns.append(_multiset_to_dict(fstate))
                    groups.append(
                        {
                            "key": list(gkey),
                            "cnt": group.cnt,
                            "frags": {str(f): c for f, c in sorted(group.frag_counts.items())},
                            "fns": fns,
                        }
                    )
                groups.sort(key=lambda g: json.dumps(g["key"]))
                nodes[key] = {"kind": "aggregate", "groups": groups}
            else:
                entries = [
                    [list(row), format(sketch, "x"), mult]
                    for okey in state.okeys
                    for (row, sketch), mult in sorted(state.inner[okey].items())
                ]
                nodes[key] = {
                    "kind": "topk",
                    "entries": entries,
                    "overflow": state.overflow,
                    "threshold": _okey_to_raw(state.threshold),
                }
        merge = {str(f): int(c) for f, c in enumerate(self.merge.counts.tolist()) if c}
        return {
            "format": STATE_FORMAT,
            "version": self.version,
            "merge": merge,
            "nodes": nodes,
        }

    def load_dict(self, data: dict) -> None:
        if data.get("format") != STATE_FORMAT:
            raise InconsistentDelta(f"unsupported state format {data.get('format')!r}")
        self.version = data["version"]
        self.merge = MergeState(self.catalog.total_fragments)
        for f, c in data["merge"].items():
            self.merge.counts[int(f)] = c
        for key, payload in data["nodes"].items():
            path = tuple(int(p) for p in key.split("."))
            node = self._node_at(path)
            if payload["kind"] == "aggregate":
                info = self._info[path]
                groups: dict[tuple, AggGroup] = {}
                for g in payload["groups"]:
                    group = AggGroup(node.aggs, info["akinds"], self.options.minmax_buffer)
                    group.cnt = g["cnt"]
                    group.frag_counts = {int(f): c for f, c in g["frags"].items()}
                    for f in group.frag_counts:
                        group.sketch |= 1 << f
                    for i, (spec, fstate) in enumerate(zip(node.aggs, g["fns"])):
                        if spec.fn in ("sum", "avg"):
                            group.fn_states[i] = fstate
                        elif spec.fn == "count":
                            group.fn_states[i] = None
                        else:
                            group.fn_states[i] = _multiset_from_dict(
                                fstate, spec.fn, self.options.minmax_buffer
                            )
                    groups[tuple(g["key"])] = group
                self.node_states[path] = groups
            else:
                info = self._info[path]
                state = TopKState(node.k, self.options.resolve_topk_buffer(node.k), info["key_fn"])
                for row, sketch_hex, mult in payload["entries"]:
                    state.insert(tuple(row), int(sketch_hex, 16), mult)
                state.overflow = payload["overflow"]
                state.threshold = _okey_from_raw(payload["threshold"], node.order)
                self.node_states[path] = state

    def state_digest(self) -> str:
        """Canonical digest of the operator state (excludes the version stamp)."""
        import hashlib

        data = self.to_dict()
        del data["version"]
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _multiset_to_dict(ms: BoundedMultiset) -> dict:
    return {
        "entries": [[v, ms.mults[v]] for v in ms.values],
        "overflow": ms.overflow,
        "threshold": ms.threshold,
    }


def _multiset_from_dict(data: dict, mode: str, capacity: int | None) -> BoundedMultiset:
    ms = BoundedMultiset(mode, capacity)
    for v, m in data["entries"]:
        ms.insert(v, m)
    ms.overflow = data["overflow"]
    ms.threshold = data["threshold"]
    return ms


def _okey_to_raw(okey):
    if okey is None:
        return None
    return [part.v if isinstance(part, Desc) else part for part in okey]


def _okey_from_raw(raw, order):
    if raw is None:
        return None
    return tuple(
        Desc(v) if direction == "desc" else v for v, (_, direction) in zip(raw, order)
    )


def init_state(
    plan: Plan,
    provider,
    catalog: PartitionCatalog,
    version: int,
    options: EngineOptions | None = None,
) -> tuple[EngineState, int]:
    """Build a fresh state by annotated evaluation; returns (state, sketch)."""
    state = EngineState(plan, provider, catalog, version, options or EngineOptions())
    sketch = state.rebuild()
    return state, sketch
