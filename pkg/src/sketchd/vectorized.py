"""Columnar fast path for single-table group-by plans.

Capture and query answering scan whole tables; for the common shape

    TableAccess -> [Select|Project]* -> Aggregate -> [Select] -> [TopK]

both run over numpy columns with the kernels backend instead of row-at-a-time
Python. Shapes or types outside the pattern return None and the caller falls
back to the object path. Group and fragment accumulation walk rows in storage
order, so results match the object path bit-for-bit on exactly representable
data.
"""

from __future__ import annotations

import numpy as np

from .algebra import INT, INT64_MAX, BagRelation
from .errors import OutOfDomain
from . import kernels
from .plans import (
    Aggregate,
    And,
    Arith,
    Attr,
    Cmp,
    Const,
    Merge,
    Not,
    Or,
    Plan,
    Project,
    Select,
    TableAccess,
    TopK,
    TruePred,
    compile_pred,
    output_schema,
)

_INT_GUARD = 2**30  # keeps <=1-multiplication integer expressions inside int64


class _Shape:
    __slots__ = ("relation", "chain", "agg", "having", "topk")

    def __init__(self, relation, chain, agg, having, topk):
        self.relation = relation
        self.chain = chain  # Select/Project nodes, scan-to-aggregate order
        self.agg = agg
        self.having = having
        self.topk = topk


def _match(plan: Plan) -> _Shape | None:
    node = plan.input if isinstance(plan, Merge) else plan
    topk = None
    if isinstance(node, TopK):
        topk = node
        node = node.input
    having = None
    if isinstance(node, Select) and isinstance(node.input, Aggregate):
        having = node
        node = node.input
    if not isinstance(node, Aggregate):
        return None
    agg = node
    if len(agg.group_by) != 1:
        return None
    if any(spec.fn not in ("sum", "count", "avg") for spec in agg.aggs):
        return None
    chain = []
    node = agg.input
    while isinstance(node, (Select, Project)):
        chain.append(node)
        node = node.input
    if not isinstance(node, TableAccess):
        return None
    chain.reverse()
    return _Shape(node.relation, chain, agg, having, topk)


def _expr_mult_depth(expr) -> int:
    if isinstance(expr, Arith):
        below = max(_expr_mult_depth(expr.left), _expr_mult_depth(expr.right))
        return below + (1 if expr.op == "*" else 0)
    return 0


def _vec_expr(expr, cols: dict[str, np.ndarray]):
    if isinstance(expr, Attr):
        return cols[expr.name]
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Arith):
        left = _vec_expr(expr.left, cols)
        right = _vec_expr(expr.right, cols)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right
    raise TypeError(f"not an expression: {expr!r}")


def _interval_disjunction(pred, cols) -> np.ndarray | None:
    """Fast path for `a between lo and hi OR ...` over one column."""
    terms = list(pred.parts) if isinstance(pred, Or) else [pred]
    attr = None
    lows, highs = [], []
    for term in terms:
        if not isinstance(term, And) or len(term.parts) != 2:
            return None
        a, b = term.parts
        if not (isinstance(a, Cmp) and isinstance(b, Cmp)):
            return None
        if not (a.op == ">=" and b.op == "<="):
            return None
        if not (isinstance(a.left, Attr) and isinstance(b.left, Attr) and a.left == b.left):
            return None
        if not (isinstance(a.right, Const) and isinstance(b.right, Const)):
            return None
        if attr is None:
            attr = a.left.name
        elif attr != a.left.name:
            return None
        lows.append(a.right.value)
        highs.append(b.right.value)
    if attr is None or attr not in cols:
        return None
    col = cols[attr]
    if col.dtype == object:
        return None
    order = np.argsort(np.asarray(lows))
    lows_arr = np.asarray(lows, dtype=col.dtype)[order]
    highs_arr = np.asarray(highs, dtype=col.dtype)[order]
    return kernels.interval_mask(col, lows_arr, highs_arr)


def _vec_pred(pred, cols: dict[str, np.ndarray]) -> np.ndarray | None:
    fast = _interval_disjunction(pred, cols)
    if fast is not None:
        return fast
    if isinstance(pred, TruePred):
        n = len(next(iter(cols.values()))) if cols else 0
        return np.ones(n, dtype=bool)
    if isinstance(pred, Cmp):
        left = _vec_expr(pred.left, cols)
        right = _vec_expr(pred.right, cols)
        op = pred.op
        if op == "=":
            return left == right
        if op == "!=":
            return left != right
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        return left >= right
    if isinstance(pred, And):
        out = None
        for p in pred.parts:
            mask = _vec_pred(p, cols)
            out = mask if out is None else out & mask
        return out
    if isinstance(pred, Or):
        out = None
        for p in pred.parts:
            mask = _vec_pred(p, cols)
            out = mask if out is None else out | mask
        return out
    if isinstance(pred, Not):
        return ~_vec_pred(pred.part, cols)
    raise TypeError(f"not a predicate: {pred!r}")


def _int_guard_ok(cols: dict[str, np.ndarray], names) -> bool:
    for name in names:
        col = cols.get(name)
        if col is not None and col.dtype == np.int64 and len(col):
            if abs(int(col.max())) > _INT_GUARD or abs(int(col.min())) > _INT_GUARD:
                return False
    return True


def _pred_exprs_ok(pred) -> bool:
    if isinstance(pred, Cmp):
        return _expr_mult_depth(pred.left) <= 1 and _expr_mult_depth(pred.right) <= 1
    if isinstance(pred, (And, Or)):
        return all(_pred_exprs_ok(p) for p in pred.parts)
    if isinstance(pred, Not):
        return _pred_exprs_ok(pred.part)
    return True


def _run_chain(shape: _Shape, cols: dict[str, np.ndarray], schemas) -> dict[str, np.ndarray] | None:
    """Apply the scan-to-aggregate Select/Project chain to column arrays."""
    current = dict(cols)
    for node in shape.chain:
        if isinstance(node, Select):
            if not _pred_exprs_ok(node.predicate):
                return None
            if not _int_guard_ok(current, _attrs_in_pred(node.predicate)):
                return None
            mask = _vec_pred(node.predicate, current)
            current = {name: col[mask] for name, col in current.items()}
        else:
            out: dict[str, np.ndarray] = {}
            for expr, name in node.items:
                if _expr_mult_depth(expr) > 1:
                    return None
                if not _int_guard_ok(current, _attrs_in_expr(expr)):
                    return None
                value = _vec_expr(expr, current)
                if np.isscalar(value):
                    n = len(next(iter(current.values()))) if current else 0
                    value = np.full(n, value)
                out[name] = value
            current = out
    return current


def _attrs_in_expr(expr):
    if isinstance(expr, Attr):
        return {expr.name}
    if isinstance(expr, Arith):
        return _attrs_in_expr(expr.left) | _attrs_in_expr(expr.right)
    return set()


def _attrs_in_pred(pred):
    if isinstance(pred, Cmp):
        return _attrs_in_expr(pred.left) | _attrs_in_expr(pred.right)
    if isinstance(pred, (And, Or)):
        out = set()
        for p in pred.parts:
            out |= _attrs_in_pred(p)
        return out
    if isinstance(pred, Not):
        return _attrs_in_pred(pred.part)
    return set()


def _group_fold(shape: _Shape, store, version: int):
    """Factorized groups plus per-spec totals; None when the shape can't vectorize."""
    schema = store.schema(shape.relation)
    if schema.kind_of(shape.agg.group_by[0]) == "str":
        pass  # np.unique on object arrays still works; allow it
    cols = store.columns(shape.relation, version)
    worked = _run_chain(shape, cols, None)
    if worked is None:
        return None
    gcol = worked.get(shape.agg.group_by[0])
    if gcol is None:
        return None
    arg_cols = []
    for spec in shape.agg.aggs:
        col = worked.get(spec.arg)
        if col is None or (hasattr(col, "dtype") and col.dtype == object):
            return None
        arg_cols.append(col)
        if col.dtype == np.int64 and len(col) and spec.fn in ("sum", "avg"):
            bound = max(abs(int(col.max())), abs(int(col.min()))) * len(col)
            if bound > INT64_MAX:
                return None  # the object path reports Overflow precisely
    uniques, gids = np.unique(gcol, return_inverse=True)
    gids = gids.astype(np.int64)
    n_groups = len(uniques)
    cnt = kernels.group_count(gids, n_groups) if n_groups else np.zeros(0, dtype=np.int64)
    totals = []
    for spec, col in zip(shape.agg.aggs, arg_cols):
        if spec.fn == "count":
            totals.append(None)
        elif n_groups:
            totals.append(kernels.group_sum(gids, col, n_groups))
        else:
            totals.append(np.zeros(0))
    return worked, uniques, gids, n_groups, cnt, totals


def _group_output_rows(shape: _Shape, uniques, cnt, totals):
    """One output tuple per group, matching the object path's value types."""
    specs = shape.agg.aggs
    rows = []
    uniq_list = uniques.tolist()
    cnt_list = cnt.tolist()
    total_lists = [t.tolist() if t is not None else None for t in totals]
    for gi in range(len(uniq_list)):
        values = [uniq_list[gi]]
        c = cnt_list[gi]
        for spec, tl in zip(specs, total_lists):
            if spec.fn == "count":
                values.append(c)
            elif spec.fn == "sum":
                values.append(tl[gi])
            else:
                values.append(tl[gi] / c)
        rows.append(tuple(values))
    return rows


def try_vec_eval(plan: Plan, store, version: int) -> BagRelation | None:
    """Columnar evaluation of a Merge-free plan; None if unsupported."""
    if isinstance(plan, Merge) or not hasattr(store, "columns"):
        return None
    shape = _match(plan)
    if shape is None:
        return None
    folded = _group_fold(shape, store, version)
    if folded is None:
        return None
    _, uniques, _, n_groups, cnt, totals = folded
    out_schema = output_schema(plan, store.schemas())
    rows = _group_output_rows(shape, uniques, cnt, totals)
    agg_schema = output_schema(shape.agg, store.schemas())
    if shape.having is not None:
        pred = compile_pred(shape.having.predicate, agg_schema)
        rows = [row for row in rows if pred(row)]
    rel = BagRelation(out_schema)
    if shape.topk is not None:
        from .eval import order_key_fn, take_first_k

        key = order_key_fn(shape.topk.order, agg_schema)
        ordered = sorted(((row, 1) for row in rows), key=lambda kv: (key(kv[0]), kv[0]))
        for row, mult in take_first_k(ordered, shape.topk.k):
            rel.add(row, mult)
    else:
        for row in rows:
            rel.add(row, 1)
    return rel


def try_vec_capture(state, plan: Plan) -> int | None:
    """Columnar state build for an EngineState; returns the sketch or None.

    Fills the aggregate group map, optional top-k state, and merge counters
    exactly as the object-path capture would.
    """
    from .engine import AggGroup, MergeState, TopKState

    shape = _match(plan)
    if shape is None:
        return None
    store, catalog, version = state.provider, state.catalog, state.version
    if not hasattr(store, "columns"):
        return None
    part = catalog.partitions.get(shape.relation)
    if part is None or part.kind == "str":
        return None
    if any(spec.fn not in ("sum", "count", "avg") for spec in shape.agg.aggs):
        return None

    cols = store.columns(shape.relation, version)
    pcol = cols.get(part.attribute)
    if pcol is None or pcol.dtype == object:
        return None
    if len(pcol):
        lo, hi = pcol.min(), pcol.max()
        if lo < part.boundaries[0] or hi > part.boundaries[-1]:
            raise OutOfDomain(
                f"{shape.relation}.{part.attribute}: values outside the declared domain"
            )
    bounds = np.asarray(part.boundaries, dtype=pcol.dtype)
    frags = kernels.fragment_lookup(pcol, bounds)

    # Replay the chain with the fragment column carried along.
    carried = dict(cols)
    frag_name = "\x00frag"
    carried[frag_name] = frags
    current = carried
    for node in shape.chain:
        if isinstance(node, Select):
            if not _pred_exprs_ok(node.predicate) or not _int_guard_ok(current, _attrs_in_pred(node.predicate)):
                return None
            mask = _vec_pred(node.predicate, current)
            current = {name: col[mask] for name, col in current.items()}
        else:
            nxt: dict[str, np.ndarray] = {}
            for expr, name in node.items:
                if _expr_mult_depth(expr) > 1 or not _int_guard_ok(current, _attrs_in_expr(expr)):
                    return None
                value = _vec_expr(expr, current)
                if np.isscalar(value):
                    value = np.full(len(current[frag_name]), value)
                nxt[name] = value
            nxt[frag_name] = current[frag_name]
            current = nxt

    gcol = current.get(shape.agg.group_by[0])
    if gcol is None:
        return None
    arg_cols = []
    for spec in shape.agg.aggs:
        col = current.get(spec.arg)
        if col is None or col.dtype == object:
            return None
        if col.dtype == np.int64 and len(col) and spec.fn in ("sum", "avg"):
            bound = max(abs(int(col.max())), abs(int(col.min()))) * len(col)
            if bound > INT64_MAX:
                return None
        arg_cols.append(col)

    uniques, gids = np.unique(gcol, return_inverse=True)
    gids = gids.astype(np.int64)
    n_groups = len(uniques)
    frag_local = current[frag_name]
    base = catalog.relation_block(shape.relation)[0]

    cnt = kernels.group_count(gids, n_groups) if n_groups else np.zeros(0, dtype=np.int64)
    totals = []
    for spec, col in zip(shape.agg.aggs, arg_cols):
        if spec.fn == "count":
            totals.append(None)
        elif n_groups:
            totals.append(kernels.group_sum(gids, col, n_groups))
        else:
            totals.append(np.zeros(0))

    n_frags = part.fragment_count
    packed = gids * n_frags + frag_local
    pair_ids, pair_counts = np.unique(packed, return_counts=True)

    agg_path = None
    topk_path = None
    for path in state.node_states:
        node = state._node_at(path)
        if isinstance(node, Aggregate):
            agg_path = path
        elif isinstance(node, TopK):
            topk_path = path
    assert agg_path is not None

    specs = shape.agg.aggs
    akinds = state._info[agg_path]["akinds"]
    uniq_list = uniques.tolist()
    groups: dict[tuple, AggGroup] = {}
    order: list[AggGroup] = []
    for gi in range(n_groups):
        group = AggGroup(specs, akinds, state.options.minmax_buffer)
        group.cnt = int(cnt[gi])
        for i, spec in enumerate(specs):
            if spec.fn in ("sum", "avg"):
                total = totals[i][gi]
                group.fn_states[i] = int(total) if akinds[i] == INT else float(total)
        groups[(uniq_list[gi],)] = group
        order.append(group)
    for pid, c in zip(pair_ids.tolist(), pair_counts.tolist()):
        gi, fl = divmod(pid, n_frags)
        group = order[gi]
        f = base + fl
        group.frag_counts[f] = c
        group.sketch |= 1 << f
    state.node_states[agg_path] = groups

    result = []
    for key, group in groups.items():
        result.append((key + group.output_values(specs), group.sketch, 1))
    if shape.having is not None:
        agg_schema = state._info[agg_path]["schema"]
        pred = compile_pred(shape.having.predicate, agg_schema)
        result = [entry for entry in result if pred(entry[0])]
    if shape.topk is not None:
        info = state._info[topk_path]
        tstate = TopKState(shape.topk.k, state.options.topk_buffer, info["key_fn"])
        for row, sk, mult in result:
            tstate.insert(row, sk, mult)
        tstate.evict_to_capacity()
        state.node_states[topk_path] = tstate
        result = [(entry[0], entry[1], mult) for entry, mult in tstate.current_topk()]

    state.merge = MergeState(catalog.total_fragments)
    for _, sketch, mult in result:
        s = sketch
        while s:
            low = s & -s
            state.merge.counts[low.bit_length() - 1] += mult
            s ^= low
    return state.merge.sketch()
