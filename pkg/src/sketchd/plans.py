"""Query plans: algebra tree nodes, predicates, scalar expressions.

Plans are immutable trees. Attribute references are resolved by name against
the input schema when a node is compiled, and evaluated positionally after
that. A plan used for sketch capture/maintenance has exactly one Merge node at
the root; plans used for plain answering have none.
"""

from __future__ import annotations

import hashlib
import json
import operator
from dataclasses import dataclass
from typing import Callable, Union

from .algebra import FLOAT, INT, KINDS, STR, Schema
from .errors import TypeMismatch, UnknownRelation

# --------------------------------------------------------------------------
# Scalar expressions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Attr:
    name: str


@dataclass(frozen=True)
class Const:
    value: Union[int, float, str]
    kind: str


@dataclass(frozen=True)
class Arith:
    op: str  # one of + - *
    left: "Expr"
    right: "Expr"


Expr = Union[Attr, Const, Arith]

_ARITH_FNS = {"+": operator.add, "-": operator.sub, "*": operator.mul}


def const(value) -> Const:
    if isinstance(value, bool):
        raise TypeMismatch("boolean constants are not values")
    if isinstance(value, int):
        return Const(value, INT)
    if isinstance(value, float):
        return Const(value, FLOAT)
    if isinstance(value, str):
        return Const(value, STR)
    raise TypeMismatch(f"unsupported constant {value!r}")


def compile_expr(expr: Expr, schema: Schema) -> tuple[Callable, str]:
    """Compile an expression to a row function, returning (fn, result kind)."""
    if isinstance(expr, Attr):
        pos = schema.position(expr.name)
        kind = schema.columns[pos][1]
        return operator.itemgetter(pos), kind
    if isinstance(expr, Const):
        if expr.kind not in KINDS:
            raise TypeMismatch(f"bad constant kind {expr.kind!r}")
        value = expr.value
        return (lambda row: value), expr.kind
    if isinstance(expr, Arith):
        lf, lk = compile_expr(expr.left, schema)
        rf, rk = compile_expr(expr.right, schema)
        if lk == STR or rk == STR:
            raise TypeMismatch("arithmetic over strings")
        if lk != rk:
            raise TypeMismatch(f"mixed-kind arithmetic {lk} {expr.op} {rk}")
        fn = _ARITH_FNS.get(expr.op)
        if fn is None:
            raise TypeMismatch(f"unknown arithmetic operator {expr.op!r}")
        return (lambda row: fn(lf(row), rf(row))), lk
    raise TypeMismatch(f"not an expression: {expr!r}")


# --------------------------------------------------------------------------
# Predicates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Cmp:
    op: str  # one of = != < <= > >=
    left: Expr
    right: Expr


@dataclass(frozen=True)
class And:
    parts: tuple["Pred", ...]


@dataclass(frozen=True)
class Or:
    parts: tuple["Pred", ...]


@dataclass(frozen=True)
class Not:
    part: "Pred"


@dataclass(frozen=True)
class TruePred:
    pass


Pred = Union[Cmp, And, Or, Not, TruePred]

TRUE = TruePred()

_CMP_FNS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


def compile_pred(pred: Pred, schema: Schema) -> Callable:
    """Compile a predicate to a row -> bool function, type-checking first.

    Comparisons require both sides to have the same kind; there is no
    three-valued logic (no NULLs in the model).
    """
    if isinstance(pred, TruePred):
        return lambda row: True
    if isinstance(pred, Cmp):
        lf, lk = compile_expr(pred.left, schema)
        rf, rk = compile_expr(pred.right, schema)
        if lk != rk:
            raise TypeMismatch(f"comparison between kinds {lk} and {rk}")
        fn = _CMP_FNS.get(pred.op)
        if fn is None:
            raise TypeMismatch(f"unknown comparison {pred.op!r}")
        return lambda row: fn(lf(row), rf(row))
    if isinstance(pred, And):
        fns = [compile_pred(p, schema) for p in pred.parts]
        return lambda row: all(f(row) for f in fns)
    if isinstance(pred, Or):
        fns = [compile_pred(p, schema) for p in pred.parts]
        return lambda row: any(f(row) for f in fns)
    if isinstance(pred, Not):
        f = compile_pred(pred.part, schema)
        return lambda row: not f(row)
    raise TypeMismatch(f"not a predicate: {pred!r}")


# --------------------------------------------------------------------------
# Plan nodes
# --------------------------------------------------------------------------

AGG_FNS = ("sum", "count", "avg", "min", "max")


@dataclass(frozen=True)
class TableAccess:
    relation: str


@dataclass(frozen=True)
class Select:
    input: "Plan"
    predicate: Pred


@dataclass(frozen=True)
class Project:
    input: "Plan"
    items: tuple[tuple[Expr, str], ...]  # (expression, output name)


@dataclass(frozen=True)
class Join:
    left: "Plan"
    right: "Plan"
    predicate: Pred  # TRUE means cross product


@dataclass(frozen=True)
class AggSpec:
    fn: str
    arg: str
    out: str


@dataclass(frozen=True)
class Aggregate:
    input: "Plan"
    group_by: tuple[str, ...]
    aggs: tuple[AggSpec, ...]


@dataclass(frozen=True)
class TopK:
    input: "Plan"
    k: int
    order: tuple[tuple[str, str], ...]  # (attribute, "asc" | "desc")


@dataclass(frozen=True)
class Merge:
    input: "Plan"


Plan = Union[TableAccess, Select, Project, Join, Aggregate, TopK, Merge]


def children(plan: Plan) -> tuple[Plan, ...]:
    if isinstance(plan, TableAccess):
        return ()
    if isinstance(plan, Join):
        return (plan.left, plan.right)
    return (plan.input,)


def base_relations(plan: Plan) -> set[str]:
    if isinstance(plan, TableAccess):
        return {plan.relation}
    out: set[str] = set()
    for child in children(plan):
        out |= base_relations(child)
    return out


def strip_merge(plan: Plan) -> Plan:
    return plan.input if isinstance(plan, Merge) else plan


def output_schema(plan: Plan, schemas: dict[str, Schema]) -> Schema:
    """Derive (and type-check) the output schema of a plan."""
    if isinstance(plan, TableAccess):
        schema = schemas.get(plan.relation)
        if schema is None:
            raise UnknownRelation(plan.relation)
        return schema
    if isinstance(plan, Merge):
        return output_schema(plan.input, schemas)
    if isinstance(plan, Select):
        schema = output_schema(plan.input, schemas)
        compile_pred(plan.predicate, schema)  # type-check
        return schema
    if isinstance(plan, Project):
        schema = output_schema(plan.input, schemas)
        cols = []
        for expr, name in plan.items:
            _, kind = compile_expr(expr, schema)
            cols.append((name, kind))
        return Schema("", tuple(cols))
    if isinstance(plan, Join):
        ls = output_schema(plan.left, schemas)
        rs = output_schema(plan.right, schemas)
        joined = Schema("", ls.columns + rs.columns)  # rejects duplicate names
        compile_pred(plan.predicate, joined)
        return joined
    if isinstance(plan, Aggregate):
        schema = output_schema(plan.input, schemas)
        cols = [(g, schema.kind_of(g)) for g in plan.group_by]
        for spec in plan.aggs:
            if spec.fn not in AGG_FNS:
                raise TypeMismatch(f"unknown aggregate {spec.fn!r}")
            arg_kind = schema.kind_of(spec.arg)
            if spec.fn in ("sum", "avg") and arg_kind == STR:
                raise TypeMismatch(f"{spec.fn} over string attribute {spec.arg!r}")
            if spec.fn == "count":
                kind = INT
            elif spec.fn == "avg":
                kind = FLOAT
            else:
                kind = arg_kind
            cols.append((spec.out, kind))
        return Schema("", tuple(cols))
    if isinstance(plan, TopK):
        schema = output_schema(plan.input, schemas)
        if plan.k <= 0:
            raise TypeMismatch("top-k requires k >= 1")
        for attr, direction in plan.order:
            schema.position(attr)
            if direction not in ("asc", "desc"):
                raise TypeMismatch(f"bad order direction {direction!r}")
        return schema
    raise TypeMismatch(f"not a plan node: {plan!r}")


# --------------------------------------------------------------------------
# JSON encoding (workload records, templates, state snapshots)
# --------------------------------------------------------------------------


def expr_to_json(expr: Expr):
    if isinstance(expr, Attr):
        return {"attr": expr.name}
    if isinstance(expr, Const):
        return {"const": expr.value, "kind": expr.kind}
    return {"bin": expr.op, "left": expr_to_json(expr.left), "right": expr_to_json(expr.right)}


def expr_from_json(data) -> Expr:
    if "attr" in data:
        return Attr(data["attr"])
    if "const" in data:
        kind = data["kind"]
        value = data["const"]
        if kind == INT:
            value = int(value)
        elif kind == FLOAT:
            value = float(value)
        return Const(value, kind)
    return Arith(data["bin"], expr_from_json(data["left"]), expr_from_json(data["right"]))


def pred_to_json(pred: Pred):
    if isinstance(pred, TruePred):
        return {"true": True}
    if isinstance(pred, Cmp):
        return {"cmp": pred.op, "left": expr_to_json(pred.left), "right": expr_to_json(pred.right)}
    if isinstance(pred, And):
        return {"and": [pred_to_json(p) for p in pred.parts]}
    if isinstance(pred, Or):
        return {"or": [pred_to_json(p) for p in pred.parts]}
    return {"not": pred_to_json(pred.part)}


def pred_from_json(data) -> Pred:
    if "true" in data:
        return TRUE
    if "cmp" in data:
        return Cmp(data["cmp"], expr_from_json(data["left"]), expr_from_json(data["right"]))
    if "and" in data:
        return And(tuple(pred_from_json(p) for p in data["and"]))
    if "or" in data:
        return Or(tuple(pred_from_json(p) for p in data["or"]))
    return Not(pred_from_json(data["not"]))


def plan_to_json(plan: Plan):
    if isinstance(plan, TableAccess):
        return {"node": "table", "relation": plan.relation}
    if isinstance(plan, Select):
        return {"node": "select", "predicate": pred_to_json(plan.predicate), "input": plan_to_json(plan.input)}
    if isinstance(plan, Project):
        return {
            "node": "project",
            "items": [[expr_to_json(e), name] for e, name in plan.items],
            "input": plan_to_json(plan.input),
        }
    if isinstance(plan, Join):
        return {
            "node": "join",
            "predicate": pred_to_json(plan.predicate),
            "left": plan_to_json(plan.left),
            "right": plan_to_json(plan.right),
        }
    if isinstance(plan, Aggregate):
        return {
            "node": "aggregate",
            "group_by": list(plan.group_by),
            "aggs": [[s.fn, s.arg, s.out] for s in plan.aggs],
            "input": plan_to_json(plan.input),
        }
    if isinstance(plan, TopK):
        return {
            "node": "topk",
            "k": plan.k,
            "order": [list(o) for o in plan.order],
            "input": plan_to_json(plan.input),
        }
    if isinstance(plan, Merge):
        return {"node": "merge", "input": plan_to_json(plan.input)}
    raise TypeMismatch(f"not a plan node: {plan!r}")


def plan_from_json(data) -> Plan:
    node = data["node"]
    if node == "table":
        return TableAccess(data["relation"])
    if node == "select":
        return Select(plan_from_json(data["input"]), pred_from_json(data["predicate"]))
    if node == "project":
        items = tuple((expr_from_json(e), name) for e, name in data["items"])
        return Project(plan_from_json(data["input"]), items)
    if node == "join":
        return Join(plan_from_json(data["left"]), plan_from_json(data["right"]), pred_from_json(data["predicate"]))
    if node == "aggregate":
        aggs = tuple(AggSpec(fn, arg, out) for fn, arg, out in data["aggs"])
        return Aggregate(plan_from_json(data["input"]), tuple(data["group_by"]), aggs)
    if node == "topk":
        order = tuple((attr, direction) for attr, direction in data["order"])
        return TopK(plan_from_json(data["input"]), data["k"], order)
    if node == "merge":
        return Merge(plan_from_json(data["input"]))
    raise TypeMismatch(f"unknown plan node kind {node!r}")


# --------------------------------------------------------------------------
# Query templates
#
# The registry key is the plan with selection constants abstracted to
# placeholders; the concrete constants are kept alongside. Under relaxed
# reuse, selections above an aggregate (HAVING) and the top-k bound may
# additionally differ between registry hits.
# --------------------------------------------------------------------------


def _contains_aggregate(plan: Plan) -> bool:
    if isinstance(plan, Aggregate):
        return True
    return any(_contains_aggregate(c) for c in children(plan))


def _template_json(plan: Plan):
    """Plan JSON with HAVING constants and top-k bounds abstracted.

    A selection is HAVING-shaped when an Aggregate sits somewhere below it;
    only those get their constants replaced. WHERE-shaped selections stay
    concrete.
    """
    if isinstance(plan, TableAccess):
        return {"node": "table", "relation": plan.relation}
    if isinstance(plan, Select):
        pred = pred_to_json(plan.predicate)
        if _contains_aggregate(plan.input):
            pred = _abstract_consts(pred)
        return {"node": "select", "predicate": pred, "input": _template_json(plan.input)}
    if isinstance(plan, Project):
        return {
            "node": "project",
            "items": [[expr_to_json(e), name] for e, name in plan.items],
            "input": _template_json(plan.input),
        }
    if isinstance(plan, Join):
        return {
            "node": "join",
            "predicate": pred_to_json(plan.predicate),
            "left": _template_json(plan.left),
            "right": _template_json(plan.right),
        }
    if isinstance(plan, Aggregate):
        return {
            "node": "aggregate",
            "group_by": list(plan.group_by),
            "aggs": [[s.fn, s.arg, s.out] for s in plan.aggs],
            "input": _template_json(plan.input),
        }
    if isinstance(plan, TopK):
        return {
            "node": "topk",
            "k": "?",
            "order": [list(o) for o in plan.order],
            "input": _template_json(plan.input),
        }
    if isinstance(plan, Merge):
        return {"node": "merge", "input": _template_json(plan.input)}
    raise TypeMismatch(f"not a plan node: {plan!r}")


def _abstract_consts(pred_json):
    if "cmp" in pred_json:
        out = dict(pred_json)
        for side in ("left", "right"):
            if "const" in out[side]:
                out[side] = {"const": "?", "kind": out[side]["kind"]}
        return out
    for key in ("and", "or"):
        if key in pred_json:
            return {key: [_abstract_consts(p) for p in pred_json[key]]}
    if "not" in pred_json:
        return {"not": _abstract_consts(pred_json["not"])}
    return pred_json


def template_key(plan: Plan, reuse: str = "exact") -> str:
    """Registry key for a plan.

    "exact": two plans match only when identical (template plus constants).
    "relaxed": plans may additionally differ in HAVING constants and the
    top-k bound; only sound when the caller has verified reuse safety.
    """
    plan = strip_merge(plan)
    if reuse == "exact":
        data = plan_to_json(plan)
    elif reuse == "relaxed":
        data = _template_json(plan)
    else:
        raise ValueError(f"unknown reuse mode {reuse!r}")
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
