"""Work-reduction helpers: bloom join pre-filters and selection push-down.

Both are transparent: they only drop delta rows that provably cannot change
the maintained sketch, so the final sketch matches the unoptimized run.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .plans import (
    Aggregate,
    And,
    Attr,
    Cmp,
    Join,
    Merge,
    Not,
    Or,
    Plan,
    Pred,
    Project,
    Select,
    TableAccess,
    TopK,
    TruePred,
)

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _key_to_u64(key) -> int:
    """Stable 64-bit image of a join key (independent of PYTHONHASHSEED)."""
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    if isinstance(key, float):
        return struct.unpack("<Q", struct.pack("<d", key))[0]
    return key & _MASK64


class BloomFilter:
    """Double-hashing bloom filter over join-key values.

    Sized from the expected distinct-key count and a target false-positive
    rate. Deletions never touch the filter: a stale positive only costs work,
    never correctness.
    """

    def __init__(self, expected_n: int, fpr: float):
        expected_n = max(1, expected_n)
        if not (0.0 < fpr < 1.0):
            raise ValueError("fpr must be in (0, 1)")
        ln2 = math.log(2.0)
        self.m = max(8, math.ceil(-expected_n * math.log(fpr) / (ln2 * ln2)))
        self.h = max(1, math.ceil((self.m / expected_n) * ln2))
        self.fpr = fpr
        self.bits = np.zeros((self.m + 63) // 64, dtype=np.uint64)

    def _positions(self, key):
        u = _key_to_u64(key)
        h1 = _splitmix64(u)
        h2 = _splitmix64(u ^ 0xA5A5A5A5A5A5A5A5) | 1
        for i in range(self.h):
            yield ((h1 + i * h2) & _MASK64) % self.m

    def insert(self, key) -> None:
        for pos in self._positions(key):
            self.bits[pos >> 6] |= np.uint64(1 << (pos & 63))

    def may_contain(self, key) -> bool:
        for pos in self._positions(key):
            if not (int(self.bits[pos >> 6]) >> (pos & 63)) & 1:
                return False
        return True

    def insert_many(self, keys) -> None:
        for key in keys:
            self.insert(key)


def bloom_build(values, fpr: float = 0.01, expected_n: int | None = None) -> BloomFilter:
    """Filter containing every distinct value of the iterable."""
    values = list(values)
    bf = BloomFilter(expected_n if expected_n is not None else max(1, len(set(values))), fpr)
    bf.insert_many(values)
    return bf


def prefilter_join_delta(delta, bloom: BloomFilter, key_position: int):
    """Drop annotated delta rows whose join key is definitely absent.

    Output is always a subset of the input; no false negatives for keys the
    filter has seen.
    """
    from .partitions import AnnotatedDelta

    kept = {
        entry: mult
        for entry, mult in delta.entries.items()
        if bloom.may_contain(entry[1][key_position])
    }
    return AnnotatedDelta(delta.schema, kept)


# --------------------------------------------------------------------------
# Selection push-down planning
# --------------------------------------------------------------------------


@dataclass
class PushdownPlan:
    """Per-relation predicates safe to apply while extracting deltas."""

    predicates: dict[str, Pred] = field(default_factory=dict)

    def for_relation(self, relation: str) -> Pred | None:
        return self.predicates.get(relation)


def _pass_through_renames(items) -> dict[str, str] | None:
    """output name -> input attribute, when every item is a bare attribute."""
    out = {}
    for expr, name in items:
        if not isinstance(expr, Attr):
            return None
        out[name] = expr.name
    return out


def _rewrite_pred(pred: Pred, renames: dict[str, str]) -> Pred | None:
    """Rewrite a predicate in terms of pre-projection attribute names."""
    from .plans import Arith, Const

    def rewrite_expr(e):
        if isinstance(e, Attr):
            name = renames.get(e.name)
            return Attr(name) if name is not None else None
        if isinstance(e, Const):
            return e
        if isinstance(e, Arith):
            l, r = rewrite_expr(e.left), rewrite_expr(e.right)
            return Arith(e.op, l, r) if l is not None and r is not None else None
        return None

    if isinstance(pred, TruePred):
        return pred
    if isinstance(pred, Cmp):
        l, r = rewrite_expr(pred.left), rewrite_expr(pred.right)
        return Cmp(pred.op, l, r) if l is not None and r is not None else None
    if isinstance(pred, And):
        parts = [_rewrite_pred(p, renames) for p in pred.parts]
        return And(tuple(parts)) if all(p is not None for p in parts) else None
    if isinstance(pred, Or):
        parts = [_rewrite_pred(p, renames) for p in pred.parts]
        return Or(tuple(parts)) if all(p is not None for p in parts) else None
    if isinstance(pred, Not):
        part = _rewrite_pred(pred.part, renames)
        return Not(part) if part is not None else None
    return None


def plan_pushdown(plan: Plan) -> PushdownPlan:
    """Selections whose whole subtree down to one scan is stateless.

    Walking down from each selection, only Select/Project/TableAccess may
    appear below it; Project steps must be pure attribute pass-throughs so the
    predicate can be rewritten against base columns. Anything under a join,
    aggregate, or top-k is never pushed. A relation scanned more than once, or
    scanned anywhere without a pushable filter, gets nothing: dropped delta
    rows might matter to the other scan.
    """
    contexts: dict[str, list[Pred | None]] = {}

    def descend(node: Plan, pending: list[Pred] | None):
        # pending None marks an unpushable path (non-pass-through projection)
        if isinstance(node, Merge):
            descend(node.input, pending)
        elif isinstance(node, Select):
            descend(node.input, None if pending is None else pending + [node.predicate])
        elif isinstance(node, Project):
            moved: list[Pred] | None = None
            renames = _pass_through_renames(node.items)
            if pending is not None and renames is not None:
                moved = []
                for pred in pending:
                    rewritten = _rewrite_pred(pred, renames)
                    if rewritten is None:
                        moved = None
                        break
                    moved.append(rewritten)
            descend(node.input, moved)
        elif isinstance(node, TableAccess):
            combined: Pred | None = None
            if pending:
                combined = pending[0] if len(pending) == 1 else And(tuple(pending))
            contexts.setdefault(node.relation, []).append(combined)
        elif isinstance(node, Join):
            descend(node.left, [])
            descend(node.right, [])
        elif isinstance(node, (Aggregate, TopK)):
            descend(node.input, [])
        else:  # pragma: no cover - exhaustive over plan nodes
            raise TypeError(f"not a plan node: {node!r}")

    descend(plan, [])
    out = PushdownPlan()
    for relation, ctxs in contexts.items():
        if len(ctxs) == 1 and ctxs[0] is not None:
            out.predicates[relation] = ctxs[0]
    return out
