"""Independent oracles used to compute expected values for tests.

These deliberately avoid the production code paths they check: deltas are
verified with plain counter arithmetic, sketches with brute-force enumeration
over rows and groups.
"""

from __future__ import annotations

from collections import Counter

from sketchd.algebra import INSERT, BagRelation, DeltaRelation


def bag_counter(rel: BagRelation) -> Counter:
    return Counter(dict(rel.rows))


def counter_apply_delta(base: Counter, delta: DeltaRelation) -> Counter:
    out = Counter(base)
    for (tag, row), mult in delta:
        out[row] += mult if tag == INSERT else -mult
    if any(v < 0 for v in out.values()):
        raise AssertionError("oracle: delta deletes more than present")
    return +out


def counter_diff(a: Counter, b: Counter) -> dict:
    """{row: net} with positive nets to insert and negative to delete."""
    out = {}
    for row in set(a) | set(b):
        net = b.get(row, 0) - a.get(row, 0)
        if net:
            out[row] = net
    return out


def delta_as_nets(delta: DeltaRelation) -> dict:
    out: dict = {}
    for (tag, row), mult in delta:
        out[row] = out.get(row, 0) + (mult if tag == INSERT else -mult)
    return {row: net for row, net in out.items() if net}


def brute_force_group_having_sketch(rows, group_of, value_of, frag_of, passes):
    """Accurate sketch for a one-table group-by/having query, by enumeration.

    rows: iterable of (row, mult); group_of/value_of/frag_of: row functions;
    passes: predicate over the group total. Returns the set of fragments of
    all member rows of passing groups.
    """
    totals: dict = {}
    members: dict = {}
    for row, mult in rows:
        g = group_of(row)
        totals[g] = totals.get(g, 0) + value_of(row) * mult
        members.setdefault(g, []).append(row)
    frags = set()
    for g, total in totals.items():
        if passes(total):
            for row in members[g]:
                frags.add(frag_of(row))
    return frags
