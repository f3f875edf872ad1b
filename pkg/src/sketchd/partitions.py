"""Range partitions, fragment ids, sketches, and annotation.

A catalog assigns every relation one ordered, gap-free range partition over a
single attribute; each range gets a dense global fragment id. A sketch is an
int bitmask over that global fragment space. Integer and string partitions use
closed ranges on both ends; float partitions are half-open [low, next_low)
with the last range closed, which removes endpoint ambiguity on continuous
domains.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass

from .algebra import (
    DELETE,
    FLOAT,
    INSERT,
    INT,
    BagRelation,
    Database,
    DeltaRelation,
    Schema,
    check_value,
)
from .errors import (
    InconsistentDelta,
    KindMismatch,
    OutOfDomain,
    SchemaMismatch,
    UnknownRelation,
)

Sketch = int  # bitmask over global fragment ids

EMPTY_SKETCH: Sketch = 0


def sketch_from_frags(frags) -> Sketch:
    out = 0
    for f in frags:
        out |= 1 << f
    return out


def sketch_frags(sketch: Sketch) -> list[int]:
    out = []
    while sketch:
        low = sketch & -sketch
        out.append(low.bit_length() - 1)
        sketch ^= low
    return out


def sketch_size(sketch: Sketch) -> int:
    return sketch.bit_count()


def sketch_to_bytes(sketch: Sketch, total_frags: int) -> bytes:
    return sketch.to_bytes((total_frags + 7) // 8 or 1, "little")


@dataclass(frozen=True)
class SketchDelta:
    """Tagged fragment sets to add to / remove from a sketch."""

    inserts: Sketch = 0
    deletes: Sketch = 0

    def __post_init__(self):
        if self.inserts & self.deletes:
            raise InconsistentDelta("sketch delta inserts and deletes overlap")

    def __bool__(self) -> bool:
        return bool(self.inserts or self.deletes)


def sketch_apply_delta(sketch: Sketch, delta: SketchDelta) -> Sketch:
    """Apply a sketch delta; the preconditions flag maintenance bugs."""
    if delta.deletes & ~sketch:
        raise InconsistentDelta("delta deletes fragments not present in the sketch")
    if delta.inserts & sketch:
        raise InconsistentDelta("delta inserts fragments already in the sketch")
    return (sketch & ~delta.deletes) | delta.inserts


def compose_sketch_deltas(first: SketchDelta, second: SketchDelta) -> SketchDelta:
    """Net effect of applying `first` then `second`."""
    inserts = (first.inserts & ~second.deletes) | (second.inserts & ~first.deletes)
    deletes = (first.deletes & ~second.inserts) | (second.deletes & ~first.inserts)
    return SketchDelta(inserts & ~deletes, deletes & ~inserts)


@dataclass(frozen=True)
class Range:
    low: object
    high: object  # inclusive for int/str; for floats, upper boundary (see RangePartition)


class RangePartition:
    """Ordered, disjoint, domain-covering ranges over one attribute.

    Internally stored as a boundary list b[0..n] describing n ranges. Integer
    and string ranges are [b[i], b[i+1] - 1] conceptually (closed); float
    ranges are [b[i], b[i+1]) except the last, which is closed at b[n].
    Lookup is a binary search over the boundaries.
    """

    __slots__ = ("relation", "attribute", "kind", "boundaries")

    def __init__(self, relation: str, attribute: str, kind: str, boundaries: list):
        if len(boundaries) < 2:
            raise SchemaMismatch("a partition needs at least two boundaries")
        if any(boundaries[i] >= boundaries[i + 1] for i in range(len(boundaries) - 1)):
            raise SchemaMismatch("partition boundaries must be strictly increasing")
        if kind == FLOAT and any(not math.isfinite(b) for b in boundaries):
            raise KindMismatch("float partition boundaries must be finite")
        self.relation = relation
        self.attribute = attribute
        self.kind = kind
        self.boundaries = list(boundaries)

    @property
    def fragment_count(self) -> int:
        return len(self.boundaries) - 1

    def fragment_of(self, value) -> int:
        """Index of the unique range containing `value` (local, not global)."""
        check_value(value, self.kind)
        if self.kind == FLOAT and not math.isfinite(value):
            raise KindMismatch("partition attribute values must be finite")
        b = self.boundaries
        if value < b[0] or value > b[-1]:
            raise OutOfDomain(
                f"{self.relation}.{self.attribute}: value {value!r} outside [{b[0]!r}, {b[-1]!r}]"
            )
        # bisect_right - 1 puts boundary values into the range they start;
        # the domain maximum folds into the last range.
        idx = bisect.bisect_right(b, value) - 1
        return min(idx, len(b) - 2)

    def ranges(self) -> list[Range]:
        out = []
        last = self.fragment_count - 1
        for i in range(self.fragment_count):
            lo, hi = self.boundaries[i], self.boundaries[i + 1]
            if self.kind == INT and i != last:
                hi = hi - 1
            out.append(Range(lo, hi))
        return out

    def covers(self, value) -> bool:
        return self.boundaries[0] <= value <= self.boundaries[-1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RangePartition)
            and self.relation == other.relation
            and self.attribute == other.attribute
            and self.kind == other.kind
            and self.boundaries == other.boundaries
        )


def equi_depth_boundaries(values, fragments: int, domain_low, domain_high) -> list:
    """Boundary list with roughly equal row counts per range.

    Boundaries come from the sorted value distribution and are extended to the
    declared full domain [domain_low, domain_high], so later values anywhere
    in the domain still map to a fragment.
    """
    if fragments < 1:
        raise ValueError("fragment count must be >= 1")
    ordered = sorted(values)
    bounds = [domain_low]
    if ordered:
        n = len(ordered)
        for i in range(1, fragments):
            cand = ordered[min(n - 1, (i * n) // fragments)]
            if cand > bounds[-1] and cand < domain_high:
                bounds.append(cand)
    bounds.append(domain_high)
    if len(bounds) == 2 and fragments > 1 and isinstance(domain_low, (int, float)):
        # Degenerate distribution: fall back to equal-width boundaries.
        step = (domain_high - domain_low) / fragments
        mids = [domain_low + step * i for i in range(1, fragments)]
        if isinstance(domain_low, int):
            mids = sorted({int(m) for m in mids if domain_low < int(m) < domain_high})
        bounds = [domain_low, *mids, domain_high]
    return bounds


class PartitionCatalog:
    """All partitions of a database plus the global fragment id space.

    Relations registered in insertion order get consecutive blocks of dense
    fragment ids 0..F-1. Immutable once built (via `build`).
    """

    def __init__(self):
        self.partitions: dict[str, RangePartition] = {}
        self._base: dict[str, int] = {}
        self.total_fragments = 0

    @classmethod
    def build(cls, partitions: list[RangePartition]) -> "PartitionCatalog":
        cat = cls()
        for part in partitions:
            cat._add(part)
        return cat

    def _add(self, part: RangePartition) -> None:
        if part.relation in self.partitions:
            raise SchemaMismatch(f"relation {part.relation!r} already has a partition")
        self.partitions[part.relation] = part
        self._base[part.relation] = self.total_fragments
        self.total_fragments += part.fragment_count

    def partition_for(self, relation: str) -> RangePartition:
        part = self.partitions.get(relation)
        if part is None:
            raise UnknownRelation(f"no partition for relation {relation!r}")
        return part

    def fragment_id(self, relation: str, local_index: int) -> int:
        return self._base[relation] + local_index

    def relation_block(self, relation: str) -> tuple[int, int]:
        """(first global fragment id, fragment count) for a relation."""
        part = self.partition_for(relation)
        return self._base[relation], part.fragment_count

    def relation_mask(self, relation: str) -> Sketch:
        base, count = self.relation_block(relation)
        return ((1 << count) - 1) << base

    def full_sketch(self) -> Sketch:
        return (1 << self.total_fragments) - 1

    def fragment_of(self, relation: str, value) -> int:
        part = self.partition_for(relation)
        return self._base[relation] + part.fragment_of(value)

    # -- annotation ---------------------------------------------------------

    def annotate(self, rel: BagRelation) -> "AnnotatedRelation":
        part = self.partition_for(rel.schema.name)
        pos = rel.schema.position(part.attribute)
        base = self._base[rel.schema.name]
        out = AnnotatedRelation(rel.schema)
        for row, mult in rel.rows.items():
            frag = base + part.fragment_of(row[pos])
            out.add(row, 1 << frag, mult)
        return out

    def annotate_delta(self, delta: DeltaRelation) -> "AnnotatedDelta":
        part = self.partition_for(delta.schema.name)
        pos = delta.schema.position(part.attribute)
        base = self._base[delta.schema.name]
        out = AnnotatedDelta(delta.schema)
        for (tag, row), mult in delta.entries.items():
            frag = base + part.fragment_of(row[pos])
            out.add(tag, row, 1 << frag, mult)
        return out

    def annotate_database(self, db: Database) -> dict[str, "AnnotatedRelation"]:
        return {name: self.annotate(rel) for name, rel in db.items()}

    def annotate_delta_database(self, delta_db) -> dict[str, "AnnotatedDelta"]:
        return {name: self.annotate_delta(d) for name, d in delta_db.items()}

    # -- instances and range compression -------------------------------------

    def sketch_instance(self, sketch: Sketch, db: Database) -> Database:
        """Restrict each relation to the rows whose fragment is in the sketch.

        Relations with no fragment of theirs in the sketch come back empty.
        """
        out: Database = {}
        for name, rel in db.items():
            part = self.partition_for(name)
            pos = rel.schema.position(part.attribute)
            base = self._base[name]
            kept = BagRelation(rel.schema)
            for row, mult in rel.rows.items():
                frag = base + part.fragment_of(row[pos])
                if sketch >> frag & 1:
                    kept.add(row, mult)
            out[name] = kept
        return out

    def compress_ranges(self, sketch: Sketch, relation: str) -> list[Range]:
        """Minimal list of maximal ranges covering the sketch's fragments of one relation."""
        part = self.partition_for(relation)
        base = self._base[relation]
        ranges = part.ranges()
        out: list[Range] = []
        run_start = None
        for i in range(part.fragment_count + 1):
            present = i < part.fragment_count and bool(sketch >> (base + i) & 1)
            if present and run_start is None:
                run_start = i
            elif not present and run_start is not None:
                out.append(Range(ranges[run_start].low, ranges[i - 1].high))
                run_start = None
        return out

    def relation_sketch(self, sketch: Sketch, relation: str) -> Sketch:
        return sketch & self.relation_mask(relation)

    # -- (de)serialization ----------------------------------------------------

    def to_records(self) -> list[dict]:
        return [
            {
                "relation": p.relation,
                "attribute": p.attribute,
                "kind": p.kind,
                "boundaries": p.boundaries,
            }
            for p in self.partitions.values()
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "PartitionCatalog":
        parts = [
            RangePartition(r["relation"], r["attribute"], r["kind"], r["boundaries"])
            for r in records
        ]
        return cls.build(parts)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionCatalog":
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return cls.from_records(records)


def whole_domain_partition(relation: str, attribute: str, kind: str, low, high) -> RangePartition:
    """Single range covering the whole declared domain (for unsketched relations)."""
    return RangePartition(relation, attribute, kind, [low, high])


# --------------------------------------------------------------------------
# Annotated relations / deltas (tuples paired with sketches)
# --------------------------------------------------------------------------


class AnnotatedRelation:
    """Bag of (row, sketch) pairs."""

    __slots__ = ("schema", "entries")

    def __init__(self, schema: Schema, entries: dict[tuple[tuple, Sketch], int] | None = None):
        self.schema = schema
        self.entries: dict[tuple[tuple, Sketch], int] = dict(entries) if entries else {}

    def add(self, row, sketch: Sketch, mult: int = 1) -> None:
        if mult <= 0:
            raise ValueError("multiplicity must be positive")
        key = (row, sketch)
        self.entries[key] = self.entries.get(key, 0) + mult

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return (
            isinstance(other, AnnotatedRelation)
            and self.schema.columns == other.schema.columns
            and self.entries == other.entries
        )

    def total(self) -> int:
        return sum(self.entries.values())


class AnnotatedDelta:
    """Bag of tagged (row, sketch) pairs."""

    __slots__ = ("schema", "entries")

    def __init__(self, schema: Schema, entries: dict[tuple[int, tuple, Sketch], int] | None = None):
        self.schema = schema
        self.entries: dict[tuple[int, tuple, Sketch], int] = dict(entries) if entries else {}

    def add(self, tag: int, row, sketch: Sketch, mult: int = 1) -> None:
        if tag not in (INSERT, DELETE):
            raise ValueError("bad tag")
        if mult <= 0:
            raise ValueError("multiplicity must be positive")
        key = (tag, row, sketch)
        self.entries[key] = self.entries.get(key, 0) + mult

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def __bool__(self):
        return bool(self.entries)

    def __eq__(self, other):
        return (
            isinstance(other, AnnotatedDelta)
            and self.schema.columns == other.schema.columns
            and self.entries == other.entries
        )

    def total(self) -> int:
        return sum(self.entries.values())

    def inserts_first(self):
        """Entries with all inserts before all deletes.

        Stateful consumers apply batches in this order: delta algebra may pair
        a delete against an insert from the same batch, so counters can dip
        below zero transiently under other orders even though the net result
        is non-negative.
        """
        for key, mult in self.entries.items():
            if key[0] == INSERT:
                yield key, mult
        for key, mult in self.entries.items():
            if key[0] == DELETE:
                yield key, mult
