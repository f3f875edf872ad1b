"""Core bag-relational data model: schemas, relations, deltas, and databases.

Relations are bags: a mapping from a row tuple to a positive multiplicity.
Deltas are bags of tagged rows (insert/delete). All operations here are pure;
callers never observe partially updated inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import IllFormedDelta, KindMismatch, SchemaMismatch, UnknownRelation

INT = "i64"
FLOAT = "f64"
STR = "str"
KINDS = (INT, FLOAT, STR)

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

# Delta tags. Values chosen so `tag * mult` is a signed contribution.
INSERT = 1
DELETE = -1

Row = tuple


@dataclass(frozen=True)
class Schema:
    """Named, ordered list of (attribute, kind) columns."""

    name: str
    columns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = [c[0] for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaMismatch(f"duplicate attribute names in schema {self.name!r}")
        for _, kind in self.columns:
            if kind not in KINDS:
                raise KindMismatch(f"unknown kind {kind!r} in schema {self.name!r}")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(c[0] for c in self.columns)

    def position(self, attr: str) -> int:
        for i, (name, _) in enumerate(self.columns):
            if name == attr:
                return i
        raise SchemaMismatch(f"schema {self.name!r} has no attribute {attr!r}")

    def kind_of(self, attr: str) -> str:
        return self.columns[self.position(attr)][1]

    def arity(self) -> int:
        return len(self.columns)


def check_value(value, kind: str) -> None:
    if kind == INT:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == FLOAT:
        ok = isinstance(value, float)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise KindMismatch(f"value {value!r} is not of kind {kind}")


class BagRelation:
    """A bag of rows over a fixed schema.

    Rows are stored consolidated: one entry per distinct tuple with its total
    multiplicity (always >= 1).
    """

    __slots__ = ("schema", "rows")

    def __init__(self, schema: Schema, rows: dict[Row, int] | None = None):
        self.schema = schema
        self.rows: dict[Row, int] = {}
        if rows:
            for row, mult in rows.items():
                self.add(row, mult)

    @classmethod
    def from_rows(cls, schema: Schema, rows: Iterable[Row]) -> "BagRelation":
        rel = cls(schema)
        for row in rows:
            rel.add(row)
        return rel

    def add(self, row: Row, mult: int = 1) -> None:
        if mult <= 0:
            raise ValueError("multiplicity must be positive")
        self.rows[row] = self.rows.get(row, 0) + mult

    def total(self) -> int:
        """Number of rows counting multiplicities."""
        return sum(self.rows.values())

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[tuple[Row, int]]:
        return iter(self.rows.items())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BagRelation)
            and self.schema.columns == other.schema.columns
            and self.rows == other.rows
        )

    def __repr__(self) -> str:
        return f"BagRelation({self.schema.name!r}, {self.total()} rows, {len(self.rows)} distinct)"

    def copy(self) -> "BagRelation":
        out = BagRelation(self.schema)
        out.rows = dict(self.rows)
        return out


class DeltaRelation:
    """A bag of tagged rows describing a change to one relation."""

    __slots__ = ("schema", "entries")

    def __init__(self, schema: Schema, entries: dict[tuple[int, Row], int] | None = None):
        self.schema = schema
        self.entries: dict[tuple[int, Row], int] = {}
        if entries:
            for (tag, row), mult in entries.items():
                self.add(tag, row, mult)

    def add(self, tag: int, row: Row, mult: int = 1) -> None:
        if tag not in (INSERT, DELETE):
            raise ValueError("tag must be INSERT or DELETE")
        if mult <= 0:
            raise ValueError("multiplicity must be positive")
        key = (tag, row)
        self.entries[key] = self.entries.get(key, 0) + mult

    def inserts(self) -> Iterator[tuple[Row, int]]:
        for (tag, row), mult in self.entries.items():
            if tag == INSERT:
                yield row, mult

    def deletes(self) -> Iterator[tuple[Row, int]]:
        for (tag, row), mult in self.entries.items():
            if tag == DELETE:
                yield row, mult

    def total(self) -> int:
        return sum(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[tuple[int, Row], int]]:
        return iter(self.entries.items())

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DeltaRelation)
            and self.schema.columns == other.schema.columns
            and self.entries == other.entries
        )

    def __repr__(self) -> str:
        return f"DeltaRelation({self.schema.name!r}, {self.total()} tagged rows)"


Database = dict[str, BagRelation]
DeltaDatabase = dict[str, DeltaRelation]


def delta_well_formed(db: Database, delta: DeltaDatabase) -> bool:
    """True when every delete removes at most the multiplicity present in `db`."""
    for name, drel in delta.items():
        rel = db.get(name)
        if rel is None:
            return False
        for row, mult in drel.deletes():
            if rel.rows.get(row, 0) < mult:
                return False
    return True


def apply_delta(db: Database, delta: DeltaDatabase) -> Database:
    """Apply a tagged delta to a database, multiplicity-aware.

    Raises IllFormedDelta when a delete exceeds the available multiplicity.
    """
    out: Database = {name: rel.copy() for name, rel in db.items()}
    for name, drel in delta.items():
        rel = out.get(name)
        if rel is None:
            raise UnknownRelation(name)
        for row, mult in drel.deletes():
            have = rel.rows.get(row, 0)
            if have < mult:
                raise IllFormedDelta(f"delete of {row!r}^{mult} exceeds multiplicity {have}")
            if have == mult:
                del rel.rows[row]
            else:
                rel.rows[row] = have - mult
        for row, mult in drel.inserts():
            rel.add(row, mult)
    return out


def diff(d1: Database, d2: Database) -> DeltaDatabase:
    """Symmetric difference of two databases as a tagged delta.

    apply_delta(d1, diff(d1, d2)) == d2.
    """
    if set(d1) != set(d2):
        raise SchemaMismatch("databases name different relations")
    out: DeltaDatabase = {}
    for name in d1:
        r1, r2 = d1[name], d2[name]
        if r1.schema.columns != r2.schema.columns:
            raise SchemaMismatch(f"relation {name!r} has differing schemas")
        drel = DeltaRelation(r1.schema)
        for row in set(r1.rows) | set(r2.rows):
            net = r2.rows.get(row, 0) - r1.rows.get(row, 0)
            if net > 0:
                drel.add(INSERT, row, net)
            elif net < 0:
                drel.add(DELETE, row, -net)
        if drel:
            out[name] = drel
    return out


def net_delta(entries: Iterable[tuple[int, Row, int]], schema: Schema) -> DeltaRelation:
    """Collapse a stream of tagged rows into a net delta (insert/delete cancellation)."""
    acc: dict[Row, int] = {}
    for tag, row, mult in entries:
        acc[row] = acc.get(row, 0) + tag * mult
    out = DeltaRelation(schema)
    for row, net in acc.items():
        if net > 0:
            out.add(INSERT, row, net)
        elif net < 0:
            out.add(DELETE, row, -net)
    return out


# ---------------------------------------------------------------------------
# CSV interchange. Header cells are "name:kind"; multiplicities are
# materialized as repeated rows.
# ---------------------------------------------------------------------------


def parse_header(cells: list[str], name: str = "") -> Schema:
    columns = []
    for cell in cells:
        if ":" not in cell:
            raise SchemaMismatch(f"header cell {cell!r} is not name:kind")
        attr, kind = cell.rsplit(":", 1)
        columns.append((attr, kind))
    return Schema(name, tuple(columns))


def _parse_cell(text: str, kind: str):
    if kind == INT:
        return int(text)
    if kind == FLOAT:
        value = float(text)
        if not math.isfinite(value):
            raise KindMismatch(f"non-finite float {text!r}")
        return value
    return text


def read_csv(path, name: str = "") -> BagRelation:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, expected a header row")
        schema = parse_header(header, name)
        kinds = [kind for _, kind in schema.columns]
        rel = BagRelation(schema)
        for cells in reader:
            if not cells:
                continue
            if len(cells) != len(kinds):
                raise SchemaMismatch(f"{path}: row arity {len(cells)} != {len(kinds)}")
            rel.add(tuple(_parse_cell(c, k) for c, k in zip(cells, kinds)))
    return rel


def write_csv(rel: BagRelation, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{attr}:{kind}" for attr, kind in rel.schema.columns])
        for row, mult in sorted(rel.rows.items(), key=lambda kv: repr(kv[0])):
            for _ in range(mult):
                writer.writerow(row)
