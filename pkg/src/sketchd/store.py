"""Embedded versioned table store.

Plays the backend-database role: committed base data in columnar chunks, an
append-only delta log per table keyed by monotone version ids, snapshot scans,
net-delta extraction between versions, and join offload for delta-vs-table
evaluation.

Snapshot reads of committed versions are lock-free; commits go through a
single writer lock. Readers never observe a partially applied commit because
a commit appends log entries first and publishes the new version id last.
"""

from __future__ import annotations

import csv
import threading
from collections import Counter

import numpy as np

from .algebra import (
    DELETE,
    FLOAT,
    INSERT,
    INT,
    BagRelation,
    Database,
    DeltaDatabase,
    DeltaRelation,
    Schema,
    net_delta,
)
from .errors import (
    AlreadyCommitted,
    DuplicateName,
    IllFormedDelta,
    UnknownRelation,
    UnknownVersion,
)
from .eval import _equi_keys
from .partitions import AnnotatedDelta, PartitionCatalog
from .plans import Pred, compile_pred

DEFAULT_CHUNK_ROWS = 4096

_DTYPES = {INT: np.int64, FLOAT: np.float64}


def _column_arrays(schema: Schema, rows: list) -> dict[str, np.ndarray]:
    cols: dict[str, np.ndarray] = {}
    for idx, (name, kind) in enumerate(schema.columns):
        values = [row[idx] for row in rows]
        if kind in _DTYPES:
            cols[name] = np.array(values, dtype=_DTYPES[kind])
        else:
            cols[name] = np.array(values, dtype=object)
    return cols


class VersionedTable:
    """Base rows in columnar chunks plus an append-only tagged delta log."""

    def __init__(self, schema: Schema, chunk_rows: int = DEFAULT_CHUNK_ROWS):
        self.schema = schema
        self.chunk_rows = chunk_rows
        self.chunks: list[dict[str, np.ndarray]] = []
        self.base_rows = 0
        self.log: list[tuple[int, int, tuple, int]] = []  # (version, tag, row, mult)
        self._live: Counter | None = None  # lazy current-state counter
        self._columns_cache: tuple[int, dict[str, np.ndarray]] | None = None

    def load_base(self, rows) -> None:
        if self.base_rows or self.log:
            raise AlreadyCommitted(f"table {self.schema.name!r} already holds data")
        buf: list[tuple] = []
        for row in rows:
            buf.append(row)
            if len(buf) == self.chunk_rows:
                self.chunks.append(_column_arrays(self.schema, buf))
                self.base_rows += len(buf)
                buf = []
        if buf:
            self.chunks.append(_column_arrays(self.schema, buf))
            self.base_rows += len(buf)
        self._columns_cache = None

    def load_base_columns(self, columns: dict[str, np.ndarray]) -> None:
        """Bulk load from column arrays (one virtual chunk, rows have mult 1)."""
        if self.base_rows or self.log:
            raise AlreadyCommitted(f"table {self.schema.name!r} already holds data")
        names = self.schema.attribute_names
        sizes = {len(columns[n]) for n in names}
        if len(sizes) > 1:
            raise ValueError("ragged column arrays")
        n = sizes.pop() if sizes else 0
        for start in range(0, n, self.chunk_rows):
            stop = min(start + self.chunk_rows, n)
            self.chunks.append({name: np.asarray(columns[name])[start:stop] for name in names})
        self.base_rows = n
        self._columns_cache = None

    # -- current-state bookkeeping -------------------------------------------

    def _build_live(self) -> Counter:
        live: Counter = Counter()
        for chunk in self.chunks:
            names = self.schema.attribute_names
            arrays = [chunk[n] for n in names]
            for row in zip(*(a.tolist() for a in arrays)):
                live[row] += 1
        for _, tag, row, mult in self.log:
            live[row] += mult if tag == INSERT else -mult
        return +live

    def live_counts(self) -> Counter:
        if self._live is None:
            self._live = self._build_live()
        return self._live

    def append_log(self, version: int, delta: DeltaRelation) -> None:
        for (tag, row), mult in sorted(delta.entries.items(), key=lambda kv: repr(kv[0])):
            self.log.append((version, tag, row, mult))
            if self._live is not None:
                self._live[row] += mult if tag == INSERT else -mult
        if self._live is not None:
            self._live = +self._live

    def has_deletes_upto(self, version: int) -> bool:
        return any(tag == DELETE and v <= version for v, tag, _, _ in self.log)

    # -- snapshots ------------------------------------------------------------

    def rows_at(self, version: int) -> Counter:
        counts: Counter = Counter()
        names = self.schema.attribute_names
        for chunk in self.chunks:
            arrays = [chunk[n] for n in names]
            for row in zip(*(a.tolist() for a in arrays)):
                counts[row] += 1
        for v, tag, row, mult in self.log:
            if v <= version:
                counts[row] += mult if tag == INSERT else -mult
        return +counts

    def columns_at(self, version: int) -> dict[str, np.ndarray]:
        """Columnar snapshot; rows all carry multiplicity one by construction."""
        cached = self._columns_cache
        if cached is not None and cached[0] == version:
            return cached[1]
        names = self.schema.attribute_names
        if self.has_deletes_upto(version):
            counts = self.rows_at(version)
            rows: list[tuple] = []
            for row, mult in counts.items():
                rows.extend([row] * mult)
            cols = _column_arrays(self.schema, rows)
        else:
            extra: list[tuple] = []
            for v, tag, row, mult in self.log:
                if v <= version:
                    extra.extend([row] * mult)
            parts = list(self.chunks)
            if extra:
                parts.append(_column_arrays(self.schema, extra))
            if not parts:
                cols = _column_arrays(self.schema, [])
            elif len(parts) == 1:
                cols = parts[0]
            else:
                cols = {n: np.concatenate([p[n] for p in parts]) for n in names}
        self._columns_cache = (version, cols)
        return cols


class TableStore:
    """Named versioned tables sharing one monotone version counter.

    Version 0 is the initial bulk load; every commit (even an empty one) bumps
    the version. Commits are atomic across the tables named in one batch.
    """

    def __init__(self, chunk_rows: int = DEFAULT_CHUNK_ROWS):
        self.tables: dict[str, VersionedTable] = {}
        self.version = 0
        self.chunk_rows = chunk_rows
        self._write_lock = threading.Lock()

    # -- setup -----------------------------------------------------------------

    def create_table(self, schema: Schema) -> VersionedTable:
        if schema.name in self.tables:
            raise DuplicateName(f"table {schema.name!r} already exists")
        table = VersionedTable(schema, self.chunk_rows)
        self.tables[schema.name] = table
        return table

    def load_rows(self, name: str, rows) -> None:
        if self.version != 0:
            raise AlreadyCommitted("bulk load is only allowed before the first commit")
        self._table(name).load_base(rows)

    def load_columns(self, name: str, columns: dict[str, np.ndarray]) -> None:
        if self.version != 0:
            raise AlreadyCommitted("bulk load is only allowed before the first commit")
        self._table(name).load_base_columns(columns)

    def load_csv(self, name: str, path) -> None:
        from .algebra import read_csv

        rel = read_csv(path, name)
        if name not in self.tables:
            self.create_table(rel.schema)
        rows: list[tuple] = []
        for row, mult in rel.rows.items():
            rows.extend([row] * mult)
        self.load_rows(name, rows)

    def _table(self, name: str) -> VersionedTable:
        table = self.tables.get(name)
        if table is None:
            raise UnknownRelation(name)
        return table

    def schema(self, name: str) -> Schema:
        return self._table(name).schema

    def schemas(self) -> dict[str, Schema]:
        return {name: t.schema for name, t in self.tables.items()}

    # -- commits ----------------------------------------------------------------

    def commit_delta(self, batch: DeltaDatabase) -> int:
        """Append a well-formed tagged batch; returns the new version id."""
        with self._write_lock:
            for name, delta in batch.items():
                table = self._table(name)
                if any(True for _ in delta.deletes()):
                    live = table.live_counts()
                    for row, mult in delta.deletes():
                        if live.get(row, 0) < mult:
                            raise IllFormedDelta(
                                f"{name}: delete of {row!r}^{mult} exceeds multiplicity {live.get(row, 0)}"
                            )
            new_version = self.version + 1
            for name, delta in batch.items():
                self._table(name).append_log(new_version, delta)
            self.version = new_version
            return new_version

    # -- reads -------------------------------------------------------------------

    def _check_version(self, version: int) -> None:
        if not (0 <= version <= self.version):
            raise UnknownVersion(f"version {version} not in [0, {self.version}]")

    def scan(self, relation: str, version: int) -> BagRelation:
        self._check_version(version)
        table = self._table(relation)
        if version == self.version:
            counts = table.live_counts()
        else:
            counts = table.rows_at(version)
        return BagRelation(table.schema, dict(counts))

    def columns(self, relation: str, version: int) -> dict[str, np.ndarray]:
        self._check_version(version)
        return self._table(relation).columns_at(version)

    def database_at(self, version: int) -> Database:
        return {name: self.scan(name, version) for name in self.tables}

    def extract_delta(
        self,
        relation: str,
        from_version: int,
        to_version: int,
        pushed_predicate: Pred | None = None,
    ) -> DeltaRelation:
        """Net tagged delta between two versions, optionally pre-filtered.

        The predicate filter is only sound when the consuming plan has a
        stateless subtree under the corresponding selection; the caller
        asserts that (see optimize.plan_pushdown).
        """
        self._check_version(to_version)
        if from_version > to_version:
            raise UnknownVersion("from_version must be <= to_version")
        table = self._table(relation)
        entries = (
            (tag, row, mult)
            for v, tag, row, mult in table.log
            if from_version < v <= to_version
        )
        delta = net_delta(entries, table.schema)
        if pushed_predicate is not None:
            fn = compile_pred(pushed_predicate, table.schema)
            filtered = DeltaRelation(table.schema)
            for (tag, row), mult in delta:
                if fn(row):
                    filtered.add(tag, row, mult)
            return filtered
        return delta

    # -- join offload ---------------------------------------------------------

    def join_delta_with_table(
        self,
        delta: AnnotatedDelta,
        relation: str,
        side: str,
        at: int,
        predicate: Pred,
        catalog: PartitionCatalog,
        bloom=None,
    ) -> AnnotatedDelta:
        """Join an annotated delta against the annotated snapshot of a table.

        `side` names where the delta sits: "left" evaluates delta x table,
        "right" evaluates table x delta. Delta tags propagate, sketches union,
        multiplicities multiply. Equality predicates take a hash path; other
        predicates fall back to a nested scan.
        """
        if side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")
        table_schema = self.schema(relation)
        delta_schema = delta.schema
        if side == "left":
            joined_schema = Schema("", delta_schema.columns + table_schema.columns)
            left_schema, right_schema = delta_schema, table_schema
        else:
            joined_schema = Schema("", table_schema.columns + delta_schema.columns)
            left_schema, right_schema = table_schema, delta_schema
        out = AnnotatedDelta(joined_schema)

        if bloom is not None:
            keys = _equi_keys(predicate, left_schema, right_schema)
            if keys is not None:
                dpos = keys[0] if side == "left" else keys[1]
                if len(dpos) == 1:
                    filtered = {
                        entry: mult
                        for entry, mult in delta.entries.items()
                        if bloom.may_contain(entry[1][dpos[0]])
                    }
                    delta = AnnotatedDelta(delta_schema, filtered)
        if not delta:
            return out  # nothing survived: skip the table scan entirely

        part = catalog.partition_for(relation)
        pos = table_schema.position(part.attribute)
        base = catalog.relation_block(relation)[0]
        snapshot = self.scan(relation, at)

        keys = _equi_keys(predicate, left_schema, right_schema)
        if keys is not None:
            lpos, rpos, residual = keys
            res_fn = compile_pred(residual, joined_schema) if residual else None
            tpos, dpos = (rpos, lpos) if side == "left" else (lpos, rpos)
            index: dict = {}
            for trow, tmult in snapshot.rows.items():
                sketch = 1 << (base + part.fragment_of(trow[pos]))
                index.setdefault(tuple(trow[p] for p in tpos), []).append((trow, sketch, tmult))
            for (tag, drow, dsketch), dmult in delta:
                for trow, tsketch, tmult in index.get(tuple(drow[p] for p in dpos), ()):
                    joined = drow + trow if side == "left" else trow + drow
                    if res_fn is None or res_fn(joined):
                        out.add(tag, joined, dsketch | tsketch, dmult * tmult)
        else:
            pred_fn = compile_pred(predicate, joined_schema)
            for (tag, drow, dsketch), dmult in delta:
                for trow, tmult in snapshot.rows.items():
                    joined = drow + trow if side == "left" else trow + drow
                    if pred_fn(joined):
                        sketch = 1 << (base + part.fragment_of(trow[pos]))
                        out.add(tag, joined, dsketch | sketch, dmult * tmult)
        return out

    # -- export -----------------------------------------------------------------

    def export_delta_log(self, relation: str, path) -> None:
        """Delta log as CSV with columns (version, tag, multiplicity, row...)."""
        table = self._table(relation)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["version:i64", "tag:str", "multiplicity:i64"]
            header += [f"{n}:{k}" for n, k in table.schema.columns]
            writer.writerow(header)
            for version, tag, row, mult in table.log:
                writer.writerow([version, "+" if tag == INSERT else "-", mult, *row])
