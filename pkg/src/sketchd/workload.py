"""Workload replay and mode comparison.

A workload file is structured text: one JSON record per line, executed in
order (operation order defines database versions). The same workload can be
replayed in three modes:

  ns   answer queries by plain evaluation, no sketches
  fm   keep sketches but rebuild them from scratch whenever stale
  imp  incremental maintenance through the sketch manager

All three must produce identical result checksums; the runner records one
report row per operation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    DELETE,
    INSERT,
    STR,
    BagRelation,
    DeltaRelation,
    Schema,
    read_csv,
)
from .engine import EngineOptions, init_state
from .errors import EmptySketch, MismatchedWorkloads, WorkloadError
from .manager import SketchManager, evaluate_at, instrument_query
from .partitions import (
    PartitionCatalog,
    RangePartition,
    equi_depth_boundaries,
    sketch_size,
)
from .plans import Merge, Plan, base_relations, plan_from_json, strip_merge
from .store import TableStore
from . import synth

MODES = ("ns", "fm", "imp")

_WIDE_INT = 2**62
_WIDE_FLOAT = 1e18

REPORT_HEADER = [
    "index",
    "kind",
    "mode",
    "wall_us",
    "delta_rows",
    "sketch_frags",
    "recaptures",
    "checksum",
]


@dataclass
class ReportRow:
    index: int
    kind: str
    mode: str
    wall_us: int
    delta_rows: int = 0
    sketch_frags: int = 0
    recaptures: int = 0
    checksum: str = ""


@dataclass
class RunReport:
    mode: str
    rows: list[ReportRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_HEADER)
            for r in self.rows:
                writer.writerow(
                    [r.index, r.kind, r.mode, r.wall_us, r.delta_rows, r.sketch_frags, r.recaptures, r.checksum]
                )

    @classmethod
    def read_csv(cls, path) -> "RunReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != REPORT_HEADER:
                raise MismatchedWorkloads(f"{path}: unexpected report header")
            rows = []
            mode = ""
            for cells in reader:
                row = ReportRow(
                    int(cells[0]), cells[1], cells[2], int(cells[3]),
                    int(cells[4]), int(cells[5]), int(cells[6]), cells[7],
                )
                mode = row.mode
                rows.append(row)
        return cls(mode, rows)


def result_checksum(rel: BagRelation) -> str:
    entries = sorted((repr(row), mult) for row, mult in rel.rows.items())
    blob = json.dumps(entries, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Workload files
# --------------------------------------------------------------------------

_KNOWN_OPS = (
    "create_table",
    "load",
    "declare_partition",
    "register_query",
    "update",
    "query",
    "checkpoint",
)


def load_workload(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise WorkloadError(f"bad JSON ({exc.msg})", lineno) from exc
            if not isinstance(record, dict) or record.get("op") not in _KNOWN_OPS:
                raise WorkloadError(f"unknown operation {record.get('op')!r}", lineno)
            record["_line"] = lineno
            records.append(record)
    return records


def mixed_workload_records(
    table: str,
    query_name: str,
    operations: int,
    updates_per_query: tuple[int, int] = (1, 1),
    delta_rows: int = 20,
    groups: int = 50,
    seed: int = 0,
) -> list[dict]:
    """Alternating update/query records at a fixed update:query ratio."""
    n_up, n_q = updates_per_query
    records = []
    cycle = [
        {"op": "update", "generator": {"table": table, "rows": delta_rows, "groups": groups, "kind": "insert"}}
    ] * n_up + [{"op": "query", "name": query_name}] * n_q
    i = 0
    while len(records) < operations:
        record = dict(cycle[i % len(cycle)])
        if record["op"] == "update":
            record = json.loads(json.dumps(record))
            record["generator"]["seed"] = seed + len(records)
        records.append(record)
        i += 1
    return records[:operations]


# --------------------------------------------------------------------------
# Runner
# --------------------------------------------------------------------------


class _FullMaintenanceRegistry:
    """Sketch registry that rebuilds any stale entry from scratch before use."""

    def __init__(self, store: TableStore, catalog: PartitionCatalog, options: EngineOptions):
        self.store = store
        self.catalog = catalog
        self.options = options
        self.entries: dict[str, tuple[int, int]] = {}  # name -> (sketch, version)
        self.recaptures = 0

    def answer(self, name: str, plan: Plan) -> BagRelation:
        entry = self.entries.get(name)
        if entry is None or entry[1] < self.store.version:
            mplan = Merge(strip_merge(plan))
            _, sketch = init_state(mplan, self.store, self.catalog, self.store.version, self.options)
            entry = (sketch, self.store.version)
            self.entries[name] = entry
            self.recaptures += 1
        sketch, version = entry
        try:
            instrumented = instrument_query(plan, sketch, self.catalog)
        except EmptySketch:
            schemas = self.store.schemas()
            empty = {rel: BagRelation(schemas[rel]) for rel in base_relations(plan)}
            from .eval import evaluate

            return evaluate(strip_merge(plan), empty)
        return evaluate_at(self.store, instrumented, version)

    def sketch_for(self, name: str) -> int:
        entry = self.entries.get(name)
        return entry[0] if entry else 0


class WorkloadRunner:
    def __init__(
        self,
        records: list[dict],
        mode: str,
        *,
        base_dir: str = ".",
        default_fragments: int = 128,
        strategy: str = "lazy",
        batch_size: int = 50,
        reuse: str = "exact",
        bloom: bool = True,
        pushdown: bool = True,
        bloom_fpr: float = 0.01,
        topk_buffer: int | None = None,
        minmax_buffer: int | None = None,
        state_dir: str | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.records = records
        self.mode = mode
        self.base_dir = base_dir
        self.default_fragments = default_fragments
        self.store = TableStore()
        self.queries: dict[str, Plan] = {}
        self.partition_specs: list[dict] = []
        self.catalog: PartitionCatalog | None = None
        self.manager: SketchManager | None = None
        self.fm: _FullMaintenanceRegistry | None = None
        self.options = EngineOptions(
            bloom=bloom, bloom_fpr=bloom_fpr, topk_buffer=topk_buffer, minmax_buffer=minmax_buffer
        )
        self._manager_kwargs = dict(
            strategy=strategy,
            batch_size=batch_size,
            reuse=reuse,
            pushdown=pushdown,
            state_dir=state_dir,
        )
        self._gen_id_base: dict[str, int] = {}

    # -- catalog construction ------------------------------------------------

    def _ensure_catalog(self):
        if self.catalog is not None:
            return
        declared = {spec["relation"]: spec for spec in self.partition_specs}
        parts = []
        for name, table in self.store.tables.items():
            spec = declared.get(name)
            if spec is not None:
                attribute = spec["attribute"]
                kind = table.schema.kind_of(attribute)
                if "boundaries" in spec:
                    bounds = spec["boundaries"]
                else:
                    pos = table.schema.position(attribute)
                    values = [row[pos] for row, mult in self.store.scan(name, self.store.version).rows.items()]
                    lo, hi = _wide_domain(kind, values)
                    bounds = equi_depth_boundaries(
                        values, spec.get("fragments", self.default_fragments), lo, hi
                    )
            else:
                attribute, kind = table.schema.columns[0]
                for cand, ckind in table.schema.columns:
                    if ckind != STR:
                        attribute, kind = cand, ckind
                        break
                pos = table.schema.position(attribute)
                values = [row[pos] for row, _ in self.store.scan(name, self.store.version).rows.items()]
                lo, hi = _wide_domain(kind, values)
                bounds = [lo, hi]
            parts.append(RangePartition(name, attribute, kind, bounds))
        self.catalog = PartitionCatalog.build(parts)
        if self.mode == "imp":
            self.manager = SketchManager(
                self.store, self.catalog, options=self.options, **self._manager_kwargs
            )
        elif self.mode == "fm":
            self.fm = _FullMaintenanceRegistry(self.store, self.catalog, self.options)

    # -- record execution ------------------------------------------------------

    def run(self) -> RunReport:
        report = RunReport(self.mode)
        for index, record in enumerate(self.records):
            kind = record["op"]
            row = ReportRow(index, kind, self.mode, 0)
            start = time.perf_counter_ns()
            try:
                self._execute(record, row)
            except WorkloadError:
                raise
            except Exception as exc:
                raise WorkloadError(f"{kind}: {exc}", record.get("_line")) from exc
            row.wall_us = (time.perf_counter_ns() - start) // 1000
            report.rows.append(row)
        return report

    def _execute(self, record: dict, row: ReportRow) -> None:
        op = record["op"]
        if op == "create_table":
            schema = Schema(record["name"], tuple((n, k) for n, k in record["columns"]))
            self.store.create_table(schema)
        elif op == "load":
            self._load(record)
        elif op == "declare_partition":
            if self.catalog is not None:
                raise WorkloadError("partitions must be declared before the first query", record.get("_line"))
            self.partition_specs.append(record)
        elif op == "register_query":
            self.queries[record["name"]] = plan_from_json(record["plan"])
        elif op == "update":
            row.delta_rows = self._update(record)
        elif op == "query":
            self._query(record, row)
        elif op == "checkpoint":
            pass

    def _load(self, record: dict) -> None:
        table = record["table"]
        if "path" in record:
            import os

            path = record["path"]
            if not os.path.isabs(path):
                path = os.path.join(self.base_dir, path)
            if table in self.store.tables:
                rel = read_csv(path, table)
                rows = []
                for r, mult in rel.rows.items():
                    rows.extend([r] * mult)
                self.store.load_rows(table, rows)
            else:
                self.store.load_csv(table, path)
        elif "rows" in record:
            self.store.load_rows(table, [tuple(r) for r in record["rows"]])
        elif "generator" in record:
            spec = record["generator"]
            cols = synth.generate_columns(
                spec["rows"], spec.get("groups", 50), spec.get("seed", 0), spec.get("noise", 0.0)
            )
            if table not in self.store.tables:
                self.store.create_table(synth.schema_with_name(table))
            self.store.load_columns(table, cols)
            self._gen_id_base[table] = spec["rows"]
        else:
            raise WorkloadError("load needs path, rows, or generator", record.get("_line"))

    def _update(self, record: dict) -> int:
        self._ensure_catalog()
        batch: dict[str, DeltaRelation] = {}
        if "generator" in record:
            spec = record["generator"]
            table = spec["table"]
            delta = DeltaRelation(self.store.schema(table))
            kind = spec.get("kind", "insert")
            if kind == "insert":
                base = self._gen_id_base.get(table, 0)
                rows = synth.delta_rows(
                    spec["rows"], spec.get("groups", 50), spec.get("seed", 0),
                    spec.get("noise", 0.0), id_start=base,
                )
                self._gen_id_base[table] = base + spec["rows"]
                for r in rows:
                    delta.add(INSERT, r)
            elif kind == "delete":
                live = self.store.tables[table].live_counts()
                rng = np.random.default_rng(spec.get("seed", 0))
                rows = list(live)
                take = min(spec["rows"], len(rows))
                for idx in rng.choice(len(rows), size=take, replace=False):
                    delta.add(DELETE, rows[int(idx)])
            else:
                raise WorkloadError(f"unknown generator kind {kind!r}", record.get("_line"))
            batch[table] = delta
        else:
            table = record["table"]
            delta = DeltaRelation(self.store.schema(table))
            for r in record.get("insert", []):
                delta.add(INSERT, tuple(r))
            for r in record.get("delete", []):
                delta.add(DELETE, tuple(r))
            batch[table] = delta
        total = sum(d.total() for d in batch.values())
        if self.mode == "imp":
            self.manager.on_update(batch)
        else:
            self.store.commit_delta(batch)
        return total

    def _query(self, record: dict, row: ReportRow) -> None:
        self._ensure_catalog()
        name = record["name"]
        plan = self.queries.get(name)
        if plan is None:
            raise WorkloadError(f"query {name!r} is not registered", record.get("_line"))
        if self.mode == "ns":
            result = evaluate_at(self.store, plan, self.store.version)
        elif self.mode == "fm":
            before = self.fm.recaptures
            result = self.fm.answer(name, plan)
            row.recaptures = self.fm.recaptures - before
            row.sketch_frags = sketch_size(self.fm.sketch_for(name))
        else:
            entry = self.manager.lookup(plan)
            before = entry.recaptures if entry else 0
            result = self.manager.answer_query(plan)
            entry = self.manager.lookup(plan)
            row.recaptures = (entry.recaptures - before) if entry else 0
            row.sketch_frags = sketch_size(entry.sketch) if entry else 0
        row.checksum = result_checksum(result)


def _wide_domain(kind: str, values) -> tuple:
    if kind == "i64":
        return -_WIDE_INT, _WIDE_INT
    if kind == "f64":
        return -_WIDE_FLOAT, _WIDE_FLOAT
    if values:
        lo = min(values)
    else:
        lo = ""
    return min("", lo), "\U0010ffff"


def run_workload(records_or_path, mode: str, **flags) -> RunReport:
    if isinstance(records_or_path, (str, bytes)) or hasattr(records_or_path, "__fspath__"):
        import os

        records = load_workload(records_or_path)
        flags.setdefault("base_dir", os.path.dirname(os.fspath(records_or_path)) or ".")
    else:
        records = records_or_path
    return WorkloadRunner(records, mode, **flags).run()


# --------------------------------------------------------------------------
# Mode comparison
# --------------------------------------------------------------------------

SUMMARY_HEADER = ["index", "delta_rows", "ns_us", "fm_us", "imp_us", "imp_fm_ratio"]


def compare_modes(reports: list[RunReport]):
    """Cross-check checksums and summarize query timings per delta size.

    Returns (summary_rows, crossover) where crossover is the interpolated
    delta size at which the imp/fm time ratio crosses 1.0, or None when it
    never does inside the measured range.
    """
    if not reports:
        raise MismatchedWorkloads("no reports given")
    shapes = [[(r.index, r.kind) for r in rep.rows] for rep in reports]
    if any(shape != shapes[0] for shape in shapes[1:]):
        raise MismatchedWorkloads("reports describe different workloads")
    by_mode = {rep.mode: rep for rep in reports}
    if len(by_mode) != len(reports):
        raise MismatchedWorkloads("duplicate modes in comparison")

    first = reports[0]
    for i, row in enumerate(first.rows):
        if row.kind != "query":
            continue
        sums = {rep.rows[i].checksum for rep in reports}
        if len(sums) != 1:
            raise MismatchedWorkloads(
                f"result checksum mismatch at operation {row.index}: {sums}"
            )

    summary = []
    pending_delta = 0
    for i, row in enumerate(first.rows):
        if row.kind == "update":
            pending_delta += row.delta_rows
        elif row.kind == "query":
            entry = {
                "index": row.index,
                "delta_rows": pending_delta,
                "ns_us": by_mode["ns"].rows[i].wall_us if "ns" in by_mode else "",
                "fm_us": by_mode["fm"].rows[i].wall_us if "fm" in by_mode else "",
                "imp_us": by_mode["imp"].rows[i].wall_us if "imp" in by_mode else "",
            }
            if "fm" in by_mode and "imp" in by_mode and entry["fm_us"]:
                entry["imp_fm_ratio"] = entry["imp_us"] / entry["fm_us"]
            else:
                entry["imp_fm_ratio"] = ""
            summary.append(entry)
            pending_delta = 0

    crossover = None
    measured = [
        (e["delta_rows"], e["imp_fm_ratio"]) for e in summary if e["imp_fm_ratio"] != ""
    ]
    measured.sort()
    for (d1, r1), (d2, r2) in zip(measured, measured[1:]):
        if r1 < 1.0 <= r2:
            crossover = d1 + (1.0 - r1) * (d2 - d1) / (r2 - r1)
            break
    return summary, crossover


def write_summary_csv(summary, crossover, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for e in summary:
            writer.writerow([e[h] for h in SUMMARY_HEADER])
        writer.writerow(["break_even_delta_rows", crossover if crossover is not None else "", "", "", "", ""])
