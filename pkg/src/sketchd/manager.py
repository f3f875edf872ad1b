"""Sketch registry and middleware logic.

Keeps one entry per query template: the concrete plan, the current sketch,
the version it is valid for, and the incremental engine state. Incoming
queries either reuse an entry (maintaining it first when stale) or trigger a
fresh capture; answers always come from evaluating the query instrumented
with per-scan range filters derived from the sketch.

Maintenance is serialized per entry; distinct entries can be driven from
different threads. An answered query never sees a sketch older than the
version it is evaluated against.
"""

from __future__ import annotations

import json
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from .algebra import BagRelation, DeltaDatabase
from .engine import EngineOptions, EngineState, init_state
from .errors import CorruptSnapshot, EmptySketch, RecaptureRequired
from .eval import evaluate
from .optimize import plan_pushdown
from .partitions import PartitionCatalog, sketch_apply_delta
from .plans import (
    Aggregate,
    And,
    Attr,
    Cmp,
    Const,
    Join,
    Merge,
    Or,
    Plan,
    Project,
    Select,
    TableAccess,
    TopK,
    base_relations,
    plan_from_json,
    plan_to_json,
    strip_merge,
    template_key,
)


def _range_filter_pred(catalog: PartitionCatalog, relation: str, sketch: int):
    """Disjunction of merged range conditions on the partition attribute."""
    part = catalog.partition_for(relation)
    base, count = catalog.relation_block(relation)
    runs = []
    run_start = None
    for i in range(count + 1):
        present = i < count and bool(sketch >> (base + i) & 1)
        if present and run_start is None:
            run_start = i
        elif not present and run_start is not None:
            runs.append((run_start, i - 1))
            run_start = None
    if not runs:
        raise EmptySketch(f"sketch holds no fragment of relation {relation!r}")
    attr = Attr(part.attribute)
    kind = part.kind
    terms = []
    for first, last in runs:
        low = part.boundaries[first]
        lo_cmp = Cmp(">=", attr, Const(low, kind))
        if kind == "f64" and last != count - 1:
            # interior float ranges are half-open at the top
            hi_cmp = Cmp("<", attr, Const(part.boundaries[last + 1], kind))
        else:
            high = part.boundaries[last + 1]
            if kind == "i64" and last != count - 1:
                high = high - 1
            hi_cmp = Cmp("<=", attr, Const(high, kind))
        terms.append(And((lo_cmp, hi_cmp)))
    return terms[0] if len(terms) == 1 else Or(tuple(terms))


def instrument_query(plan: Plan, sketch: int, catalog: PartitionCatalog) -> Plan:
    """Insert a range filter directly above every base-table scan.

    Raises EmptySketch when the sketch holds nothing for some relation the
    plan reads: the query then provably has empty provenance.
    """
    plan = strip_merge(plan)

    def rewrite(node: Plan) -> Plan:
        if isinstance(node, TableAccess):
            return Select(node, _range_filter_pred(catalog, node.relation, sketch))
        if isinstance(node, Select):
            return Select(rewrite(node.input), node.predicate)
        if isinstance(node, Project):
            return Project(rewrite(node.input), node.items)
        if isinstance(node, Join):
            return Join(rewrite(node.left), rewrite(node.right), node.predicate)
        if isinstance(node, Aggregate):
            return Aggregate(rewrite(node.input), node.group_by, node.aggs)
        if isinstance(node, TopK):
            return TopK(rewrite(node.input), node.k, node.order)
        raise TypeError(f"not a plan node: {node!r}")

    return rewrite(plan)


def evaluate_at(store, plan: Plan, version: int) -> BagRelation:
    """Evaluate a Merge-free plan against a store snapshot (columnar if possible)."""
    from .vectorized import try_vec_eval

    result = try_vec_eval(plan, store, version)
    if result is not None:
        return result
    db = {rel: store.scan(rel, version) for rel in base_relations(plan)}
    return evaluate(plan, db)


@dataclass
class SketchEntry:
    """One registry slot: template key, concrete plan, sketch, engine state."""

    key: str
    plan: Plan  # Merge-rooted maintenance plan
    sketch: int
    version: int
    state: EngineState | None
    history: list[tuple[int, int]] = field(default_factory=list)  # (version, sketch)
    recaptures: int = 0
    snapshot_path: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class SketchManager:
    def __init__(
        self,
        store,
        catalog: PartitionCatalog,
        *,
        strategy: str = "lazy",
        batch_size: int = 50,
        reuse: str = "exact",
        pushdown: bool = True,
        state_dir: str | None = None,
        cache_entries: int | None = None,
        options: EngineOptions | None = None,
    ):
        if strategy not in ("lazy", "eager"):
            raise ValueError("strategy must be lazy or eager")
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.store = store
        self.catalog = catalog
        self.strategy = strategy
        self.batch_size = batch_size
        self.reuse = reuse
        self.pushdown = pushdown
        self.state_dir = state_dir
        self.cache_entries = cache_entries
        self.options = options or EngineOptions()
        self.entries: OrderedDict[str, SketchEntry] = OrderedDict()
        self._registry_lock = threading.Lock()
        self._pending_rows = 0
        self._pending_relations: set[str] = set()

    # -- registry -----------------------------------------------------------

    def _key(self, plan: Plan) -> str:
        return template_key(plan, self.reuse)

    def lookup(self, plan: Plan) -> SketchEntry | None:
        with self._registry_lock:
            entry = self.entries.get(self._key(plan))
            if entry is not None:
                self.entries.move_to_end(entry.key)
            return entry

    def capture(self, plan: Plan) -> SketchEntry:
        """Run the capture query now and register (or refresh) the entry."""
        mplan = plan if isinstance(plan, Merge) else Merge(strip_merge(plan))
        key = self._key(mplan)
        with self._registry_lock:
            entry = self.entries.get(key)
            if entry is None:
                entry = SketchEntry(key, mplan, 0, -1, None)
                self.entries[key] = entry
        with entry.lock:
            version = self.store.version
            state, sketch = init_state(mplan, self.store, self.catalog, version, self.options)
            entry.state = state
            entry.sketch = sketch
            entry.version = version
            entry.history.append((version, sketch))
        self._enforce_cache_cap(keep=entry.key)
        return entry

    # -- updates -------------------------------------------------------------

    def on_update(self, batch: DeltaDatabase) -> int:
        """Commit a batch; under eager maintenance, maintain affected entries
        once enough delta rows accumulated."""
        version = self.store.commit_delta(batch)
        if self.strategy == "eager":
            self._pending_rows += sum(d.total() for d in batch.values())
            self._pending_relations |= set(batch)
            if self._pending_rows >= self.batch_size:
                touched = set(self._pending_relations)
                self._pending_rows = 0
                self._pending_relations = set()
                with self._registry_lock:
                    entries = list(self.entries.values())
                for entry in entries:
                    if base_relations(entry.plan) & touched:
                        with entry.lock:
                            self._bring_current(entry)
        return version

    # -- queries -------------------------------------------------------------

    def answer_query(self, plan: Plan) -> BagRelation:
        """Maintain (or capture) the matching sketch, then answer through it."""
        plan = strip_merge(plan)
        entry = self.lookup(plan)
        if entry is None or entry.state is None and entry.snapshot_path is None and entry.version < 0:
            entry = self.capture(plan)
        with entry.lock:
            self._bring_current(entry)
            sketch = entry.sketch
            version = entry.version
        try:
            instrumented = instrument_query(plan, sketch, self.catalog)
        except EmptySketch:
            # provably empty provenance: the answer over the empty instance
            schemas = self.store.schemas()
            empty = {rel: BagRelation(schemas[rel]) for rel in base_relations(plan)}
            return evaluate(plan, empty)
        return evaluate_at(self.store, instrumented, version)

    # -- maintenance ----------------------------------------------------------

    def _bring_current(self, entry: SketchEntry) -> None:
        target = self.store.version
        if entry.version >= target:
            return
        if entry.state is None:
            self._restore_evicted(entry)
        pushed = plan_pushdown(entry.plan) if self.pushdown else None
        annotated = {}
        for rel in sorted(base_relations(entry.plan)):
            pred = pushed.for_relation(rel) if pushed is not None else None
            delta = self.store.extract_delta(rel, entry.version, target, pred)
            if delta:
                annotated[rel] = self.catalog.annotate_delta(delta)
        try:
            sketch_delta = entry.state.process_delta(annotated, new_version=target)
            entry.sketch = sketch_apply_delta(entry.sketch, sketch_delta)
        except RecaptureRequired:
            entry.state.version = target
            entry.sketch = entry.state.rebuild()
            entry.recaptures += 1
        entry.version = target
        entry.history.append((target, entry.sketch))

    # -- persistence ------------------------------------------------------------

    def persist_entry(self, entry: SketchEntry, path: str | None = None) -> str:
        if path is None:
            if self.state_dir is None:
                raise ValueError("no state directory configured")
            os.makedirs(self.state_dir, exist_ok=True)
            path = os.path.join(self.state_dir, f"{entry.key}.json")
        blob = entry_to_dict(entry, self.catalog)
        with open(path, "w") as fh:
            fh.write(json.dumps(blob, sort_keys=True, separators=(",", ":")))
        entry.snapshot_path = path
        return path

    def restore_entry(self, path: str) -> SketchEntry:
        entry = restore_entry(path, self.store, self.options)
        with self._registry_lock:
            self.entries[entry.key] = entry
        return entry

    def _restore_evicted(self, entry: SketchEntry) -> None:
        if entry.snapshot_path is None:
            raise CorruptSnapshot("entry has neither live state nor a snapshot")
        restored = restore_entry(entry.snapshot_path, self.store, self.options)
        entry.state = restored.state

    def _enforce_cache_cap(self, keep: str) -> None:
        if self.cache_entries is None:
            return
        with self._registry_lock:
            live = [e for e in self.entries.values() if e.state is not None]
            excess = len(live) - self.cache_entries
            if excess <= 0:
                return
            for key in list(self.entries):
                if excess <= 0:
                    break
                entry = self.entries[key]
                if key == keep or entry.state is None:
                    continue
                self.persist_entry(entry)
                entry.state = None
                excess -= 1


# --------------------------------------------------------------------------
# Snapshot format
# --------------------------------------------------------------------------

SNAPSHOT_FORMAT = 1


def entry_to_dict(entry: SketchEntry, catalog: PartitionCatalog) -> dict:
    if entry.state is None:
        raise ValueError("cannot persist an evicted entry")
    return {
        "format": SNAPSHOT_FORMAT,
        "key": entry.key,
        "plan": plan_to_json(entry.plan),
        "catalog": catalog.to_records(),
        "sketch": format(entry.sketch, "x"),
        "version": entry.version,
        "recaptures": entry.recaptures,
        "history": [[v, format(s, "x")] for v, s in entry.history],
        "state": entry.state.to_dict(),
    }


def restore_entry(path: str, store, options: EngineOptions | None = None) -> SketchEntry:
    try:
        with open(path) as fh:
            blob = json.load(fh)
        if blob.get("format") != SNAPSHOT_FORMAT:
            raise CorruptSnapshot(f"unsupported snapshot format {blob.get('format')!r}")
        plan = plan_from_json(blob["plan"])
        catalog = PartitionCatalog.from_records(blob["catalog"])
        state = EngineState(plan, store, catalog, blob["version"], options or EngineOptions())
        state.load_dict(blob["state"])
        entry = SketchEntry(
            key=blob["key"],
            plan=plan,
            sketch=int(blob["sketch"], 16),
            version=blob["version"],
            state=state,
            history=[(v, int(s, 16)) for v, s in blob["history"]],
            recaptures=blob["recaptures"],
            snapshot_path=path,
        )
        return entry
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, CorruptSnapshot):
            raise
        raise CorruptSnapshot(f"cannot restore snapshot {path!r}: {exc}") from exc
