"""sketchd: incremental maintenance of range-based provenance sketches.

An in-memory engine that captures per-query fragment sketches over range
partitions, keeps them current under inserts/deletes through incremental
operator rules, and uses them to skip irrelevant data when answering queries.
"""

from .algebra import (
    DELETE,
    FLOAT,
    INSERT,
    INT,
    STR,
    BagRelation,
    Database,
    DeltaDatabase,
    DeltaRelation,
    Schema,
    apply_delta,
    diff,
)
from .engine import EngineOptions, EngineState, init_state
from .errors import SketchdError
from .eval import evaluate, evaluate_annotated, frags_in, tuples_in
from .manager import SketchManager, instrument_query
from .partitions import (
    AnnotatedDelta,
    AnnotatedRelation,
    PartitionCatalog,
    Range,
    RangePartition,
    SketchDelta,
    sketch_apply_delta,
    sketch_from_frags,
)
from .store import TableStore

__version__ = "0.1.0"

__all__ = [
    "DELETE",
    "FLOAT",
    "INSERT",
    "INT",
    "STR",
    "AnnotatedDelta",
    "AnnotatedRelation",
    "BagRelation",
    "Database",
    "DeltaDatabase",
    "DeltaRelation",
    "EngineOptions",
    "EngineState",
    "PartitionCatalog",
    "Range",
    "RangePartition",
    "Schema",
    "SketchDelta",
    "SketchManager",
    "SketchdError",
    "TableStore",
    "apply_delta",
    "diff",
    "evaluate",
    "evaluate_annotated",
    "frags_in",
    "init_state",
    "instrument_query",
    "sketch_apply_delta",
    "sketch_from_frags",
    "tuples_in",
]
