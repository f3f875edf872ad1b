"""Randomized correctness properties over the generated scenario corpus."""

from __future__ import annotations

import pytest

from sketchd.engine import EngineOptions, init_state
from sketchd.errors import EmptySketch, RecaptureRequired
from sketchd.eval import (
    annotated_apply_delta,
    evaluate,
    evaluate_annotated,
    tuples_in,
)
from sketchd.manager import instrument_query
from sketchd.optimize import plan_pushdown
from sketchd.partitions import sketch_apply_delta
from sketchd.plans import base_relations, strip_merge

from .corpus import Case, make_case

SEEDS = range(60)


def run_maintenance(case: Case, options: EngineOptions | None = None):
    """Capture, commit the delta, process it; returns all the artifacts."""
    store = case.build_store()
    state, sketch0 = init_state(case.plan, store, case.catalog, 0, options)
    version = store.commit_delta(case.delta)
    annotated = {}
    for rel in sorted(base_relations(case.plan)):
        delta = store.extract_delta(rel, 0, version)
        if delta:
            annotated[rel] = case.catalog.annotate_delta(delta)
    trace: list = []
    sketch_delta = state.process_delta(annotated, new_version=version, trace=trace)
    maintained = sketch_apply_delta(sketch0, sketch_delta)
    return store, state, sketch0, maintained, dict(trace)


@pytest.mark.parametrize("seed", SEEDS)
def test_incremental_equals_recapture(seed):
    case = make_case(seed)
    store, state, _, maintained, _ = run_maintenance(case)
    assert maintained == state.sketch()
    _, accurate = init_state(case.plan, store, case.catalog, store.version)
    assert maintained == accurate


@pytest.mark.parametrize("seed", SEEDS)
def test_tuple_and_fragment_correctness(seed):
    case = make_case(seed)
    plain = strip_merge(case.plan)
    store, state, _, maintained, trace = run_maintenance(case)

    db0 = {rel: case.build_store().scan(rel, 0) for rel in base_relations(plain)}
    db1 = {rel: store.scan(rel, store.version) for rel in base_relations(plain)}
    expected = evaluate(plain, db1)

    # tuple correctness at the node below the merge root
    before = evaluate_annotated(plain, case.catalog.annotate_database(db0))
    updated = annotated_apply_delta(before, trace[(0,)])
    assert tuples_in(updated) == expected

    # fragment correctness: the maintained sketch's instance answers the query
    instance = case.catalog.sketch_instance(maintained, db1)
    assert evaluate(plain, instance) == expected

    # and so does the instrumented query over the full database; an empty
    # sketch proves the answer is empty
    try:
        instrumented = instrument_query(plain, maintained, case.catalog)
        assert evaluate(instrumented, db1) == expected
    except EmptySketch:
        assert not expected.rows


@pytest.mark.parametrize("seed", SEEDS)
def test_batching_equivalence(seed):
    case = make_case(seed)
    _, one_batch_state, _, one_batch_sketch, _ = run_maintenance(case)

    store = case.build_store()
    state, sketch = init_state(case.plan, store, case.catalog, 0)
    from sketchd.algebra import DeltaRelation

    for name in sorted(case.delta):
        for (tag, row), mult in list(case.delta[name].entries.items()):
            for _ in range(mult):
                single = DeltaRelation(case.delta[name].schema)
                single.add(tag, row, 1)
                version = store.commit_delta({name: single})
                annotated = {name: case.catalog.annotate_delta(store.extract_delta(name, version - 1, version))}
                sketch_delta = state.process_delta(annotated, new_version=version)
                sketch = sketch_apply_delta(sketch, sketch_delta)
    assert sketch == one_batch_sketch
    assert state.state_digest() == one_batch_state.state_digest()


@pytest.mark.parametrize("seed", SEEDS)
def test_optimizations_do_not_change_the_sketch(seed):
    case = make_case(seed)
    _, _, _, plain_sketch, _ = run_maintenance(case)

    # bloom + pushdown + roomy bounded buffers: same sketch
    options = EngineOptions(bloom=True, topk_buffer=10_000, minmax_buffer=10_000)
    store = case.build_store()
    state, sketch0 = init_state(case.plan, store, case.catalog, 0, options)
    version = store.commit_delta(case.delta)
    pushed = plan_pushdown(case.plan)
    annotated = {}
    for rel in sorted(base_relations(case.plan)):
        delta = store.extract_delta(rel, 0, version, pushed.for_relation(rel))
        if delta:
            annotated[rel] = case.catalog.annotate_delta(delta)
    sketch_delta = state.process_delta(annotated, new_version=version)
    assert sketch_apply_delta(sketch0, sketch_delta) == plain_sketch


@pytest.mark.parametrize("seed", SEEDS)
def test_tight_buffers_recapture_to_accuracy(seed):
    case = make_case(seed)
    options = EngineOptions(topk_buffer=None, minmax_buffer=1)
    store = case.build_store()
    state, sketch = init_state(case.plan, store, case.catalog, 0, options)
    version = store.commit_delta(case.delta)
    annotated = {}
    for rel in sorted(base_relations(case.plan)):
        delta = store.extract_delta(rel, 0, version)
        if delta:
            annotated[rel] = case.catalog.annotate_delta(delta)
    try:
        sketch_delta = state.process_delta(annotated, new_version=version)
        maintained = sketch_apply_delta(sketch, sketch_delta)
    except RecaptureRequired:
        state.version = version
        maintained = state.rebuild()
    _, accurate = init_state(case.plan, store, case.catalog, version)
    assert maintained & accurate == accurate  # superset


@pytest.mark.parametrize("seed", range(20))
def test_merge_and_group_invariants(seed):
    case = make_case(seed)
    store, state, _, _, _ = run_maintenance(case)
    assert (state.merge.counts >= 0).all()
    for path, node_state in state.node_states.items():
        if isinstance(node_state, dict):
            for key, group in node_state.items():
                assert group.cnt > 0
                assert all(c > 0 for c in group.frag_counts.values())
                expect = 0
                for f in group.frag_counts:
                    expect |= 1 << f
                assert group.sketch == expect
