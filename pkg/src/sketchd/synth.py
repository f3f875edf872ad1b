"""Synthetic table generator for the benchmark workloads.

Tables carry a key column `id`, a group-control column `a` (every value in
[0, groups) appears at least once for rows >= groups), and nine further
columns b..j that are linear functions of `a` plus Gaussian noise. With zero
noise the correlated columns are exact multiples of `a`, which keeps float
aggregates exactly representable.
"""

from __future__ import annotations

import csv

import numpy as np

from .algebra import FLOAT, INT, Schema

CORRELATED = ("b", "c", "d", "e", "f", "g", "h", "i", "j")
_COEFFS = {name: 2 + 3 * i for i, name in enumerate(CORRELATED)}

SYNTH_SCHEMA = Schema(
    "synthetic",
    (("id", INT), ("a", INT)) + tuple((name, FLOAT) for name in CORRELATED),
)


def generate_columns(rows: int, groups: int, seed: int, noise: float = 0.0) -> dict[str, np.ndarray]:
    """Deterministic column arrays for one synthetic table."""
    if rows < 1 or groups < 1:
        raise ValueError("rows and groups must be >= 1")
    rng = np.random.default_rng(seed)
    ids = np.arange(rows, dtype=np.int64)
    if rows >= groups:
        head = np.arange(groups, dtype=np.int64)
        tail = rng.integers(0, groups, rows - groups)
        a = np.concatenate([head, tail])
        rng.shuffle(a)
    else:
        a = rng.integers(0, groups, rows)
    cols: dict[str, np.ndarray] = {"id": ids, "a": a.astype(np.int64)}
    base = a.astype(np.float64)
    for name in CORRELATED:
        col = _COEFFS[name] * base
        if noise > 0.0:
            col = col + rng.normal(0.0, noise, rows)
        cols[name] = col
    return cols


def schema_with_name(name: str) -> Schema:
    return Schema(name, SYNTH_SCHEMA.columns)


def write_csv(cols: dict[str, np.ndarray], path) -> None:
    names = [n for n, _ in SYNTH_SCHEMA.columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{n}:{k}" for n, k in SYNTH_SCHEMA.columns])
        for row in zip(*(cols[n].tolist() for n in names)):
            writer.writerow(row)


def delta_rows(rows: int, groups: int, seed: int, noise: float = 0.0, id_start: int = 0) -> list[tuple]:
    """Fresh rows for update batches, in the synthetic schema."""
    cols = generate_columns(rows, groups, seed, noise)
    ids = (cols["id"] + id_start).tolist()
    names = [n for n, _ in SYNTH_SCHEMA.columns[1:]]
    rest = [cols[n].tolist() for n in names]
    return [tuple([i, *vals]) for i, *vals in zip(ids, *rest)]
