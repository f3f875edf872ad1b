"""Hot numeric kernels with two interchangeable backends.

The capture/answer paths scan whole columns; these loops dominate their
runtime. Each kernel exists twice: a numba @njit version and a pure-numpy
version. `SKETCHD_KERNELS=numpy|numba` picks the backend (default: numba when
importable). Both backends accumulate in row order, so float results are
bit-identical across them.

`sketchd bench-kernels` times the two implementations side by side.
"""

from __future__ import annotations

import os

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_SM_C1 = 0x9E3779B97F4A7C15
_SM_C2 = 0xBF58476D1CE4E5B9
_SM_C3 = 0x94D049BB133111EB
_SEED2 = 0xA5A5A5A5A5A5A5A5


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def _np_fragment_lookup(values: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(boundaries, values, side="right") - 1
    return np.minimum(idx, len(boundaries) - 2).astype(np.int64)


def _np_group_sum_f64(gids: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros(n_groups, dtype=np.float64)
    np.add.at(out, gids, values)
    return out


def _np_group_sum_i64(gids: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros(n_groups, dtype=np.int64)
    np.add.at(out, gids, values)
    return out


def _np_group_count(gids: np.ndarray, n_groups: int) -> np.ndarray:
    return np.bincount(gids, minlength=n_groups).astype(np.int64)


def _np_interval_mask(values: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(lows, values, side="right") - 1
    ok = idx >= 0
    safe = np.where(ok, idx, 0)
    return ok & (values <= highs[safe])


def _np_splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(_SM_C1)) & _MASK64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(_SM_C2)) & _MASK64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(_SM_C3)) & _MASK64
    return x ^ (x >> np.uint64(31))


def _np_bloom_fill(keys: np.ndarray, bits: np.ndarray, m: int, h: int) -> None:
    h1 = _np_splitmix(keys)
    h2 = _np_splitmix(keys ^ np.uint64(_SEED2)) | np.uint64(1)
    for i in range(h):
        pos = ((h1 + np.uint64(i) * h2) % np.uint64(m)).astype(np.uint64)
        np.bitwise_or.at(bits, (pos >> np.uint64(6)).astype(np.int64), np.uint64(1) << (pos & np.uint64(63)))


def _np_bloom_query(keys: np.ndarray, bits: np.ndarray, m: int, h: int) -> np.ndarray:
    h1 = _np_splitmix(keys)
    h2 = _np_splitmix(keys ^ np.uint64(_SEED2)) | np.uint64(1)
    out = np.ones(len(keys), dtype=bool)
    for i in range(h):
        pos = ((h1 + np.uint64(i) * h2) % np.uint64(m)).astype(np.uint64)
        word = bits[(pos >> np.uint64(6)).astype(np.int64)]
        out &= (word >> (pos & np.uint64(63))) & np.uint64(1) != 0
    return out


_NUMPY_IMPL = {
    "fragment_lookup": _np_fragment_lookup,
    "group_sum_f64": _np_group_sum_f64,
    "group_sum_i64": _np_group_sum_i64,
    "group_count": _np_group_count,
    "interval_mask": _np_interval_mask,
    "bloom_fill": _np_bloom_fill,
    "bloom_query": _np_bloom_query,
}


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def fragment_lookup(values, boundaries):
        n = len(boundaries)
        out = np.empty(len(values), dtype=np.int64)
        for i in range(len(values)):
            v = values[i]
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                if boundaries[mid] <= v:
                    lo = mid + 1
                else:
                    hi = mid
            idx = lo - 1
            if idx > n - 2:
                idx = n - 2
            out[i] = idx
        return out

    @njit(cache=True)
    def group_sum_f64(gids, values, n_groups):
        out = np.zeros(n_groups, dtype=np.float64)
        for i in range(len(gids)):
            out[gids[i]] += values[i]
        return out

    @njit(cache=True)
    def group_sum_i64(gids, values, n_groups):
        out = np.zeros(n_groups, dtype=np.int64)
        for i in range(len(gids)):
            out[gids[i]] += values[i]
        return out

    @njit(cache=True)
    def group_count(gids, n_groups):
        out = np.zeros(n_groups, dtype=np.int64)
        for i in range(len(gids)):
            out[gids[i]] += 1
        return out

    @njit(cache=True)
    def interval_mask(values, lows, highs):
        n = len(lows)
        out = np.empty(len(values), dtype=np.bool_)
        for i in range(len(values)):
            v = values[i]
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                if lows[mid] <= v:
                    lo = mid + 1
                else:
                    hi = mid
            idx = lo - 1
            out[i] = idx >= 0 and v <= highs[idx]
        return out

    @njit(cache=True)
    def _splitmix(x):
        x = x + np.uint64(_SM_C1)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_SM_C2)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_SM_C3)
        return x ^ (x >> np.uint64(31))

    @njit(cache=True)
    def bloom_fill(keys, bits, m, h):
        for i in range(len(keys)):
            h1 = _splitmix(keys[i])
            h2 = _splitmix(keys[i] ^ np.uint64(_SEED2)) | np.uint64(1)
            for j in range(h):
                pos = (h1 + np.uint64(j) * h2) % np.uint64(m)
                bits[pos >> np.uint64(6)] |= np.uint64(1) << (pos & np.uint64(63))

    @njit(cache=True)
    def bloom_query(keys, bits, m, h):
        out = np.ones(len(keys), dtype=np.bool_)
        for i in range(len(keys)):
            h1 = _splitmix(keys[i])
            h2 = _splitmix(keys[i] ^ np.uint64(_SEED2)) | np.uint64(1)
            for j in range(h):
                pos = (h1 + np.uint64(j) * h2) % np.uint64(m)
                if (bits[pos >> np.uint64(6)] >> (pos & np.uint64(63))) & np.uint64(1) == 0:
                    out[i] = False
                    break
        return out

    return {
        "fragment_lookup": fragment_lookup,
        "group_sum_f64": group_sum_f64,
        "group_sum_i64": group_sum_i64,
        "group_count": group_count,
        "interval_mask": interval_mask,
        "bloom_fill": bloom_fill,
        "bloom_query": bloom_query,
    }


def _select_backend() -> tuple[str, dict]:
    choice = os.environ.get("SKETCHD_KERNELS", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"SKETCHD_KERNELS must be numba or numpy, not {choice!r}")
    if choice != "numpy":
        try:
            return "numba", _build_numba_impl()
        except ImportError:
            if choice == "numba":
                raise
    return "numpy", dict(_NUMPY_IMPL)


_BACKEND_NAME, _IMPL = _select_backend()


def backend() -> str:
    return _BACKEND_NAME


def numpy_impl() -> dict:
    """The reference backend, for agreement checks and benchmarks."""
    return dict(_NUMPY_IMPL)


def numba_impl() -> dict | None:
    try:
        return _build_numba_impl()
    except ImportError:
        return None


def fragment_lookup(values: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Fragment index per value: binary search over partition boundaries."""
    return _IMPL["fragment_lookup"](values, boundaries)


def group_sum(gids: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    if values.dtype == np.int64:
        return _IMPL["group_sum_i64"](gids, values, n_groups)
    return _IMPL["group_sum_f64"](gids, values, n_groups)


def group_count(gids: np.ndarray, n_groups: int) -> np.ndarray:
    return _IMPL["group_count"](gids, n_groups)


def interval_mask(values: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> np.ndarray:
    """Membership of each value in the union of closed intervals [low, high]."""
    return _IMPL["interval_mask"](values, lows, highs)


def bloom_fill(keys: np.ndarray, bits: np.ndarray, m: int, h: int) -> None:
    _IMPL["bloom_fill"](keys, bits, m, h)


def bloom_query(keys: np.ndarray, bits: np.ndarray, m: int, h: int) -> np.ndarray:
    return _IMPL["bloom_query"](keys, bits, m, h)


def keys_to_u64(column: np.ndarray) -> np.ndarray:
    """Reinterpret a numeric column as the uint64 key image the filters hash."""
    if column.dtype == np.int64 or column.dtype == np.float64:
        return column.view(np.uint64)
    return column.astype(np.int64).view(np.uint64)


def warmup() -> None:
    """Force jit compilation so benchmarks measure steady-state times."""
    values = np.array([1, 5, 9], dtype=np.int64)
    bounds = np.array([0, 4, 10], dtype=np.int64)
    fragment_lookup(values, bounds)
    fragment_lookup(values.astype(np.float64), bounds.astype(np.float64))
    gids = np.array([0, 1, 0], dtype=np.int64)
    group_sum(gids, values, 2)
    group_sum(gids, values.astype(np.float64), 2)
    group_count(gids, 2)
    interval_mask(values, np.array([0], dtype=np.int64), np.array([10], dtype=np.int64))
    bits = np.zeros(2, dtype=np.uint64)
    bloom_fill(keys_to_u64(values), bits, 128, 3)
    bloom_query(keys_to_u64(values), bits, 128, 3)
