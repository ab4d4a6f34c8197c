"""Seed derivation and block-parallel replication.

Replications are grouped into fixed-size blocks. Block ``j`` of an experiment
draws from a ``SeedSequence`` keyed by ``(master_seed, j)``, so the random
numbers seen by replication ``r`` depend only on the master seed, ``r`` and the
block size, never on the thread count or on scheduling. Results are always
gathered in block order.
"""

from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, Sequence, TypeVar, Union

import numpy as np

T = TypeVar("T")

SeedLike = Union[int, np.random.SeedSequence]

BLOCK_SIZE = 4096
THREADS_ENV = "NLRENEWAL_THREADS"

_threads: int | None = None


def default_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def set_threads(n: int | None) -> None:
    global _threads
    _threads = None if n is None else max(1, int(n))


@contextlib.contextmanager
def threads(n: int | None) -> Iterator[None]:
    global _threads
    saved = _threads
    set_threads(n)
    try:
        yield
    finally:
        _threads = saved


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (bool, np.bool_)) or int(seed) < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.SeedSequence(int(seed))


def child(seed: SeedLike, *keys: int) -> np.random.SeedSequence:
    """Child sequence addressed by ``keys``; pure function of its inputs.

    Unlike ``SeedSequence.spawn`` this does not mutate the parent, so the
    same child can be re-derived any number of times.
    """
    ss = as_seed_sequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in keys))


def derive_seed(seed: SeedLike, *keys: int) -> int:
    """Integer seed for a sub-experiment, e.g. one point of a boundary grid."""
    state = child(seed, *keys).generate_state(2, np.uint64)
    return int(state[0]) << 64 | int(state[1])


def generator(seed: SeedLike) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(as_seed_sequence(seed)))


def block_layout(reps: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """``(block_index, n_rows)`` pairs covering ``reps`` replications."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    out = []
    start = 0
    j = 0
    while start < reps:
        rows = min(block_size, reps - start)
        out.append((j, rows))
        start += rows
        j += 1
    return out


def map_blocks(
    fn: Callable[[np.random.SeedSequence, int], T],
    reps: int,
    seed: SeedLike,
    block_size: int = BLOCK_SIZE,
    n_threads: int | None = None,
) -> list[T]:
    """Run ``fn(block_seed, n_rows)`` over all blocks; results in block order."""
    layout = block_layout(reps, block_size)
    tasks = [(child(seed, j), rows) for j, rows in layout]
    n_threads = default_threads() if n_threads is None else n_threads
    if n_threads <= 1 or len(tasks) == 1:
        return [fn(ss, rows) for ss, rows in tasks]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda t: fn(*t), tasks))


def concat(parts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    keys = parts[0].keys()
    return {k: np.concatenate([p[k] for p in parts]) for k in keys}
