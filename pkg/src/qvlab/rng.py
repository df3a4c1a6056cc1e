"""Counter-based random substreams.

Every path draws from its own Philox stream keyed by ``(seed, label, path_index)``
through :class:`numpy.random.SeedSequence`. A path's noise therefore never
depends on how paths are split across chunks or worker threads.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

THREADS_ENV = "QVLAB_THREADS"

T = TypeVar("T")


def label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


def substream(seed: int, path_index: int, label: str | int = 0) -> np.random.Generator:
    """Independent generator for one path of one labelled experiment."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(label_key(label), int(path_index)))
    return np.random.Generator(np.random.Philox(ss))


def normal_block(seed: int, start: int, stop: int, n: int,
                 label: str | int = 0) -> np.ndarray:
    """Standard normals for paths ``start..stop-1``, ``n`` draws each."""
    out = np.empty((stop - start, n))
    for row, i in enumerate(range(start, stop)):
        out[row] = substream(seed, i, label).standard_normal(n)
    return out


def worker_count(threads: int | None = None) -> int:
    """Worker hint from the argument or ``QVLAB_THREADS``; never affects results."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "")
        try:
            threads = int(raw) if raw else 1
        except ValueError:
            threads = 1
    return max(1, threads)


def chunk_bounds(n: int, size: int) -> list[tuple[int, int]]:
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def ordered_map(fn: Callable[[tuple[int, int]], T], chunks: Sequence[tuple[int, int]],
                threads: int | None = None) -> list[T]:
    """Map ``fn`` over chunks, returning results in chunk order."""
    workers = worker_count(threads)
    if workers == 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def concat_rows(parts: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts), axis=0)
