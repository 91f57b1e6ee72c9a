"""Small numeric helpers shared by the feature modules."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def run_chunked(fn, total: int, chunk: int, workers: int = 0) -> None:
    """Call ``fn(start)`` for every chunk start in ``range(0, total, chunk)``.

    Chunk boundaries depend only on ``total`` and ``chunk``, never on
    ``workers``, so outputs assembled per chunk are bit-identical for any
    worker count.
    """
    starts = list(range(0, total, chunk))
    if workers and workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fn, starts))
    else:
        for start in starts:
            fn(start)
