"""Small float-vector helpers with pinned accumulation behaviour.

Scoring paths that must produce identical floats regardless of how candidate
rows were gathered (full matrix, cluster slice, cross-shard gather) all funnel
through ``dot_rows``: float32 inputs widened to float64 (exact), multiplied
elementwise (exact), and accumulated per row by numpy's pairwise sum, which
depends only on each row's contents.
"""

from __future__ import annotations

import numpy as np


def dot_rows(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Per-row dot products of a float32 matrix against a float32 vector.

    Returns float64 scores. Each row is reduced independently, so the same
    (row, vec) pair yields the same score no matter which matrix the row was
    sliced from.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float32)).astype(np.float64)
    vec = np.asarray(vec, dtype=np.float32).astype(np.float64)
    return np.sum(rows * vec, axis=1)


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Unit-normalize rows; all-zero rows are left untouched."""
    matrix = np.asarray(matrix, dtype=np.float32)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (matrix / norms).astype(np.float32)
