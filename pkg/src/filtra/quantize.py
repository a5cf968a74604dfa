"""Global min/max Int8 quantization and exact integer dot products.

One affine map covers the whole embedding matrix: the global min and max are
scaled onto [-128, 127] and every cell (and every query) is quantized with the
same parameters, so integer scores stay rank-meaningful. Rounding is
half-to-even so independent implementations agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRange, LengthMismatch


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters shared by items and queries."""

    global_min: float
    global_max: float

    @property
    def scale(self) -> float:
        return 255.0 / (self.global_max - self.global_min)

    @property
    def step(self) -> float:
        """Width of one quantization bucket."""
        return (self.global_max - self.global_min) / 255.0


@dataclass(frozen=True)
class QuantizedMatrix:
    data: np.ndarray  # int8, (n_rows, dim)
    params: QuantParams


def compute_quant_params(matrix: np.ndarray) -> QuantParams:
    """Scan all cells for the global min and max.

    Raises DegenerateRange when every cell holds the same value (or the span
    is too small for a finite scale); callers may substitute an all-zero
    quantized matrix with scale 1 in that case.
    """
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        raise DegenerateRange("empty matrix")
    lo = float(matrix.min())
    hi = float(matrix.max())
    if lo == hi or not np.isfinite(255.0 / (hi - lo)):
        raise DegenerateRange(f"cells span degenerate range [{lo}, {hi}]")
    return QuantParams(global_min=lo, global_max=hi)


def quantize_value(x: float, params: QuantParams) -> int:
    """Quantize one float: round-half-to-even, then clamp to [-128, 127]."""
    q = np.rint((float(x) - params.global_min) * params.scale) - 128.0
    return int(min(127.0, max(-128.0, q)))


def quantize_matrix(matrix: np.ndarray, params: QuantParams) -> QuantizedMatrix:
    """Quantize a float matrix; identical per-cell math to ``quantize_value``."""
    m = np.asarray(matrix, dtype=np.float64)
    q = np.rint((m - params.global_min) * params.scale) - 128.0
    np.clip(q, -128.0, 127.0, out=q)
    return QuantizedMatrix(data=q.astype(np.int8), params=params)


def quantize_vector(vec: np.ndarray, params: QuantParams) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    q = np.rint((v - params.global_min) * params.scale) - 128.0
    np.clip(q, -128.0, 127.0, out=q)
    return q.astype(np.int8)


def dequantize(q: np.ndarray | int, params: QuantParams) -> np.ndarray | float:
    """Map int8 codes back to bucket-center floats (within half a step)."""
    return (np.asarray(q, dtype=np.float64) + 128.0) / params.scale + params.global_min


def int8_dot(a: np.ndarray, b: np.ndarray) -> int:
    """Exact Σ a_i b_i in 32-bit integer arithmetic.

    Accumulation is exact for dim <= 65536 (|a_i b_i| <= 128^2, sum < 2^31).
    """
    a = np.asarray(a, dtype=np.int8)
    b = np.asarray(b, dtype=np.int8)
    if a.shape != b.shape:
        raise LengthMismatch(a.size, b.size)
    return int(np.dot(a.astype(np.int32), b.astype(np.int32)))


def int8_dot_rows(rows: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Exact int32 dot of each int8 row against an int8 vector."""
    rows = np.asarray(rows, dtype=np.int8)
    vec = np.asarray(vec, dtype=np.int8)
    if rows.shape[-1] != vec.shape[0]:
        raise LengthMismatch(rows.shape[-1], vec.shape[0])
    return rows.astype(np.int32) @ vec.astype(np.int32)
