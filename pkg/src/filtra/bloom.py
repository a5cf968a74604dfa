"""Transposed bloom-signature index for feature filtering.

Every item gets an M-bit signature; bit p is set when some feature pair of the
item hashes to p. The index stores the signature matrix transposed: plane p is
one packed bit vector over all slots, so testing a query bit against 64 items
costs a single 64-bit AND. A filter leaf is evaluated by ANDing the K planes
its hash positions select; items with all bits present match (with a tunable
false-positive rate, never false negatives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitset

HASH_SCHEME_FNV1A_SPLITMIX = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class BloomParams:
    """Signature width M, hash count K, and the pinned hash recipe tag."""

    m_bits: int = 1024
    k_hashes: int = 5
    hash_scheme_id: int = HASH_SCHEME_FNV1A_SPLITMIX

    def __post_init__(self):
        if self.m_bits < 1 or self.k_hashes < 1:
            raise ValueError("m_bits and k_hashes must be >= 1")
        if self.hash_scheme_id != HASH_SCHEME_FNV1A_SPLITMIX:
            raise ValueError(f"unknown hash_scheme_id {self.hash_scheme_id}")


@dataclass(frozen=True)
class QueryBloom:
    """Sorted, deduplicated hash positions of one (feature, value) leaf."""

    set_bits: tuple[int, ...]


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


def _splitmix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _U64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _U64
    return (z ^ (z >> 31)) & _U64


_GAMMA = 0x9E3779B97F4A7C15  # SplitMix64 stream increment


def hash_seed(feature_id: int, value: int) -> int:
    """Pair seed, independent of M and K: 64-bit FNV-1a of the 16-byte
    little-endian ``feature_id‖value``."""
    return _fnv1a64(feature_id.to_bytes(8, "little") + value.to_bytes(8, "little"))


def positions_from_seed(seed: int, params: BloomParams) -> tuple[int, ...]:
    """K independent positions: ``SplitMix64(seed xor i*GAMMA) mod M``.

    Each index gets its own mixed 64-bit hash, so no single insertion can
    shadow another pair's full position set mod M (a failure mode of
    double-hashing variants, where all positions are a function of two mod-M
    residues and whole-signature collisions at rate ~2/M^2 swamp the
    theoretical false-positive rate for M >= 512). Collisions dedupe, so a
    leaf may select fewer than K planes.
    """
    m = params.m_bits
    return tuple(sorted({_splitmix64(seed ^ (i * _GAMMA & _U64)) % m
                         for i in range(params.k_hashes)}))


def hash_positions(feature_id: int, value: int, params: BloomParams) -> QueryBloom:
    """Bit positions selected by one (feature, value) leaf."""
    return QueryBloom(set_bits=positions_from_seed(hash_seed(feature_id, value), params))


class BloomIndex:
    """M transposed bit planes over the slot space.

    ``planes`` has shape (M, ceil(n_slots/64)); plane p, word w covers slots
    [64w, 64w+64). Padding slots are all-zero in every plane.
    """

    def __init__(self, params: BloomParams, planes: np.ndarray, n_slots: int):
        self.params = params
        self.planes = planes
        self.n_slots = n_slots

    @property
    def plane_bytes(self) -> int:
        return int(self.planes.nbytes)

    def signature(self, slot: int) -> np.ndarray:
        """The M-bit signature of one slot, as a boolean column (debug aid)."""
        word = slot >> 6
        bit = np.uint64(slot & 63)
        return ((self.planes[:, word] >> bit) & np.uint64(1)).astype(bool)


def build_bloom(slot_features: list[list[tuple[int, int]]], params: BloomParams,
                n_slots: int | None = None) -> BloomIndex:
    """Populate planes from per-slot feature pairs (slot order is the caller's).

    Pass the permuted feature lists when co-building with an IVF layout, or
    catalog order for a standalone index. Hash seeds are cached per distinct
    pair, which matters when feature cardinalities are small.
    """
    if n_slots is None:
        n_slots = len(slot_features)
    if len(slot_features) > n_slots:
        raise ValueError("more feature lists than slots")
    nw = bitset.n_words(n_slots)
    planes = np.zeros((params.m_bits, nw), dtype=np.uint64)

    pos_cache: dict[tuple[int, int], tuple[int, ...]] = {}
    plane_idx: list[int] = []
    slot_idx: list[int] = []
    for slot, pairs in enumerate(slot_features):
        for pair in pairs:
            positions = pos_cache.get(pair)
            if positions is None:
                positions = hash_positions(pair[0], pair[1], params).set_bits
                pos_cache[pair] = positions
            plane_idx.extend(positions)
            slot_idx.extend([slot] * len(positions))
    if plane_idx:
        p = np.asarray(plane_idx, dtype=np.int64)
        s = np.asarray(slot_idx, dtype=np.int64)
        np.bitwise_or.at(planes, (p, s >> 6), np.uint64(1) << (s & 63).astype(np.uint64))
    return BloomIndex(params=params, planes=planes, n_slots=n_slots)


@dataclass
class FilterStats:
    """Work counters for the filtering stage (test and bench hook).

    ``words_read`` counts plane words touched (per leaf); ``slots_evaluated``
    counts slot positions a full filter evaluation covered, once per
    evaluation regardless of leaf count.
    """

    words_read: int = 0
    slots_evaluated: int = 0


def bloom_eval_leaf(index: BloomIndex, qb: QueryBloom,
                    out: np.ndarray | None = None,
                    word_range: tuple[int, int] | None = None,
                    stats: FilterStats | None = None) -> np.ndarray:
    """AND the planes selected by a leaf's hash bits over a word range.

    Reads exactly ``len(qb.set_bits) * (w1 - w0)`` words. An empty leaf (no
    positions) degenerates to all-ones; the caller's validity AND restricts it
    to real slots. ``out``, when given, is reused as the result buffer.
    """
    w0, w1 = word_range if word_range is not None else (0, index.planes.shape[1])
    width = w1 - w0
    if out is None:
        out = np.empty(width, dtype=np.uint64)
    if not qb.set_bits:
        out[:] = np.uint64(0xFFFFFFFFFFFFFFFF)
        return out
    rows = index.planes[list(qb.set_bits), w0:w1]
    np.bitwise_and.reduce(rows, axis=0, out=out)
    if stats is not None:
        stats.words_read += len(qb.set_bits) * width
    return out


def bloom_fpr_theoretical(params: BloomParams, n_inserted: int) -> float:
    """Closed-form per-leaf false positive rate: (1 - (1 - 1/M)^(K n))^K."""
    m, k = params.m_bits, params.k_hashes
    return float((1.0 - (1.0 - 1.0 / m) ** (k * n_inserted)) ** k)


def heuristic_bits(max_feature_values: int, k_hashes: int, collision_buffer: int = 3) -> int:
    """Rule-of-thumb signature width: max values per item x K x safety buffer."""
    return max_feature_values * k_hashes * collision_buffer
