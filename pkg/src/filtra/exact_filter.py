"""Exact filter baselines: forward index and inverted index.

Both evaluate any filter expression exactly and serve as correctness oracles
for the bloom path. The forward index keeps per-item feature groups in flat
arrays (values sorted within each (item, feature) group) and evaluates all
items data-parallel; the inverted index is the classical posting-list
approach with set algebra on sorted slot lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitset
from .filter_query import And, FilterExpr, Leaf, Not, Or


@dataclass(eq=False)
class ForwardIndex:
    """Flat grouped layout: one group per (slot, feature_id), values sorted.

    ``feature_ids[g]`` is group g's feature; its values are
    ``feature_values[feature_offsets[g]:feature_offsets[g+1]]``. Groups are
    ordered by slot then feature_id (``item_offsets`` bounds each slot's
    groups). ``value_slot``/``value_fid`` mirror slot and feature per value
    entry for data-parallel leaf evaluation.
    """

    n_slots: int
    feature_ids: np.ndarray      # u64, per group
    feature_offsets: np.ndarray  # i64, per group + 1
    feature_values: np.ndarray   # u64, flat
    item_offsets: np.ndarray     # i64, per slot + 1 (group indices)
    group_slot: np.ndarray       # i64, per group
    value_slot: np.ndarray       # i64, per value entry
    value_fid: np.ndarray        # u64, per value entry


def build_forward(slot_features: list[list[tuple[int, int]]],
                  n_slots: int | None = None) -> ForwardIndex:
    if n_slots is None:
        n_slots = len(slot_features)
    gids: list[int] = []
    goff: list[int] = [0]
    vals: list[int] = []
    ioff: list[int] = [0]
    gslot: list[int] = []
    vslot: list[int] = []
    vfid: list[int] = []
    for slot, pairs in enumerate(slot_features):
        grouped: dict[int, list[int]] = {}
        for fid, val in pairs:
            grouped.setdefault(fid, []).append(val)
        for fid in sorted(grouped):
            values = sorted(set(grouped[fid]))
            gids.append(fid)
            gslot.append(slot)
            vals.extend(values)
            goff.append(len(vals))
            vslot.extend([slot] * len(values))
            vfid.extend([fid] * len(values))
        ioff.append(len(gids))
    ioff.extend([len(gids)] * (n_slots - len(slot_features)))
    return ForwardIndex(
        n_slots=n_slots,
        feature_ids=np.asarray(gids, dtype=np.uint64),
        feature_offsets=np.asarray(goff, dtype=np.int64),
        feature_values=np.asarray(vals, dtype=np.uint64),
        item_offsets=np.asarray(ioff, dtype=np.int64),
        group_slot=np.asarray(gslot, dtype=np.int64),
        value_slot=np.asarray(vslot, dtype=np.int64),
        value_fid=np.asarray(vfid, dtype=np.uint64),
    )


def forward_leaf(fi: ForwardIndex, feature_id: int, value: int) -> np.ndarray:
    """Boolean per-slot membership of one (feature, value) pair, all slots at once."""
    hit = (fi.value_fid == np.uint64(feature_id)) & (fi.feature_values == np.uint64(value))
    out = np.zeros(fi.n_slots, dtype=bool)
    out[fi.value_slot[hit]] = True
    return out


def forward_eval(fi: ForwardIndex, expr: FilterExpr,
                 slot_range: tuple[int, int] | None = None) -> np.ndarray:
    """Exact packed mask for an expression; every slot evaluated independently."""

    def walk(node) -> np.ndarray:
        if isinstance(node, Leaf):
            return forward_leaf(fi, node.feature_id, node.value)
        if isinstance(node, Not):
            return ~walk(node.child)
        if isinstance(node, And):
            acc = walk(node.children[0])
            for c in node.children[1:]:
                acc &= walk(c)
            return acc
        if isinstance(node, Or):
            acc = walk(node.children[0])
            for c in node.children[1:]:
                acc |= walk(c)
            return acc
        raise TypeError(f"not a filter node: {node!r}")

    flags = walk(expr)
    if slot_range is not None:
        keep = np.zeros_like(flags)
        keep[slot_range[0]:slot_range[1]] = True
        flags &= keep
    return bitset.from_bool(flags)


@dataclass(eq=False)
class InvertedIndex:
    """Posting lists: (feature_id, value) -> strictly ascending slot array."""

    n_slots: int
    postings: dict[tuple[int, int], np.ndarray]


def build_inverted(slot_features: list[list[tuple[int, int]]],
                   n_slots: int | None = None) -> InvertedIndex:
    if n_slots is None:
        n_slots = len(slot_features)
    acc: dict[tuple[int, int], list[int]] = {}
    for slot, pairs in enumerate(slot_features):
        for pair in set(pairs):
            acc.setdefault(pair, []).append(slot)
    postings = {pair: np.asarray(sorted(slots), dtype=np.int64)
                for pair, slots in acc.items()}
    return InvertedIndex(n_slots=n_slots, postings=postings)


_EMPTY = np.empty(0, dtype=np.int64)


def inverted_eval(ii: InvertedIndex, expr: FilterExpr,
                  universe: int | None = None) -> np.ndarray:
    """Exact packed mask via sorted-list union/intersection/complement."""
    n = ii.n_slots if universe is None else universe

    def walk(node) -> np.ndarray:
        if isinstance(node, Leaf):
            return ii.postings.get((node.feature_id, node.value), _EMPTY)
        if isinstance(node, Not):
            return np.setdiff1d(np.arange(n, dtype=np.int64), walk(node.child),
                                assume_unique=True)
        if isinstance(node, And):
            acc = walk(node.children[0])
            for c in node.children[1:]:
                acc = np.intersect1d(acc, walk(c), assume_unique=True)
            return acc
        if isinstance(node, Or):
            acc = walk(node.children[0])
            for c in node.children[1:]:
                acc = np.union1d(acc, walk(c))
            return acc
        raise TypeError(f"not a filter node: {node!r}")

    slots = walk(expr)
    words = bitset.zeros(n)
    if len(slots):
        bitset.set_bits(words, slots[slots < n])
    return words
