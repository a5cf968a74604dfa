"""Packed bit masks over item slots.

A mask is a numpy ``uint64`` array; slot ``s`` lives in word ``s >> 6`` at bit
``s & 63`` (LSB-first). One word operation therefore covers 64 slots, which is
the layout both the signature planes and the search validity mask rely on.
"""

from __future__ import annotations

import numpy as np

WORD_BITS = 64


def n_words(n_slots: int) -> int:
    return (n_slots + WORD_BITS - 1) // WORD_BITS


def zeros(n_slots: int) -> np.ndarray:
    return np.zeros(n_words(n_slots), dtype=np.uint64)


def ones(n_slots: int) -> np.ndarray:
    """All-ones mask with bits at or beyond ``n_slots`` cleared."""
    words = np.full(n_words(n_slots), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    clear_tail(words, n_slots)
    return words


def clear_tail(words: np.ndarray, n_slots: int) -> None:
    """Zero any bits past ``n_slots`` in the final word, in place."""
    rem = n_slots % WORD_BITS
    if rem and len(words):
        words[-1] &= np.uint64((1 << rem) - 1)


def set_bit(words: np.ndarray, slot: int) -> None:
    words[slot >> 6] |= np.uint64(1 << (slot & 63))


def get_bit(words: np.ndarray, slot: int) -> bool:
    return bool(words[slot >> 6] >> np.uint64(slot & 63) & np.uint64(1))


def set_bits(words: np.ndarray, slots: np.ndarray) -> None:
    """Set many bits at once (duplicate slots allowed)."""
    slots = np.asarray(slots, dtype=np.int64)
    np.bitwise_or.at(words, slots >> 6, np.uint64(1) << (slots & 63).astype(np.uint64))


def from_bool(flags: np.ndarray) -> np.ndarray:
    """Pack a boolean array (one entry per slot) into words."""
    flags = np.asarray(flags, dtype=bool)
    padded = n_words(len(flags)) * WORD_BITS
    if padded != len(flags):
        flags = np.concatenate([flags, np.zeros(padded - len(flags), dtype=bool)])
    return np.packbits(flags, bitorder="little").view(np.uint64)


def to_bool(words: np.ndarray, n_slots: int) -> np.ndarray:
    """Unpack words into a boolean array of length ``n_slots``."""
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")
    return bits[:n_slots].astype(bool)


def popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def indices(words: np.ndarray, n_slots: int) -> np.ndarray:
    """Slot indices of set bits, ascending."""
    return np.flatnonzero(to_bool(words, n_slots))
