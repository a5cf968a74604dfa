import numpy as np
import pytest

from filtra import bitset
from filtra.bloom import (BloomParams, FilterStats, bloom_eval_leaf,
                          bloom_fpr_theoretical, build_bloom, hash_seed,
                          hash_positions, heuristic_bits)
from filtra.exact_filter import build_forward, forward_leaf

U64 = (1 << 64) - 1


# --- standalone reimplementation of the hash recipe (oracle) -----------------

def oracle_splitmix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % (1 << 64)
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % (1 << 64)
    return (z ^ (z >> 31)) % (1 << 64)


def oracle_positions(feature_id, value, m_bits, k_hashes):
    data = feature_id.to_bytes(8, "little") + value.to_bytes(8, "little")
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) % (1 << 64)
    return sorted({oracle_splitmix(h ^ ((i * 0x9E3779B97F4A7C15) % (1 << 64))) % m_bits
                   for i in range(k_hashes)})


def test_hash_positions_match_independent_recipe():
    qb = hash_positions(1, 2, BloomParams(m_bits=1024, k_hashes=5))
    assert list(qb.set_bits) == oracle_positions(1, 2, 1024, 5)
    for fid, val in [(0, 0), (7, 123456789), (2**64 - 1, 2**63), (42, 42)]:
        got = hash_positions(fid, val, BloomParams(m_bits=512, k_hashes=7))
        assert list(got.set_bits) == oracle_positions(fid, val, 512, 7)


def test_hash_positions_deterministic_and_bounded():
    params = BloomParams(m_bits=256, k_hashes=5)
    a = hash_positions(9, 9, params)
    b = hash_positions(9, 9, params)
    assert a == b
    assert all(0 <= p < 256 for p in a.set_bits)
    assert len(a.set_bits) <= 5


def test_hash_k1_single_position():
    params = BloomParams(m_bits=128, k_hashes=1)
    qb = hash_positions(5, 6, params)
    assert qb.set_bits == (oracle_splitmix(hash_seed(5, 6)) % 128,)


def test_per_index_hashes_are_not_coupled():
    # one pair's full position set must not be predictable from another's:
    # positions at index i use an independently mixed 64-bit hash
    params = BloomParams(m_bits=1 << 16, k_hashes=8)
    a = hash_positions(1, 1, params).set_bits
    b = hash_positions(1, 2, params).set_bits
    diffs = {(y - x) % (1 << 16) for x, y in zip(a, b)}
    assert len(diffs) > 1  # not a shifted copy
    assert len(set(a)) == 8 and len(set(b)) == 8


def test_build_bloom_zero_features_column_empty():
    params = BloomParams(m_bits=64, k_hashes=3)
    index = build_bloom([[], [(1, 1)]], params)
    assert not index.signature(0).any()
    assert index.signature(1).any()


def test_build_bloom_at_most_k_bits_per_feature():
    params = BloomParams(m_bits=1024, k_hashes=5)
    index = build_bloom([[(3, 4)]], params)
    assert int(index.signature(0).sum()) <= 5
    assert int(index.signature(0).sum()) == len(hash_positions(3, 4, params).set_bits)


def test_plane_invariant_bit_set_iff_feature_hashes_there(rng):
    params = BloomParams(m_bits=128, k_hashes=4)
    slot_features = [[(int(rng.integers(10)), int(rng.integers(10)))
                      for _ in range(int(rng.integers(1, 5)))] for _ in range(30)]
    index = build_bloom(slot_features, params)
    for slot, pairs in enumerate(slot_features):
        expected = set()
        for fid, val in pairs:
            expected.update(hash_positions(fid, val, params).set_bits)
        got = set(np.flatnonzero(index.signature(slot)))
        assert got == expected


def test_memory_law_exact():
    for m, n in [(512, 100), (1024, 64), (64, 1), (2048, 1000), (256, 129)]:
        index = build_bloom([[] for _ in range(n)], BloomParams(m_bits=m, k_hashes=5))
        assert index.plane_bytes == m * ((n + 63) // 64) * 8


def test_leaf_eval_superset_of_exact_and_counts_words(rng):
    params = BloomParams(m_bits=8, k_hashes=2)  # tiny M forces collisions
    slot_features = [[(int(rng.integers(4)), int(rng.integers(4)))]
                     for _ in range(8)]
    index = build_bloom(slot_features, params)
    forward = build_forward(slot_features)
    stats = FilterStats()
    for fid in range(4):
        for val in range(4):
            qb = hash_positions(fid, val, params)
            mask = bloom_eval_leaf(index, qb, stats=stats)
            admitted = bitset.to_bool(mask, 8)
            exact = forward_leaf(forward, fid, val)
            assert np.all(admitted >= exact)  # superset, no false negatives
            assert int(admitted.sum()) >= int(exact.sum())
    assert stats.words_read > 0


def test_leaf_eval_absent_leaf_only_false_positives(rng):
    params = BloomParams(m_bits=512, k_hashes=5)
    slot_features = [[(1, int(rng.integers(50)))] for _ in range(200)]
    index = build_bloom(slot_features, params)
    forward = build_forward(slot_features)
    qb = hash_positions(999, 999, params)  # matches nothing exactly
    admitted = bitset.to_bool(bloom_eval_leaf(index, qb), 200)
    exact = forward_leaf(forward, 999, 999)
    assert not exact.any()
    assert np.all(admitted >= exact)


def test_leaf_eval_present_everywhere_all_ones():
    params = BloomParams(m_bits=256, k_hashes=4)
    slot_features = [[(5, 5)] for _ in range(70)]
    index = build_bloom(slot_features, params)
    qb = hash_positions(5, 5, params)
    admitted = bitset.to_bool(bloom_eval_leaf(index, qb), 70)
    assert admitted.all()


def test_leaf_eval_word_budget():
    params = BloomParams(m_bits=512, k_hashes=5)
    index = build_bloom([[(1, 1)] for _ in range(640)], params)  # 10 words
    qb = hash_positions(1, 1, params)
    stats = FilterStats()
    bloom_eval_leaf(index, qb, stats=stats)
    assert stats.words_read == len(qb.set_bits) * 10
    stats2 = FilterStats()
    bloom_eval_leaf(index, qb, word_range=(2, 5), stats=stats2)
    assert stats2.words_read == len(qb.set_bits) * 3


def test_fpr_theoretical_limits_and_value():
    tiny = bloom_fpr_theoretical(BloomParams(m_bits=1 << 20, k_hashes=5), 10)
    assert tiny < 1e-20
    val = bloom_fpr_theoretical(BloomParams(m_bits=1024, k_hashes=5), 10)
    expected = (1.0 - (1.0 - 1.0 / 1024) ** 50) ** 5
    assert val == pytest.approx(expected)
    assert val == pytest.approx(2.5e-7, rel=0.05)


def test_fpr_theoretical_decreases_with_m():
    rates = [bloom_fpr_theoretical(BloomParams(m_bits=m, k_hashes=5), 10)
             for m in (256, 512, 1024, 2048)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_heuristic_sizing():
    assert heuristic_bits(120, 5, 3) == 1800


def test_padding_slots_all_zero():
    params = BloomParams(m_bits=64, k_hashes=3)
    index = build_bloom([[(1, 1)], [(2, 2)]], params, n_slots=128)
    for slot in range(2, 128):
        assert not index.signature(slot).any()
