"""Shared fixtures and generators for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from filtra.catalog import Catalog, Item, default_features_spec, synth_catalog
from filtra.catalog import _normalize_features


def make_catalog(n_items=500, dim=16, n_clusters=8, seed=0, features=None,
                 blob_std=0.08) -> Catalog:
    return synth_catalog(n_items, dim, n_clusters,
                         features if features is not None else default_features_spec(),
                         seed=seed, blob_std=blob_std)


def catalog_from_rows(rows, dim, schema=None) -> Catalog:
    """rows: list of (item_id, embedding list, [(fid, val), ...])."""
    items = [Item(item_id=i, features=_normalize_features(pairs),
                  embedding=np.asarray(emb, dtype=np.float32))
             for i, emb, pairs in rows]
    return Catalog(items=items, dim=dim, feature_schema=dict(schema or {}))


@pytest.fixture
def small_catalog() -> Catalog:
    return make_catalog(n_items=400, dim=8, n_clusters=5, seed=11)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_expr(rng, depth=0, max_depth=3, n_features=5, n_values=5):
    """Small random filter tree over a dense (fid, val) grid."""
    from filtra.filter_query import And, Leaf, Not, Or
    if depth >= max_depth or rng.random() < 0.35:
        return Leaf(int(rng.integers(1, n_features + 1)), int(rng.integers(1, n_values + 1)))
    roll = rng.random()
    if roll < 0.18:
        return Not(random_expr(rng, depth + 1, max_depth, n_features, n_values))
    cls = And if roll < 0.6 else Or
    return cls(tuple(random_expr(rng, depth + 1, max_depth, n_features, n_values)
                     for _ in range(int(rng.integers(2, 4)))))
