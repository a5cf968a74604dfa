"""Item catalogs: ingestion, validation, synthesis, and sidecar dictionaries.

A catalog is the immutable candidate pool every index is built from: items
with a unique 64-bit id, a list of categorical ``(feature_id, value)`` pairs,
and a fixed-dimension float embedding. Feature values are unsigned integers;
string values are dictionary-encoded via a sidecar (one mapping per line).
Embeddings are L2-normalized at ingestion by default so dot product equals
cosine similarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DimMismatch, DuplicateItemId, InvalidSpec, ParseError
from .vecmath import l2_normalize_rows

U64_MAX = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class FeatureValue:
    """One categorical feature assignment on an item."""

    feature_id: int
    value: int


@dataclass(eq=False)
class Item:
    item_id: int
    features: tuple[FeatureValue, ...]
    embedding: np.ndarray  # float32, length = catalog dim


@dataclass(eq=False)
class Catalog:
    """Validated, immutable-by-convention candidate pool."""

    items: list[Item]
    dim: int
    feature_schema: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    @cached_property
    def embeddings(self) -> np.ndarray:
        """All item embeddings as one (n, dim) float32 matrix."""
        if not self.items:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([it.embedding for it in self.items]).astype(np.float32)

    @cached_property
    def item_ids(self) -> np.ndarray:
        return np.array([it.item_id for it in self.items], dtype=np.uint64)

    @cached_property
    def feature_lists(self) -> list[list[tuple[int, int]]]:
        """Per-item ``(feature_id, value)`` pairs, in item order."""
        return [[(f.feature_id, f.value) for f in it.features] for it in self.items]


def _normalize_features(pairs: list[tuple[int, int]]) -> tuple[FeatureValue, ...]:
    """Dedupe and sort (feature_id, value) pairs into canonical order."""
    uniq = sorted(set((int(f), int(v)) for f, v in pairs))
    for f, v in uniq:
        if not (0 <= f <= U64_MAX and 0 <= v <= U64_MAX):
            raise InvalidSpec(f"feature pair ({f}, {v}) outside u64 range")
    return tuple(FeatureValue(f, v) for f, v in uniq)


def _finish(records: list[tuple[int, list[float], list[tuple[int, int]]]],
            normalize: bool, schema: dict[int, str] | None) -> Catalog:
    if not records:
        raise ParseError(0, "empty catalog")
    dim = len(records[0][1])
    if dim < 1:
        raise ParseError(1, "first record has empty embedding")
    seen: set[int] = set()
    matrix = np.zeros((len(records), dim), dtype=np.float32)
    for i, (item_id, emb, _) in enumerate(records):
        if item_id in seen:
            raise DuplicateItemId(item_id)
        seen.add(item_id)
        if len(emb) != dim:
            raise DimMismatch(dim, len(emb))
        matrix[i] = np.asarray(emb, dtype=np.float32)
    if normalize:
        matrix = l2_normalize_rows(matrix)
    items = [
        Item(item_id=item_id, features=_normalize_features(pairs), embedding=matrix[i])
        for i, (item_id, _, pairs) in enumerate(records)
    ]
    return Catalog(items=items, dim=dim, feature_schema=dict(schema or {}))


def load_catalog(path: str | Path, format: str = "jsonl", *,
                 normalize: bool = True,
                 feature_schema: dict[int, str] | None = None) -> Catalog:
    """Load and validate a catalog from a JSONL or TSV file.

    JSONL record: ``{"item_id": u64, "embedding": [f32...],
    "features": [[feature_id, value], ...]}``. TSV row: ``item_id <TAB>
    comma-joined embedding <TAB> semicolon-joined feature:value pairs``.
    """
    if format not in ("jsonl", "tsv"):
        raise InvalidSpec(f"unknown catalog format {format!r}")
    records: list[tuple[int, list[float], list[tuple[int, int]]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                if format == "jsonl":
                    rec = json.loads(line)
                    item_id = int(rec["item_id"])
                    emb = [float(x) for x in rec["embedding"]]
                    pairs = [(int(f), int(v)) for f, v in rec.get("features", [])]
                else:
                    cols = line.split("\t")
                    if len(cols) != 3:
                        raise ValueError(f"expected 3 tab-separated columns, got {len(cols)}")
                    item_id = int(cols[0])
                    emb = [float(x) for x in cols[1].split(",")] if cols[1] else []
                    pairs = []
                    if cols[2]:
                        for part in cols[2].split(";"):
                            f, v = part.split(":")
                            pairs.append((int(f), int(v)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            records.append((item_id, emb, pairs))
    return _finish(records, normalize, feature_schema)


def save_catalog(catalog: Catalog, path: str | Path, format: str = "jsonl") -> None:
    """Write a catalog so that ``load_catalog`` reproduces it bit-for-bit.

    Float32 embedding cells survive the text round trip exactly: each cell is
    widened to float64 (exact), printed with shortest-repr, and narrowed back
    on load. Call with ``normalize=False`` on reload if the catalog was
    already normalized.
    """
    if format not in ("jsonl", "tsv"):
        raise InvalidSpec(f"unknown catalog format {format!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for it in catalog.items:
            emb = [float(x) for x in it.embedding]
            pairs = [(f.feature_id, f.value) for f in it.features]
            if format == "jsonl":
                fh.write(json.dumps(
                    {"item_id": it.item_id, "embedding": emb,
                     "features": [[f, v] for f, v in pairs]},
                    separators=(",", ":")) + "\n")
            else:
                emb_s = ",".join(repr(x) for x in emb)
                feat_s = ";".join(f"{f}:{v}" for f, v in pairs)
                fh.write(f"{it.item_id}\t{emb_s}\t{feat_s}\n")


def load_dictionary(path: str | Path) -> dict[str, int]:
    """Read a string-to-integer sidecar: one ``string<TAB>id`` line per mapping."""
    out: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                key, val = line.split("\t")
                out[key] = int(val)
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
    return out


def synth_catalog(n_items: int, dim: int, n_clusters: int,
                  features_spec: list[tuple[int, int, int]],
                  seed: int, *, blob_std: float = 0.08) -> Catalog:
    """Generate a clustered synthetic catalog, deterministic for a fixed seed.

    Embeddings are Gaussian blobs around ``n_clusters`` random unit centers,
    L2-normalized. ``features_spec`` rows are ``(feature_id, cardinality,
    values_per_item)``: each item draws that many distinct values uniformly
    from ``[0, cardinality)`` for the feature.
    """
    if n_items < 1 or n_clusters < 1 or n_items < n_clusters or dim < 1:
        raise InvalidSpec(
            f"need n_items >= n_clusters >= 1 and dim >= 1, "
            f"got n_items={n_items}, n_clusters={n_clusters}, dim={dim}")
    for fid, card, vpi in features_spec:
        if card < 1 or vpi < 0:
            raise InvalidSpec(f"feature {fid}: cardinality {card}, values_per_item {vpi}")
    rng = np.random.default_rng(seed)
    centers = l2_normalize_rows(rng.standard_normal((n_clusters, dim)))
    blob = rng.integers(0, n_clusters, size=n_items)
    noise = rng.standard_normal((n_items, dim)) * blob_std
    matrix = l2_normalize_rows(centers[blob] + noise)

    items: list[Item] = []
    for i in range(n_items):
        pairs: list[tuple[int, int]] = []
        for fid, card, vpi in features_spec:
            take = min(vpi, card)
            if take:
                vals = rng.choice(card, size=take, replace=False)
                pairs.extend((fid, int(v)) for v in vals)
        items.append(Item(item_id=i, features=_normalize_features(pairs),
                          embedding=matrix[i]))
    schema = {fid: f"f{fid}" for fid, _, _ in features_spec}
    return Catalog(items=items, dim=dim, feature_schema=schema)


def default_features_spec() -> list[tuple[int, int, int]]:
    """Six features totalling ten values per item, echoing a typical workload."""
    return [(1, 50, 2), (2, 50, 2), (3, 40, 2), (4, 30, 2), (5, 20, 1), (6, 10, 1)]
