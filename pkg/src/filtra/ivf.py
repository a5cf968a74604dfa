"""Int8 IVF index: KMeans++ clustering, cluster-major layout, fused masked scan.

Items are clustered with KMeans++ and stored contiguously per cluster in a
slot space where each cluster's range starts on a 64-slot boundary and is
padded to a multiple of 64, so filter-mask words align to whole clusters.
Search probes the highest-dot-product centroids, then runs an exact integer
top-k over the probed slots through fixed-size tiles: candidate embeddings are
never gathered into a buffer larger than one tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bitset
from .catalog import Catalog
from .errors import DimMismatch, KTooLarge
from .quantize import QuantParams, QuantizedMatrix, compute_quant_params, \
    quantize_matrix, quantize_vector
from .vecmath import dot_rows

TILE_ROWS = 4096

DEFAULT_MAX_ITERS = 25
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class Centroids:
    vectors: np.ndarray  # float32, (n_clusters, dim)

    @property
    def n_clusters(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class TopkResult:
    """Scores sorted descending, ties broken by ascending item id."""

    item_ids: np.ndarray  # u64
    scores: np.ndarray    # int32 (int8 path) or float64
    k_requested: int

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), s.item()) for i, s in zip(self.item_ids, self.scores)]


@dataclass
class ScanStats:
    """Work counters the fused-scan contract is verified against."""

    slots_scanned: int = 0
    max_tile_rows: int = 0
    tiles: int = 0


def _sq_dists_to_centers(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared euclidean distances (n, k); clamped at zero for fp noise."""
    d2 = (np.einsum("ij,ij->i", data, data)[:, None]
          - 2.0 * (data @ centers.T)
          + np.einsum("ij,ij->i", centers, centers)[None, :])
    return np.maximum(d2, 0.0)


def kmeans_pp_init(data: np.ndarray, k: int, seed: int) -> Centroids:
    """D-squared seeding: first center uniform, the rest proportional to the
    squared distance to the nearest chosen center."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k > n:
        raise KTooLarge(k, n)
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    best = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for i in range(1, k):
        total = best.sum()
        if total <= 0.0:
            # remaining points duplicate chosen centers; pick uniformly among the rest
            pool = np.flatnonzero(~taken)
            idx = int(pool[rng.integers(len(pool))])
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(best), r, side="right"))
            idx = min(idx, n - 1)
        chosen[i] = idx
        taken[idx] = True
        np.minimum(best, np.sum((data - data[idx]) ** 2, axis=1), out=best)
    return Centroids(vectors=data[chosen].astype(np.float32))


def kmeans_train(data: np.ndarray, k: int, max_iters: int = DEFAULT_MAX_ITERS,
                 tol: float = DEFAULT_TOL, seed: int = 0) -> tuple[Centroids, np.ndarray]:
    """Lloyd iterations from KMeans++ seeding.

    Stops when the relative inertia improvement falls below ``tol`` or after
    ``max_iters``. Empty clusters are re-seeded from the farthest point of the
    largest cluster, so inertia never increases across iterations.
    """
    data64 = np.asarray(data, dtype=np.float64)
    n = data64.shape[0]
    if k > n:
        raise KTooLarge(k, n)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    centers = kmeans_pp_init(data64, k, seed).vectors.astype(np.float64)
    prev_inertia: float | None = None
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists_to_centers(data64, centers)
        assign = np.argmin(d2, axis=1)
        # refill empty clusters before computing means
        sizes = np.bincount(assign, minlength=k)
        point_cost = d2[np.arange(n), assign]
        for c in np.flatnonzero(sizes == 0):
            donor = int(np.argmax(sizes))
            members = np.flatnonzero(assign == donor)
            far = members[np.argmax(point_cost[members])]
            assign[far] = c
            point_cost[far] = 0.0
            sizes[donor] -= 1
            sizes[c] += 1
        for c in range(k):
            members = assign == c
            centers[c] = data64[members].mean(axis=0)
        d2 = _sq_dists_to_centers(data64, centers)
        assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        if prev_inertia is not None and prev_inertia - inertia <= tol * prev_inertia:
            break
        prev_inertia = inertia
    return Centroids(vectors=centers.astype(np.float32)), assign


def kmeans_inertia(data: np.ndarray, centers: np.ndarray) -> float:
    d2 = _sq_dists_to_centers(np.asarray(data, dtype=np.float64),
                              np.asarray(centers, dtype=np.float64))
    return float(d2.min(axis=1).sum())


@dataclass(eq=False)
class IvfIndex:
    """Cluster-major, 64-padded slot layout over quantized item embeddings.

    ``perm[slot]`` is the original item index (-1 for padding) and
    ``inv_perm`` its inverse over real items. ``cluster_offsets[c]`` is the
    padded ``[start, end)`` slot range of cluster c; starts are 64-aligned,
    range lengths are multiples of 64, and real items within a cluster are
    ordered by ascending item id. Padding slots carry zero embeddings and a
    cleared validity bit.
    """

    centroids: Centroids
    perm: np.ndarray             # i64, slot -> item index, -1 padding
    inv_perm: np.ndarray         # i64, item index -> slot
    cluster_offsets: np.ndarray  # u64, (n_clusters, 2)
    items_q: QuantizedMatrix     # int8 rows in slot order
    valid_mask: np.ndarray       # packed u64 words
    item_ids: np.ndarray         # u64 per slot (0 on padding)
    _valid_bool: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_slots(self) -> int:
        return int(self.perm.shape[0])

    @property
    def n_clusters(self) -> int:
        return self.centroids.n_clusters

    @property
    def dim(self) -> int:
        return self.centroids.dim

    @property
    def n_items(self) -> int:
        return int((self.perm >= 0).sum())

    @property
    def valid_bool(self) -> np.ndarray:
        if self._valid_bool is None:
            self._valid_bool = bitset.to_bool(self.valid_mask, self.n_slots)
        return self._valid_bool

    def slot_features(self, feature_lists: list[list[tuple[int, int]]]
                      ) -> list[list[tuple[int, int]]]:
        """Reorder per-item feature lists into slot order (padding empty)."""
        return [feature_lists[p] if p >= 0 else [] for p in self.perm]

    def cluster_sizes(self) -> np.ndarray:
        """Padded slot-range length per cluster."""
        return (self.cluster_offsets[:, 1] - self.cluster_offsets[:, 0]).astype(np.int64)


def build_ivf(catalog: Catalog, k: int | None = None,
              qp: QuantParams | None = None, seed: int = 0,
              max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> IvfIndex:
    """Cluster a catalog and lay it out cluster-major with Int8 rows.

    ``k`` defaults to ceil(sqrt(n)); ``qp`` defaults to global min/max of the
    catalog embeddings.
    """
    n = len(catalog)
    if k is None:
        k = int(np.ceil(np.sqrt(n)))
    if k < 1:
        raise KTooLarge(k, n)
    centroids, assign = kmeans_train(catalog.embeddings, k, max_iters=max_iters,
                                     tol=tol, seed=seed)
    if qp is None:
        qp = compute_quant_params(catalog.embeddings)

    item_ids = catalog.item_ids
    offsets = np.zeros((k, 2), dtype=np.uint64)
    perm_parts: list[np.ndarray] = []
    cursor = 0
    for c in range(k):
        members = np.flatnonzero(assign == c)
        members = members[np.argsort(item_ids[members], kind="stable")]
        padded = bitset.n_words(len(members)) * bitset.WORD_BITS if len(members) else 0
        offsets[c] = (cursor, cursor + padded)
        part = np.full(padded, -1, dtype=np.int64)
        part[: len(members)] = members
        perm_parts.append(part)
        cursor += padded
    perm = np.concatenate(perm_parts) if perm_parts else np.empty(0, dtype=np.int64)
    n_slots = cursor

    inv_perm = np.full(n, -1, dtype=np.int64)
    real = perm >= 0
    inv_perm[perm[real]] = np.flatnonzero(real)

    rows = np.zeros((n_slots, catalog.dim), dtype=np.float32)
    rows[real] = catalog.embeddings[perm[real]]
    items_q = QuantizedMatrix(data=quantize_matrix(rows, qp).data, params=qp)
    items_q.data[~real] = 0

    valid = bitset.zeros(n_slots)
    bitset.set_bits(valid, np.flatnonzero(real))

    slot_ids = np.zeros(n_slots, dtype=np.uint64)
    slot_ids[real] = item_ids[perm[real]]

    return IvfIndex(centroids=centroids, perm=perm, inv_perm=inv_perm,
                    cluster_offsets=offsets, items_q=items_q,
                    valid_mask=valid, item_ids=slot_ids)


def probe_centroids(index: IvfIndex, query: np.ndarray, nprobe: int) -> np.ndarray:
    """Ids of the nprobe highest-dot-product centroids (ties: ascending id)."""
    query = np.asarray(query, dtype=np.float32)
    if query.shape[0] != index.dim:
        raise DimMismatch(index.dim, query.shape[0])
    nprobe = min(max(nprobe, 1), index.n_clusters)
    scores = dot_rows(index.centroids.vectors, query)
    order = np.lexsort((np.arange(index.n_clusters), -scores))
    return order[:nprobe].astype(np.int64)


def _select_topk(scores: np.ndarray, ids: np.ndarray, topk: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k by (score desc, id asc) without sorting everything when k << m."""
    m = len(scores)
    if m == 0 or topk <= 0:
        return ids[:0], scores[:0]
    if topk < m:
        kth = np.partition(scores, m - topk)[m - topk]
        cand = np.flatnonzero(scores >= kth)
        scores, ids = scores[cand], ids[cand]
    order = np.lexsort((ids, -scores))[:topk]
    return ids[order], scores[order]


def search_clusters(index: IvfIndex, query_q: np.ndarray, clusters: np.ndarray,
                    mask: np.ndarray | None, topk: int,
                    stats: ScanStats | None = None) -> TopkResult:
    """Exact integer top-k over the valid, mask-admitted slots of ``clusters``.

    Streams each cluster range in tiles of at most ``TILE_ROWS`` rows; only a
    tile-sized slice of the embedding table is ever widened for the dot
    product, never a gathered candidate copy. ``stats`` records the scanned
    slot count and the largest tile materialized.
    """
    query_q = np.asarray(query_q, dtype=np.int8)
    if query_q.shape[0] != index.dim:
        raise DimMismatch(index.dim, query_q.shape[0])
    qi32 = query_q.astype(np.int32)
    mask_bool = bitset.to_bool(mask, index.n_slots) if mask is not None else None
    valid_bool = index.valid_bool

    slot_parts: list[np.ndarray] = []
    score_parts: list[np.ndarray] = []
    for c in clusters:
        start, end = (int(x) for x in index.cluster_offsets[int(c)])
        if stats is not None:
            stats.slots_scanned += end - start
        for t0 in range(start, end, TILE_ROWS):
            t1 = min(t0 + TILE_ROWS, end)
            eligible = valid_bool[t0:t1]
            if mask_bool is not None:
                eligible = eligible & mask_bool[t0:t1]
            if not eligible.any():
                if stats is not None:
                    stats.tiles += 1
                    stats.max_tile_rows = max(stats.max_tile_rows, t1 - t0)
                continue
            tile = index.items_q.data[t0:t1].astype(np.int32)  # the one tile-sized copy
            if stats is not None:
                stats.tiles += 1
                stats.max_tile_rows = max(stats.max_tile_rows, tile.shape[0])
            scores = tile @ qi32
            keep = np.flatnonzero(eligible)
            slot_parts.append(keep + t0)
            score_parts.append(scores[keep])
    if slot_parts:
        slots = np.concatenate(slot_parts)
        scores = np.concatenate(score_parts)
        ids = index.item_ids[slots]
    else:
        ids = np.empty(0, dtype=np.uint64)
        scores = np.empty(0, dtype=np.int32)
    top_ids, top_scores = _select_topk(scores, ids, topk)
    return TopkResult(item_ids=top_ids, scores=top_scores, k_requested=topk)


def search(index: IvfIndex, query: np.ndarray, nprobe: int, topk: int,
           mask: np.ndarray | None = None,
           stats: ScanStats | None = None) -> TopkResult:
    """Quantize the query with the index params, probe, then run the fused scan."""
    query_q = quantize_vector(query, index.items_q.params)
    clusters = probe_centroids(index, query, nprobe)
    return search_clusters(index, query_q, clusters, mask, topk, stats=stats)
