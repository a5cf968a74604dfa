"""End-to-end retrieval: co-designed ANN+filter search, multi-task merge,
re-ranking, and score aggregation.

The co-designed path exploits the shared slot space: the compiled filter is
evaluated only over the probed clusters' 64-aligned slot ranges, which is
exactly equivalent to filtering everything and then searching, while touching
an nprobe/n_clusters fraction of the filter work. Survivor candidates are
re-ranked with cached float32 embeddings, per task, and folded into one final
score by the request's value-model formula.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bitset
from .bloom import BloomIndex, BloomParams, FilterStats
from .errors import FiltraError
from .filter_query import CompiledFilter, FilterExpr, Vocabulary, compile_filter, eval_compiled
from .ivf import IvfIndex, ScanStats, TopkResult, probe_centroids, search_clusters
from .quantize import quantize_vector
from .scoring import EmbeddingCache, Scorer, score_items
from .value_model import ValueModelConfig, mean_of_tasks, value_model_eval

MERGE_UNION = "union"
MERGE_INTERSECTION = "intersection"


@dataclass(frozen=True)
class TaskQuery:
    task_name: str
    user_embedding: np.ndarray


@dataclass(frozen=True)
class RetrievalRequest:
    tasks: tuple[TaskQuery, ...]
    filter: FilterExpr | None = None
    nprobe: int = 24
    k0: int = 1024
    topk: int = 100
    merge: str = MERGE_UNION
    value_model: ValueModelConfig | None = None

    def __post_init__(self):
        if not self.tasks:
            raise FiltraError("request needs at least one task")
        if not (1 <= self.topk <= self.k0):
            raise FiltraError(f"need 1 <= topk <= k0, got topk={self.topk}, k0={self.k0}")
        if self.merge not in (MERGE_UNION, MERGE_INTERSECTION):
            raise FiltraError(f"unknown merge {self.merge!r}")


@dataclass
class StageTimings:
    probe_us: int = 0
    filter_us: int = 0
    scan_us: int = 0
    overarch_us: int = 0
    total_us: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"probe_us": self.probe_us, "filter_us": self.filter_us,
                "scan_us": self.scan_us, "overarch_us": self.overarch_us,
                "total_us": self.total_us}


@dataclass
class RetrievedItem:
    item_id: int
    score: float
    task_scores: dict[str, float]


@dataclass
class RetrieveResult:
    items: list[RetrievedItem]
    stats: StageTimings
    scan: ScanStats
    filter_stats: FilterStats


@dataclass(eq=False)
class Engine:
    """Immutable serving state: all indexes, caches, and weights of one version."""

    ivf: IvfIndex
    bloom: BloomIndex
    cache: EmbeddingCache
    scorer: Scorer
    vocab: Vocabulary
    default_value_model: ValueModelConfig | None = None
    snapshot_version: int = 0

    @property
    def dim(self) -> int:
        return self.ivf.dim

    @property
    def bloom_params(self) -> BloomParams:
        return self.bloom.params

    def compile(self, expr: FilterExpr) -> CompiledFilter:
        return compile_filter(expr, self.bloom.params)


def codesigned_search(ivf: IvfIndex, bloom_index: BloomIndex,
                      cf: CompiledFilter | None, query: np.ndarray,
                      nprobe: int, k0: int,
                      scan_stats: ScanStats | None = None,
                      filter_stats: FilterStats | None = None,
                      timings: StageTimings | None = None) -> TopkResult:
    """Probe, filter only the probed clusters, then run the fused masked scan.

    Returns exactly what filtering the whole slot space and then searching
    would: clusters not probed are never scanned, so their mask bits are
    irrelevant, and within probed clusters the range-restricted filter equals
    the restriction of the full filter.
    """
    t0 = time.perf_counter()
    clusters = probe_centroids(ivf, query, nprobe)
    t1 = time.perf_counter()
    mask = None
    if cf is not None:
        mask = bitset.zeros(ivf.n_slots)
        for c in clusters:
            start, end = (int(x) for x in ivf.cluster_offsets[int(c)])
            if start == end:
                continue
            mask[start >> 6: (end + 63) >> 6] = eval_compiled(
                cf, bloom_index, ivf.valid_mask, slot_range=(start, end),
                stats=filter_stats)
    t2 = time.perf_counter()
    query_q = quantize_vector(query, ivf.items_q.params)
    result = search_clusters(ivf, query_q, clusters, mask, k0, stats=scan_stats)
    t3 = time.perf_counter()
    if timings is not None:
        timings.probe_us += int((t1 - t0) * 1e6)
        timings.filter_us += int((t2 - t1) * 1e6)
        timings.scan_us += int((t3 - t2) * 1e6)
    return result


def merge_candidates(per_task: list[np.ndarray], merge: str) -> np.ndarray:
    """Union keeps any task's candidates; intersection keeps common ones.

    Returns ascending unique item ids (deterministic downstream order).
    """
    if merge == MERGE_UNION:
        out = per_task[0]
        for ids in per_task[1:]:
            out = np.union1d(out, ids)
        return out
    out = np.unique(per_task[0])
    for ids in per_task[1:]:
        out = np.intersect1d(out, ids, assume_unique=False)
    return out


def retrieve(engine: Engine, req: RetrievalRequest) -> RetrieveResult:
    """Per-task co-designed search, merge, re-rank, aggregate, final top-k."""
    start = time.perf_counter()
    timings = StageTimings()
    scan_stats = ScanStats()
    filter_stats = FilterStats()
    cf = engine.compile(req.filter) if req.filter is not None else None

    candidates: list[np.ndarray] = []
    for task in req.tasks:
        res = codesigned_search(engine.ivf, engine.bloom, cf, task.user_embedding,
                                req.nprobe, req.k0, scan_stats=scan_stats,
                                filter_stats=filter_stats, timings=timings)
        candidates.append(res.item_ids)
    merged = merge_candidates(candidates, req.merge)

    t0 = time.perf_counter()
    items: list[RetrievedItem] = []
    if len(merged):
        vectors = engine.cache.batch(merged)
        task_scores: dict[str, np.ndarray] = {}
        for task in req.tasks:
            task_scores[task.task_name] = score_items(
                engine.scorer, task.user_embedding, vectors, task=task.task_name)
        vm = req.value_model if req.value_model is not None else engine.default_value_model
        if vm is None:
            vm = mean_of_tasks([t.task_name for t in req.tasks])
        final = np.asarray(value_model_eval(vm, task_scores), dtype=np.float64)
        order = np.lexsort((merged, -final))[: req.topk]
        for i in order:
            items.append(RetrievedItem(
                item_id=int(merged[i]), score=float(final[i]),
                task_scores={t: float(task_scores[t][i]) for t in task_scores}))
    timings.overarch_us = int((time.perf_counter() - t0) * 1e6)
    timings.total_us = int((time.perf_counter() - start) * 1e6)
    return RetrieveResult(items=items, stats=timings, scan=scan_stats,
                          filter_stats=filter_stats)
