"""Oracles, metrics, and the benchmark harness.

Everything here is deliberately simple and index-free where possible: brute
force full scans, a naive per-item filter interpreter, and a stage-by-stage
pipeline replay. These are the references the fast paths are verified against,
so they must not share scan code with them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bitset
from .bloom import BloomIndex, bloom_eval_leaf, hash_positions
from .catalog import Catalog
from .errors import EmptyWorkload
from .exact_filter import ForwardIndex, forward_leaf
from .filter_query import And, FilterExpr, Leaf, Not, Or, Vocabulary, format_filter
from .quantize import QuantParams, compute_quant_params, quantize_matrix, quantize_vector
from .scoring import MlpScorer, MolScorer
from .serve import handle_batch
from .value_model import (Add, Clamp, Const, Div, If, Max, Min, Mul, Sub, TaskScore,
                          ValueModelConfig, mean_of_tasks)
from .vecmath import dot_rows

# --- brute-force search oracle -----------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    """Exact per-query answers, computed without any index structure."""

    item_ids: np.ndarray
    scores: np.ndarray


def brute_force_topk(catalog: Catalog, query: np.ndarray, topk: int,
                     exact_filter_mask: np.ndarray | None = None,
                     score: str = "f32_dot",
                     qp: QuantParams | None = None) -> GroundTruth:
    """Full scan, exact selection, (score desc, item_id asc) tie-break.

    ``score`` picks float32 dot products (accumulated in float64) or the same
    Int8 contract the index uses, derived independently here via a plain
    integer matmul over the whole catalog.
    """
    ids = catalog.item_ids
    if score == "f32_dot":
        scores = dot_rows(catalog.embeddings, np.asarray(query, dtype=np.float32))
    elif score == "int8_dot":
        if qp is None:
            qp = compute_quant_params(catalog.embeddings)
        items_q = quantize_matrix(catalog.embeddings, qp).data.astype(np.int32)
        scores = items_q @ quantize_vector(query, qp).astype(np.int32)
    else:
        raise ValueError(f"unknown score mode {score!r}")
    if exact_filter_mask is not None:
        keep = np.flatnonzero(np.asarray(exact_filter_mask, dtype=bool))
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:topk]
    return GroundTruth(item_ids=ids[order], scores=scores[order])


def recall_at_k(result_ids: np.ndarray, truth_ids: np.ndarray, k: int) -> float:
    """|result[:k] ∩ truth[:k]| / k."""
    if k <= 0 or k > len(truth_ids):
        raise ValueError(f"need 0 < k <= |truth|, got k={k}, |truth|={len(truth_ids)}")
    res = set(int(x) for x in np.asarray(result_ids)[:k])
    truth = set(int(x) for x in np.asarray(truth_ids)[:k])
    return len(res & truth) / k


# --- naive filter interpreter (third exact oracle) -----------------------------


def naive_filter_eval(feature_lists: list[list[tuple[int, int]]],
                      expr: FilterExpr) -> np.ndarray:
    """Per-item recursive boolean evaluation over plain pair sets."""
    pair_sets = [frozenset(pairs) for pairs in feature_lists]

    def walk(node, pairs: frozenset) -> bool:
        if isinstance(node, Leaf):
            return (node.feature_id, node.value) in pairs
        if isinstance(node, Not):
            return not walk(node.child, pairs)
        if isinstance(node, And):
            return all(walk(c, pairs) for c in node.children)
        if isinstance(node, Or):
            return any(walk(c, pairs) for c in node.children)
        raise TypeError(f"not a filter node: {node!r}")

    return np.array([walk(expr, pairs) for pairs in pair_sets], dtype=bool)


# --- false-positive-rate measurement -------------------------------------------


@dataclass
class FprReport:
    per_leaf: list[float]
    false_positives: int
    evaluated: int
    true_matches: int

    @property
    def rate(self) -> float:
        """FP count over evaluated non-matching items."""
        nonmatching = self.evaluated - self.true_matches
        return self.false_positives / nonmatching if nonmatching else 0.0


def fpr_measure(bloom_index: BloomIndex, forward_index: ForwardIndex,
                leaves: list[tuple[int, int]],
                valid: np.ndarray | None = None) -> FprReport:
    """Empirical per-leaf false positives: bloom-admitted but not exact-matched.

    The leaf workload should be NOT-free (it is by construction here); the
    exact side comes from the forward index, which shares nothing with the
    signature planes.
    """
    n = bloom_index.n_slots
    valid_bool = bitset.to_bool(valid, n) if valid is not None else np.ones(n, dtype=bool)
    n_valid = int(valid_bool.sum())
    per_leaf: list[float] = []
    fp_total = 0
    tm_total = 0
    for fid, val in leaves:
        qb = hash_positions(fid, val, bloom_index.params)
        admitted = bitset.to_bool(bloom_eval_leaf(bloom_index, qb), n) & valid_bool
        exact = forward_leaf(forward_index, fid, val) & valid_bool
        fp = int((admitted & ~exact).sum())
        tm = int(exact.sum())
        fp_total += fp
        tm_total += tm
        nonmatching = n_valid - tm
        per_leaf.append(fp / nonmatching if nonmatching else 0.0)
    return FprReport(per_leaf=per_leaf, false_positives=fp_total,
                     evaluated=n_valid * len(leaves), true_matches=tm_total)


# --- random workloads -----------------------------------------------------------


def random_filter_expr(rng: np.random.Generator,
                       pairs: list[tuple[int, int]],
                       max_depth: int = 3,
                       allow_not: bool = True,
                       absent_fraction: float = 0.2) -> FilterExpr:
    """Random boolean tree over observed (and some absent) feature pairs."""

    def leaf() -> Leaf:
        if rng.random() < absent_fraction or not pairs:
            return Leaf(int(rng.integers(1 << 20, 1 << 21)), int(rng.integers(1 << 20)))
        fid, val = pairs[int(rng.integers(len(pairs)))]
        return Leaf(fid, val)

    def node(depth: int) -> FilterExpr:
        if depth >= max_depth or rng.random() < 0.3:
            return leaf()
        roll = rng.random()
        if allow_not and roll < 0.15:
            return Not(node(depth + 1))
        kind = And if roll < 0.6 else Or
        width = int(rng.integers(2, 4))
        return kind(tuple(node(depth + 1) for _ in range(width)))

    expr = node(0)
    if isinstance(expr, Leaf) and rng.random() < 0.5:
        expr = Or((expr, leaf()))
    return expr


def catalog_pairs(catalog: Catalog, limit: int = 5000) -> list[tuple[int, int]]:
    """Distinct feature pairs present in a catalog (generator fodder)."""
    seen: set[tuple[int, int]] = set()
    for pairs in catalog.feature_lists:
        seen.update(pairs)
        if len(seen) >= limit:
            break
    return sorted(seen)


def random_requests(catalog: Catalog, n: int, seed: int, *,
                    dim: int | None = None,
                    nprobe: int = 8, k0: int = 256, topk: int = 32,
                    esr_fraction: float = 0.3,
                    filter_fraction: float = 0.5,
                    vocab: Vocabulary | None = None) -> list[dict]:
    """Deterministic mixed retrieve/esr wire requests for tests and benches."""
    rng = np.random.default_rng(seed)
    dim = dim or catalog.dim
    pairs = catalog_pairs(catalog)
    ids = catalog.item_ids
    out: list[dict] = []
    for i in range(n):
        base = catalog.embeddings[int(rng.integers(len(catalog)))]
        emb = base + rng.standard_normal(dim).astype(np.float32) * 0.1
        emb = (emb / max(np.linalg.norm(emb), 1e-9)).astype(np.float32)
        if rng.random() < esr_fraction:
            count = int(rng.integers(1, min(64, len(ids)) + 1))
            chosen = rng.choice(ids, size=count, replace=False)
            out.append({"id": f"q{i}", "mode": "esr",
                        "tasks": [{"name": "rank", "user_embedding": emb.tolist()}],
                        "item_ids": [int(x) for x in chosen],
                        "topk": topk})
            continue
        req: dict = {"id": f"q{i}", "mode": "retrieve",
                     "tasks": [{"name": "main", "user_embedding": emb.tolist()}],
                     "nprobe": nprobe, "k0": k0, "topk": topk}
        if pairs and rng.random() < filter_fraction:
            expr = random_filter_expr(rng, pairs, max_depth=2, allow_not=False,
                                      absent_fraction=0.1)
            req["filter"] = format_filter(expr, vocab)
        out.append(req)
    return out


# --- staged pipeline replay (independent reference for full retrieve) -----------


def _replay_leaf_admits(bloom_index: BloomIndex, leaf: Leaf, slot: int) -> bool:
    qb = hash_positions(leaf.feature_id, leaf.value, bloom_index.params)
    return all(bitset.get_bit(bloom_index.planes[p], slot) for p in qb.set_bits)


def _replay_filter_slot(bloom_index: BloomIndex, expr: FilterExpr, slot: int) -> bool:
    if isinstance(expr, Leaf):
        return _replay_leaf_admits(bloom_index, expr, slot)
    if isinstance(expr, Not):
        return not _replay_filter_slot(bloom_index, expr.child, slot)
    if isinstance(expr, And):
        return all(_replay_filter_slot(bloom_index, c, slot) for c in expr.children)
    if isinstance(expr, Or):
        return any(_replay_filter_slot(bloom_index, c, slot) for c in expr.children)
    raise TypeError(f"not a filter node: {expr!r}")


def _replay_value_model(node: ValueModelConfig, scores: dict[str, float]) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, TaskScore):
        return float(scores[node.task])
    if isinstance(node, Add):
        return sum(_replay_value_model(a, scores) for a in node.args)
    if isinstance(node, Mul):
        out = 1.0
        for a in node.args:
            out *= _replay_value_model(a, scores)
        return out
    if isinstance(node, Min):
        return min(_replay_value_model(a, scores) for a in node.args)
    if isinstance(node, Max):
        return max(_replay_value_model(a, scores) for a in node.args)
    if isinstance(node, Sub):
        return _replay_value_model(node.left, scores) - _replay_value_model(node.right, scores)
    if isinstance(node, Div):
        den = _replay_value_model(node.den, scores)
        num = _replay_value_model(node.num, scores)
        return num / den
    if isinstance(node, Clamp):
        return min(max(_replay_value_model(node.arg, scores), node.lo), node.hi)
    if isinstance(node, If):
        ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
               ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
               "==": lambda a, b: a == b}
        left = _replay_value_model(node.cond.left, scores)
        right = _replay_value_model(node.cond.right, scores)
        then = _replay_value_model(node.then, scores)
        orelse = _replay_value_model(node.orelse, scores)
        return then if ops[node.cond.op](left, right) else orelse
    raise TypeError(f"not a formula node: {node!r}")


@dataclass
class ReplayResult:
    per_task_candidates: dict[str, list[int]]
    merged: list[int]
    task_scores: dict[str, dict[int, float]]
    final: list[tuple[int, float]]


def staged_replay(engine, req) -> ReplayResult:
    """Re-run each retrieve stage with straightforward, loop-level code.

    Probing, filtering, scanning, scoring, and aggregation are each recomputed
    from the engine's raw tensors using plain Python/NumPy, none of the fused
    paths. Discrete outputs should match retrieve() exactly; float scores to
    about 1e-12 relative (both sides accumulate in float64).
    """
    ivf = engine.ivf
    per_task: dict[str, list[int]] = {}
    for task in req.tasks:
        cscores = [(float(np.dot(ivf.centroids.vectors[c].astype(np.float64),
                                 np.asarray(task.user_embedding, dtype=np.float64))), c)
                   for c in range(ivf.n_clusters)]
        cscores.sort(key=lambda t: (-t[0], t[1]))
        # centroid scores here use a different f64 reduction than the engine;
        # equal probe sets require non-tied centroids, which random data gives
        probed = [c for _, c in cscores[: min(req.nprobe, ivf.n_clusters)]]
        qq = quantize_vector(task.user_embedding, ivf.items_q.params).astype(np.int64)
        candidates: list[tuple[int, int]] = []
        for c in probed:
            start, end = (int(x) for x in ivf.cluster_offsets[c])
            for slot in range(start, end):
                if not bitset.get_bit(ivf.valid_mask, slot):
                    continue
                if req.filter is not None and not _replay_filter_slot(
                        engine.bloom, req.filter, slot):
                    continue
                score = int(np.dot(ivf.items_q.data[slot].astype(np.int64), qq))
                candidates.append((score, int(ivf.item_ids[slot])))
        candidates.sort(key=lambda t: (-t[0], t[1]))
        per_task[task.task_name] = [item for _, item in candidates[: req.k0]]

    sets = [set(v) for v in per_task.values()]
    if req.merge == "union":
        merged = sorted(set.union(*sets))
    else:
        merged = sorted(set.intersection(*sets))

    task_scores: dict[str, dict[int, float]] = {}
    for task in req.tasks:
        scores: dict[int, float] = {}
        for item in merged:
            vec = engine.cache.lookup(item).astype(np.float64)
            scores[item] = _replay_score(engine.scorer, task, vec)
        task_scores[task.task_name] = scores

    vm = req.value_model if req.value_model is not None else engine.default_value_model
    if vm is None:
        vm = mean_of_tasks([t.task_name for t in req.tasks])
    finals = [(item, _replay_value_model(vm, {t: task_scores[t][item] for t in task_scores}))
              for item in merged]
    finals.sort(key=lambda t: (-t[1], t[0]))
    return ReplayResult(per_task_candidates=per_task, merged=merged,
                        task_scores=task_scores, final=finals[: req.topk])


def _replay_score(scorer, task, item_vec: np.ndarray) -> float:
    user = np.asarray(task.user_embedding, dtype=np.float64)
    if isinstance(scorer, MlpScorer):
        x = np.concatenate([user, item_vec])
        for w, b in scorer.hidden:
            x = np.maximum(w.astype(np.float64) @ x + b.astype(np.float64), 0.0)
        head = scorer.head_for(task.task_name)
        return float(head.weight.astype(np.float64) @ x + head.bias)
    if isinstance(scorer, MolScorer):
        dots = []
        for u_proj, i_proj in scorer.components:
            u_p = u_proj.astype(np.float64) @ user
            i_p = i_proj.astype(np.float64) @ item_vec
            dots.append(float(np.dot(u_p, i_p)))
        logits = (scorer.gate_weight.astype(np.float64)
                  @ np.concatenate([user, item_vec])
                  + scorer.gate_bias.astype(np.float64))
        logits -= logits.max()
        gates = np.exp(logits)
        gates /= gates.sum()
        return float(np.dot(gates, dots))
    raise TypeError(f"not a scorer: {scorer!r}")


# --- benchmark harness -----------------------------------------------------------


@dataclass
class BenchConfig:
    batch_size: int = 6
    warmup_batches: int = 50
    measured_batches: int = 100
    workload_id: str = "default"


@dataclass
class BenchReport:
    workload_id: str
    batches: int
    requests: int
    mean_us: float
    p50_us: float
    p99_us: float
    qps: float
    peak_bytes: int
    scanned_slots: int
    result_hash: str
    errors: int
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        """One CSV row in the pinned column order."""
        return {
            "workload_id": self.workload_id,
            "nprobe": self.extra.get("nprobe", ""),
            "topk": self.extra.get("topk", ""),
            "M": self.extra.get("M", ""),
            "K": self.extra.get("K", ""),
            "recall_at_k": self.extra.get("recall_at_k", ""),
            "fpr": self.extra.get("fpr", ""),
            "mean_us": round(self.mean_us, 1),
            "p99_us": round(self.p99_us, 1),
            "qps": round(self.qps, 2),
            "peak_bytes": self.peak_bytes,
            "scanned_slots": self.scanned_slots,
        }


CSV_COLUMNS = ["workload_id", "nprobe", "topk", "M", "K", "recall_at_k", "fpr",
               "mean_us", "p99_us", "qps", "peak_bytes", "scanned_slots"]


def _peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _response_hash(responses: list[dict]) -> str:
    stripped = [{k: v for k, v in r.items() if k != "stats"} for r in responses]
    blob = json.dumps(stripped, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def bench(engine, workload: list[dict], config: BenchConfig | None = None) -> BenchReport:
    """Warmed, timed batch replay of a wire workload against an engine.

    Warmup batches run first and are discarded; the measured batches produce
    latency percentiles, throughput, peak RSS, and a deterministic hash of the
    responses (timing stats excluded) for reproducibility checks.
    """
    config = config or BenchConfig()
    if not workload:
        raise EmptyWorkload("benchmark workload is empty")
    b = max(1, config.batch_size)

    def batch_at(i: int) -> list[dict]:
        return [workload[(i * b + j) % len(workload)] for j in range(b)]

    for i in range(config.warmup_batches):
        handle_batch(engine, batch_at(i))

    latencies = np.empty(config.measured_batches, dtype=np.float64)
    responses: list[dict] = []
    scanned = 0
    errors = 0
    t_start = time.perf_counter()
    for i in range(config.measured_batches):
        batch = batch_at(i)
        t0 = time.perf_counter()
        out = handle_batch(engine, batch)
        latencies[i] = (time.perf_counter() - t0) * 1e6
        for resp in out:
            if "error" in resp:
                errors += 1
            scanned += resp.get("stats", {}).get("scanned_slots", 0)
        responses.extend(out)
    wall = time.perf_counter() - t_start

    return BenchReport(
        workload_id=config.workload_id,
        batches=config.measured_batches,
        requests=config.measured_batches * b,
        mean_us=float(latencies.mean()),
        p50_us=float(np.percentile(latencies, 50)),
        p99_us=float(np.percentile(latencies, 99)),
        qps=config.measured_batches * b / wall if wall > 0 else 0.0,
        peak_bytes=_peak_rss_bytes(),
        scanned_slots=scanned,
        result_hash=_response_hash(responses),
        errors=errors)


def write_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
