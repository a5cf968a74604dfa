"""Request serving: NDJSON wire protocol, server-side batching, in-process shards.

Requests and responses are newline-delimited JSON. A request::

    {"id": "r1", "mode": "retrieve", "tasks": [{"name": "like",
     "user_embedding": [...]}], "filter": "country = \\"US\\"",
     "nprobe": 24, "k0": 1024, "topk": 100, "merge": "union"}

ESR mode ranks a provided id list instead: ``{"mode": "esr", "tasks": [...],
"item_ids": [...], "topk": 50}``. Responses carry the snapshot version they
were computed against, the ranked items with per-task scores, and per-stage
timing stats. Batching is a throughput knob only: a batch's responses are
element-wise identical to serving each request alone, and one malformed
request never poisons its batch (errors return in-band).

Hot swap replaces the engine reference atomically; in-flight requests finish
on the version they started with.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bloom import FilterStats
from .errors import FiltraError, MissingItem
from .filter_query import parse_filter
from .ivf import ScanStats
from .retrieval import (MERGE_UNION, Engine, RetrievalRequest, RetrievedItem,
                        RetrieveResult, StageTimings, TaskQuery, codesigned_search,
                        merge_candidates, retrieve)
from .scoring import score_items
from .value_model import mean_of_tasks, parse_value_model, value_model_eval

DEFAULT_NPROBE = 24
DEFAULT_K0 = 1024
DEFAULT_TOPK = 100
DEFAULT_BATCH_SIZE = 6
DEFAULT_BATCH_TIMEOUT_MS = 10.0


@dataclass
class ServerDefaults:
    nprobe: int = DEFAULT_NPROBE
    k0: int = DEFAULT_K0
    topk: int = DEFAULT_TOPK
    merge: str = MERGE_UNION


@dataclass(eq=False)
class ShardedEngine:
    """Engines over disjoint item partitions, searched fan-out/gather.

    Each shard returns its local top-k0 per task; the gathered set is scored
    once with the (replicated) scorer and value model. The reported snapshot
    version is the first shard's: shards deploy as one set.
    """

    shards: list[Engine]

    def __post_init__(self):
        if not self.shards:
            raise FiltraError("sharded engine needs at least one shard")

    @property
    def dim(self) -> int:
        return self.shards[0].dim

    @property
    def vocab(self):
        return self.shards[0].vocab

    @property
    def snapshot_version(self) -> int:
        return self.shards[0].snapshot_version

    def cache_lookup(self, item_ids: np.ndarray) -> np.ndarray:
        rows = np.empty((len(item_ids), self.shards[0].cache.dim), dtype=np.float32)
        for i, item_id in enumerate(item_ids):
            for shard in self.shards:
                row = shard.cache._index.get(int(item_id))
                if row is not None:
                    rows[i] = shard.cache.vectors[row]
                    break
            else:
                raise MissingItem(int(item_id))
        return rows


def _reduce_topk(ids: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def sharded_retrieve(se: ShardedEngine, req: RetrievalRequest) -> RetrieveResult:
    """Local co-designed search per shard, global reduce, single scoring pass."""
    timings = StageTimings()
    scan_stats = ScanStats()
    start = time.perf_counter()
    per_task: list[np.ndarray] = []
    for task in req.tasks:
        ids_parts, score_parts = [], []
        for shard in se.shards:
            cf = shard.compile(req.filter) if req.filter is not None else None
            local = codesigned_search(shard.ivf, shard.bloom, cf, task.user_embedding,
                                      req.nprobe, req.k0, scan_stats=scan_stats,
                                      timings=timings)
            ids_parts.append(local.item_ids)
            score_parts.append(local.scores)
        ids = np.concatenate(ids_parts) if ids_parts else np.empty(0, dtype=np.uint64)
        scores = np.concatenate(score_parts) if score_parts else np.empty(0, dtype=np.int32)
        top_ids, _ = _reduce_topk(ids, scores, req.k0)
        per_task.append(top_ids)
    merged = merge_candidates(per_task, req.merge)

    t0 = time.perf_counter()
    items: list[RetrievedItem] = []
    if len(merged):
        vectors = se.cache_lookup(merged)
        scorer = se.shards[0].scorer
        task_scores = {t.task_name: score_items(scorer, t.user_embedding, vectors,
                                                task=t.task_name)
                       for t in req.tasks}
        vm = req.value_model if req.value_model is not None else \
            se.shards[0].default_value_model
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
                          filter_stats=FilterStats())


# --- wire layer ---------------------------------------------------------------


def _parse_tasks(engine, spec) -> tuple[TaskQuery, ...]:
    if not isinstance(spec, list) or not spec:
        raise FiltraError("'tasks' must be a non-empty list")
    tasks = []
    for entry in spec:
        emb = np.asarray(entry["user_embedding"], dtype=np.float32)
        if emb.ndim != 1 or emb.shape[0] != engine.dim:
            raise FiltraError(
                f"user_embedding must have length {engine.dim}, got {emb.shape}")
        tasks.append(TaskQuery(task_name=str(entry["name"]), user_embedding=emb))
    return tuple(tasks)


def handle_request(engine: Engine | ShardedEngine, request: dict,
                   defaults: ServerDefaults | None = None) -> dict:
    """Serve one wire request; errors come back as an in-band error object."""
    defaults = defaults or ServerDefaults()
    req_id = request.get("id") if isinstance(request, dict) else None
    try:
        if not isinstance(request, dict):
            raise FiltraError("request must be a JSON object")
        mode = request.get("mode", "retrieve")
        tasks = _parse_tasks(engine, request.get("tasks"))
        if mode == "esr":
            item_ids = request.get("item_ids")
            if not isinstance(item_ids, list) or not item_ids:
                raise FiltraError("esr mode needs a non-empty 'item_ids' list")
            topk = int(request.get("topk", defaults.topk))
            shards = engine.shards if isinstance(engine, ShardedEngine) else [engine]
            primary = shards[0]
            if isinstance(engine, ShardedEngine):
                vectors = engine.cache_lookup(np.asarray(item_ids, dtype=np.uint64))
            else:
                vectors = primary.cache.batch(np.asarray(item_ids, dtype=np.uint64))
            t0 = time.perf_counter()
            scores = score_items(primary.scorer, tasks[0].user_embedding, vectors,
                                 task=tasks[0].task_name)
            ids = np.asarray(item_ids, dtype=np.uint64)
            order = np.lexsort((ids, -scores))[:topk]
            elapsed = int((time.perf_counter() - t0) * 1e6)
            return {
                "id": req_id,
                "snapshot_version": engine.snapshot_version,
                "items": [{"item_id": int(ids[i]), "score": float(scores[i]),
                           "task_scores": {tasks[0].task_name: float(scores[i])}}
                          for i in order],
                "stats": {"probe_us": 0, "filter_us": 0, "scan_us": 0,
                          "overarch_us": elapsed, "total_us": elapsed,
                          "scanned_slots": 0, "filter_slots": 0},
            }
        if mode != "retrieve":
            raise FiltraError(f"unknown mode {mode!r}")
        expr = None
        if request.get("filter"):
            expr = parse_filter(request["filter"], engine.vocab)
        vm = None
        if request.get("value_model") is not None:
            vm = parse_value_model(request["value_model"])
        rr = RetrievalRequest(
            tasks=tasks, filter=expr,
            nprobe=int(request.get("nprobe", defaults.nprobe)),
            k0=int(request.get("k0", defaults.k0)),
            topk=int(request.get("topk", defaults.topk)),
            merge=str(request.get("merge", defaults.merge)),
            value_model=vm)
        if isinstance(engine, ShardedEngine):
            result = sharded_retrieve(engine, rr)
        else:
            result = retrieve(engine, rr)
        stats = result.stats.as_dict()
        stats["scanned_slots"] = result.scan.slots_scanned
        stats["filter_slots"] = result.filter_stats.slots_evaluated
        return {
            "id": req_id,
            "snapshot_version": engine.snapshot_version,
            "items": [{"item_id": it.item_id, "score": it.score,
                       "task_scores": it.task_scores} for it in result.items],
            "stats": stats,
        }
    except (FiltraError, KeyError, ValueError, TypeError) as exc:
        return {"id": req_id,
                "snapshot_version": getattr(engine, "snapshot_version", None),
                "error": {"type": type(exc).__name__, "message": str(exc)}}


def handle_batch(engine: Engine | ShardedEngine, requests: list[dict],
                 defaults: ServerDefaults | None = None) -> list[dict]:
    """Serve a batch; element-wise identical to serving each request alone."""
    return [handle_request(engine, r, defaults) for r in requests]


class EngineHolder:
    """Atomic engine reference with replace-then-retire swap semantics."""

    def __init__(self, engine: Engine | ShardedEngine):
        self._lock = threading.Lock()
        self._engine = engine

    def get(self) -> Engine | ShardedEngine:
        with self._lock:
            return self._engine

    def swap(self, engine: Engine | ShardedEngine) -> None:
        with self._lock:
            self._engine = engine


def serve_stdio(holder: EngineHolder, in_stream, out_stream,
                batch_size: int = DEFAULT_BATCH_SIZE,
                defaults: ServerDefaults | None = None) -> int:
    """Read NDJSON requests, serve in order, write NDJSON responses.

    Lines are grouped into batches of ``batch_size`` (EOF flushes early);
    output order matches input order.
    """
    served = 0
    batch: list[dict | Exception] = []

    def flush():
        nonlocal served
        if not batch:
            return
        engine = holder.get()
        requests = [b for b in batch if not isinstance(b, Exception)]
        responses = iter(handle_batch(engine, requests, defaults))
        for entry in batch:
            if isinstance(entry, Exception):
                resp = {"id": None, "error": {"type": "JSONDecodeError",
                                              "message": str(entry)}}
            else:
                resp = next(responses)
            out_stream.write(json.dumps(resp) + "\n")
            served += 1
        out_stream.flush()
        batch.clear()

    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            batch.append(json.loads(line))
        except json.JSONDecodeError as exc:
            batch.append(exc)
        if len(batch) >= batch_size:
            flush()
    flush()
    return served


@dataclass
class _Pending:
    request: dict
    respond: object  # callable(dict) -> None


class BatchingServer:
    """TCP NDJSON server with flush-on-size-or-timeout batching.

    One reader thread per connection feeds a shared queue; a batcher thread
    flushes when ``batch_size`` requests are waiting or ``batch_timeout_ms``
    elapsed since the first queued request, whichever comes first; a worker
    pool executes batches against the current engine.
    """

    def __init__(self, holder: EngineHolder, host: str = "127.0.0.1", port: int = 0,
                 batch_size: int = DEFAULT_BATCH_SIZE,
                 batch_timeout_ms: float = DEFAULT_BATCH_TIMEOUT_MS,
                 workers: int = 4, defaults: ServerDefaults | None = None):
        self.holder = holder
        self.batch_size = max(1, batch_size)
        self.batch_timeout = max(0.0, batch_timeout_ms) / 1000.0
        self.defaults = defaults or ServerDefaults()
        self._queue: queue.Queue[_Pending | None] = queue.Queue()
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers))
        self._shutdown = threading.Event()

        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                write_lock = threading.Lock()

                def respond(payload: dict):
                    data = (json.dumps(payload) + "\n").encode("utf-8")
                    with write_lock:
                        try:
                            self.wfile.write(data)
                            self.wfile.flush()
                        except OSError:
                            pass

                for raw in self.rfile:
                    raw = raw.strip()
                    if not raw:
                        continue
                    try:
                        request = json.loads(raw)
                    except json.JSONDecodeError as exc:
                        respond({"id": None, "error": {"type": "JSONDecodeError",
                                                       "message": str(exc)}})
                        continue
                    outer._queue.put(_Pending(request=request, respond=respond))

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = self._server.server_address
        self._threads = [
            threading.Thread(target=self._server.serve_forever, daemon=True),
            threading.Thread(target=self._batch_loop, daemon=True),
        ]

    def start(self) -> None:
        for t in self._threads:
            t.start()

    def _batch_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                first = self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
            if first is None:
                break
            batch = [first]
            deadline = time.monotonic() + self.batch_timeout
            while len(batch) < self.batch_size:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    item = self._queue.get(timeout=remaining)
                except queue.Empty:
                    break
                if item is None:
                    break
                batch.append(item)
            engine = self.holder.get()
            self._pool.submit(self._run_batch, engine, batch)

    def _run_batch(self, engine, batch: list[_Pending]) -> None:
        responses = handle_batch(engine, [p.request for p in batch], self.defaults)
        for pending, resp in zip(batch, responses):
            pending.respond(resp)

    def stop(self) -> None:
        self._shutdown.set()
        self._queue.put(None)
        self._server.shutdown()
        self._server.server_close()
        self._pool.shutdown(wait=True)


def request_once(host: str, port: int, request: dict, timeout: float = 10.0) -> dict:
    """Send one request over TCP and read one NDJSON response (client helper)."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall((json.dumps(request) + "\n").encode("utf-8"))
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf.decode("utf-8"))
