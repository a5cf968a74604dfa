import io
import json
import threading
import time

import numpy as np
import pytest

from filtra.catalog import Catalog
from filtra.evaluation import brute_force_topk, random_requests
from filtra.retrieval import RetrievalRequest, TaskQuery, retrieve
from filtra.serve import (BatchingServer, EngineHolder, ShardedEngine,
                          handle_batch, handle_request, request_once, serve_stdio,
                          sharded_retrieve)
from filtra.snapshot import PublishConfig, build_engine

from conftest import make_catalog


@pytest.fixture(scope="module")
def served():
    cat = make_catalog(n_items=800, dim=10, n_clusters=8, seed=40)
    engine = build_engine(cat, PublishConfig(n_clusters=8, seed=40),
                          snapshot_version=3)
    return cat, engine


def wire_query(cat, i=0, **over):
    req = {"id": f"q{i}", "mode": "retrieve",
           "tasks": [{"name": "main", "user_embedding": cat.embeddings[i].tolist()}],
           "nprobe": 4, "k0": 64, "topk": 8}
    req.update(over)
    return req


def strip_stats(resp):
    return {k: v for k, v in resp.items() if k != "stats"}


def test_response_schema(served):
    cat, engine = served
    resp = handle_request(engine, wire_query(cat, filter="f1 = 3"))
    assert resp["id"] == "q0"
    assert resp["snapshot_version"] == 3
    assert len(resp["items"]) == 8
    item = resp["items"][0]
    assert set(item) == {"item_id", "score", "task_scores"}
    assert set(resp["stats"]) >= {"probe_us", "filter_us", "scan_us",
                                  "overarch_us", "total_us"}


def test_esr_mode(served):
    cat, engine = served
    ids = [int(x) for x in cat.item_ids[:20]]
    resp = handle_request(engine, {
        "id": "e1", "mode": "esr", "item_ids": ids, "topk": 5,
        "tasks": [{"name": "rank", "user_embedding": cat.embeddings[0].tolist()}]})
    assert len(resp["items"]) == 5
    scores = [it["score"] for it in resp["items"]]
    assert scores == sorted(scores, reverse=True)
    assert {it["item_id"] for it in resp["items"]} <= set(ids)


def test_malformed_requests_error_in_band(served):
    cat, engine = served
    bad = [
        {"id": "b1"},  # no tasks
        {"id": "b2", "mode": "nonsense",
         "tasks": [{"name": "t", "user_embedding": cat.embeddings[0].tolist()}]},
        {"id": "b3", "tasks": [{"name": "t", "user_embedding": [1.0, 2.0]}]},
        {"id": "b4", "mode": "esr",
         "tasks": [{"name": "t", "user_embedding": cat.embeddings[0].tolist()}]},
        {"id": "b5", "filter": "country = ",
         "tasks": [{"name": "t", "user_embedding": cat.embeddings[0].tolist()}]},
    ]
    for req in bad:
        resp = handle_request(engine, req)
        assert "error" in resp and resp["id"] == req["id"]
        assert "type" in resp["error"] and "message" in resp["error"]


def test_batch_of_one_equals_direct_call(served):
    cat, engine = served
    req = wire_query(cat, 5)
    assert strip_stats(handle_batch(engine, [req])[0]) == \
        strip_stats(handle_request(engine, req))


def test_batching_transparency_mixed(served):
    cat, engine = served
    reqs = random_requests(cat, 24, seed=99)
    batched = handle_batch(engine, reqs)
    sequential = [handle_request(engine, r) for r in reqs]
    assert [strip_stats(a) for a in batched] == [strip_stats(b) for b in sequential]


def test_batch_isolates_errors(served):
    cat, engine = served
    reqs = [wire_query(cat, 1), {"id": "broken"}, wire_query(cat, 2)]
    out = handle_batch(engine, reqs)
    assert "items" in out[0] and "items" in out[2]
    assert "error" in out[1]


# --- sharding -------------------------------------------------------------------


def partition(cat, shards):
    parts = []
    for s in range(shards):
        items = [it for i, it in enumerate(cat.items) if i % shards == s]
        parts.append(Catalog(items=items, dim=cat.dim,
                             feature_schema=cat.feature_schema))
    return parts


def test_shard_identity_s1(served):
    cat, engine = served
    se = ShardedEngine(shards=[engine])
    req = RetrievalRequest(tasks=(TaskQuery("main", cat.embeddings[9]),),
                           nprobe=4, k0=64, topk=8)
    a = sharded_retrieve(se, req)
    b = retrieve(engine, req)
    assert [(i.item_id, i.score) for i in a.items] == \
        [(i.item_id, i.score) for i in b.items]


def test_sharded_exhaustive_matches_global_brute_force(served):
    cat, _ = served
    shards = [build_engine(p, PublishConfig(n_clusters=4, seed=s), snapshot_version=3)
              for s, p in enumerate(partition(cat, 4))]
    se = ShardedEngine(shards=shards)
    rng = np.random.default_rng(41)
    for _ in range(5):
        q = cat.embeddings[int(rng.integers(len(cat)))]
        # k0 >= n so the f32 re-rank covers every item in every shard
        req = RetrievalRequest(tasks=(TaskQuery("main", q),),
                               nprobe=4, k0=len(cat), topk=25)
        got = sharded_retrieve(se, req)
        truth = brute_force_topk(cat, q, 25, score="f32_dot")
        assert [i.item_id for i in got.items] == [int(x) for x in truth.item_ids]
        assert [i.score for i in got.items] == [float(s) for s in truth.scores]


def test_sharded_deterministic(served):
    cat, _ = served
    shards = [build_engine(p, PublishConfig(n_clusters=3, seed=7), snapshot_version=1)
              for p in partition(cat, 4)]
    se = ShardedEngine(shards=shards)
    req = RetrievalRequest(tasks=(TaskQuery("main", cat.embeddings[2]),),
                           nprobe=2, k0=32, topk=10)
    a = sharded_retrieve(se, req)
    b = sharded_retrieve(se, req)
    assert [(i.item_id, i.score) for i in a.items] == \
        [(i.item_id, i.score) for i in b.items]


# --- hot swap --------------------------------------------------------------------


def test_hot_swap_never_mixes_versions(served):
    cat, engine_a = served
    cat_b = make_catalog(n_items=300, dim=10, n_clusters=4, seed=55)
    engine_b = build_engine(cat_b, PublishConfig(n_clusters=4, seed=55),
                            snapshot_version=9)
    holder = EngineHolder(engine_a)
    req = wire_query(cat, 3, nprobe=2, k0=16, topk=4)
    expected = {
        3: strip_stats(handle_request(engine_a, req)),
        9: strip_stats(handle_request(engine_b, req)),
    }
    mismatches = []
    done = threading.Event()

    def hammer():
        while not done.is_set():
            resp = handle_request(holder.get(), req)
            ver = resp["snapshot_version"]
            if strip_stats(resp) != expected[ver]:
                mismatches.append(resp)

    threads = [threading.Thread(target=hammer) for _ in range(4)]
    for t in threads:
        t.start()
    time.sleep(0.05)
    holder.swap(engine_b)
    time.sleep(0.05)
    done.set()
    for t in threads:
        t.join()
    assert not mismatches


# --- stdio and tcp ----------------------------------------------------------------


def test_serve_stdio_order_and_malformed(served):
    cat, engine = served
    lines = [json.dumps(wire_query(cat, 1)), "{this is not json",
             json.dumps(wire_query(cat, 2))]
    out = io.StringIO()
    n = serve_stdio(EngineHolder(engine), io.StringIO("\n".join(lines) + "\n"), out,
                    batch_size=2)
    assert n == 3
    responses = [json.loads(line) for line in out.getvalue().splitlines()]
    assert responses[0]["id"] == "q1"
    assert "error" in responses[1]
    assert responses[2]["id"] == "q2"


def test_tcp_server_round_trip(served):
    cat, engine = served
    server = BatchingServer(EngineHolder(engine), port=0, batch_size=4,
                            batch_timeout_ms=5.0, workers=2)
    server.start()
    try:
        host, port = server.address
        resp = request_once(host, port, wire_query(cat, 6))
        assert resp["id"] == "q6"
        assert len(resp["items"]) == 8
        direct = handle_request(engine, wire_query(cat, 6))
        assert strip_stats(resp) == strip_stats(direct)
    finally:
        server.stop()


def test_tcp_server_concurrent_clients(served):
    cat, engine = served
    server = BatchingServer(EngineHolder(engine), port=0, batch_size=6,
                            batch_timeout_ms=10.0, workers=4)
    server.start()
    results = {}
    try:
        host, port = server.address

        def client(i):
            results[i] = request_once(host, port, wire_query(cat, i))

        threads = [threading.Thread(target=client, args=(i,)) for i in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(10):
            assert results[i]["id"] == f"q{i}"
            direct = handle_request(engine, wire_query(cat, i))
            assert strip_stats(results[i]) == strip_stats(direct)
    finally:
        server.stop()
