"""Command-line entry points.

Subcommands: ``build`` (catalog -> snapshot), ``serve`` (NDJSON loop over TCP
and/or stdin), ``query`` (one-shot request), ``bench``, ``eval`` (recall / fpr
experiments), and ``describe`` (snapshot header dump). Runtime errors exit 1
with a JSON error object on stderr; usage errors exit 2. ``FILTRA_LOG``
selects the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, snapshot
from .bloom import BloomParams
from .catalog import default_features_spec, load_catalog, load_dictionary, synth_catalog
from .errors import FiltraError
from .serve import (DEFAULT_BATCH_SIZE, DEFAULT_BATCH_TIMEOUT_MS, BatchingServer,
                    EngineHolder, ShardedEngine, handle_request, serve_stdio)

logger = logging.getLogger("filtra")


def _setup_logging() -> None:
    level = os.environ.get("FILTRA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_engine(paths: list[str]):
    engines = [snapshot.load(p) for p in paths]
    if len(engines) == 1:
        return engines[0]
    return ShardedEngine(shards=engines)


def _read_catalog(args) -> "tuple":
    schema = None
    if args.feature_names:
        schema = {int(v): k for k, v in load_dictionary(args.feature_names).items()}
    values = load_dictionary(args.values) if args.values else None
    cat = load_catalog(args.catalog, format=args.format,
                       normalize=not args.no_normalize, feature_schema=schema)
    return cat, values


def cmd_build(args) -> int:
    catalog, values = _read_catalog(args)
    scorer = None
    if args.scorer:
        from .scoring import scorer_from_dict
        scorer = scorer_from_dict(json.loads(Path(args.scorer).read_text()))
    vm = json.loads(Path(args.value_model).read_text()) if args.value_model else None
    config = snapshot.PublishConfig(
        n_clusters=args.clusters, bloom=BloomParams(m_bits=args.bits, k_hashes=args.hashes),
        seed=args.seed, scorer=scorer, value_model=vm, value_dict=values)
    if args.shards <= 1:
        snapshot.publish(catalog, args.out, version=args.version, config=config)
        print(json.dumps({"snapshot": args.out, "items": len(catalog),
                          "version": args.version}))
        return 0
    # round-robin partition; each shard becomes its own snapshot file
    from .catalog import Catalog
    for s in range(args.shards):
        items = [it for i, it in enumerate(catalog.items) if i % args.shards == s]
        part = Catalog(items=items, dim=catalog.dim, feature_schema=catalog.feature_schema)
        out = f"{args.out}.shard{s}"
        snapshot.publish(part, out, version=args.version, config=config)
        print(json.dumps({"snapshot": out, "items": len(part), "version": args.version}))
    return 0


def cmd_synth(args) -> int:
    from .catalog import save_catalog
    cat = synth_catalog(args.items, args.dim, args.clusters,
                        default_features_spec(), seed=args.seed)
    save_catalog(cat, args.out, format=args.format)
    print(json.dumps({"catalog": args.out, "items": len(cat), "dim": cat.dim}))
    return 0


def cmd_describe(args) -> int:
    print(json.dumps(snapshot.describe(args.snapshot), indent=2))
    return 0


def cmd_query(args) -> int:
    engine = _load_engine(args.snapshot)
    request = json.loads(Path(args.req).read_text() if args.req != "-"
                         else sys.stdin.read())
    print(json.dumps(handle_request(engine, request)))
    return 0


def cmd_serve(args) -> int:
    holder = EngineHolder(_load_engine(args.snapshot))
    if args.stdin:
        return 0 if serve_stdio(holder, sys.stdin, sys.stdout,
                                batch_size=args.batch) >= 0 else 1
    server = BatchingServer(holder, host=args.host, port=args.port,
                            batch_size=args.batch,
                            batch_timeout_ms=args.batch_timeout_ms,
                            workers=args.workers)
    server.start()
    print(json.dumps({"listening": list(server.address)}), flush=True)
    watched = [(Path(p), Path(p).stat().st_mtime) for p in args.snapshot]
    try:
        while True:
            time.sleep(args.watch_interval)
            if args.watch_interval <= 0:
                continue
            changed = False
            for i, (path, mtime) in enumerate(watched):
                current = path.stat().st_mtime
                if current != mtime:
                    watched[i] = (path, current)
                    changed = True
            if changed:
                holder.swap(_load_engine(args.snapshot))
                logger.info("snapshot reloaded")
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_bench(args) -> int:
    engine = _load_engine(args.snapshot)
    if args.workload:
        workload = [json.loads(line) for line in
                    Path(args.workload).read_text().splitlines() if line.strip()]
    else:
        catalog, _ = _read_catalog(args)
        workload = evaluation.random_requests(
            catalog, args.requests, seed=args.seed, nprobe=args.nprobe,
            k0=args.k0, topk=args.topk)
    report = evaluation.bench(engine, workload, evaluation.BenchConfig(
        batch_size=args.batch, warmup_batches=args.warmup,
        measured_batches=args.batches, workload_id=args.workload_id))
    report.extra.update({"nprobe": args.nprobe, "topk": args.topk})
    if args.out:
        evaluation.write_json(args.out + ".json", report.__dict__)
        evaluation.write_csv(args.out + ".csv", [report.as_row()])
    print(json.dumps(report.as_row()))
    return 0


def cmd_eval_recall(args) -> int:
    catalog = synth_catalog(args.items, args.dim, args.clusters,
                            default_features_spec(), seed=args.seed)
    engine = snapshot.build_engine(catalog, snapshot.PublishConfig(
        n_clusters=args.clusters, seed=args.seed))
    rng = np.random.default_rng(args.seed + 1)
    queries = catalog.embeddings[rng.integers(0, len(catalog), size=args.queries)]
    queries = queries + rng.standard_normal(queries.shape).astype(np.float32) * 0.05
    rows = []
    from .ivf import search
    for nprobe in (int(x) for x in args.nprobes.split(",")):
        recalls = []
        for q in queries:
            truth = evaluation.brute_force_topk(catalog, q, args.topk)
            res = search(engine.ivf, q, nprobe=nprobe, topk=args.topk)
            recalls.append(evaluation.recall_at_k(res.item_ids, truth.item_ids, args.topk))
        rows.append({"workload_id": "recall_sweep", "nprobe": nprobe, "topk": args.topk,
                     "recall_at_k": round(float(np.mean(recalls)), 6)})
        print(json.dumps(rows[-1]))
    if args.out:
        evaluation.write_csv(args.out + ".csv", rows)
        evaluation.write_json(args.out + ".json", rows)
    return 0


def cmd_eval_fpr(args) -> int:
    from .bloom import bloom_fpr_theoretical, build_bloom
    from .exact_filter import build_forward
    rng = np.random.default_rng(args.seed)
    slot_features = [[(int(f), int(v)) for f, v in
                      zip(rng.integers(0, 1 << 32, size=args.values_per_item),
                          rng.integers(0, 1 << 32, size=args.values_per_item))]
                     for _ in range(args.items)]
    forward = build_forward(slot_features)
    leaves = [(int(f), int(v)) for f, v in
              zip(rng.integers(1 << 33, 1 << 34, size=args.leaves),
                  rng.integers(0, 1 << 32, size=args.leaves))]
    rows = []
    for bits in (int(x) for x in args.bits.split(",")):
        params = BloomParams(m_bits=bits, k_hashes=args.hashes)
        index = build_bloom(slot_features, params)
        report = evaluation.fpr_measure(index, forward, leaves)
        theory = bloom_fpr_theoretical(params, args.values_per_item)
        rows.append({"workload_id": "fpr", "M": bits, "K": args.hashes,
                     "fpr": report.rate, "fpr_theoretical": theory,
                     "trials": report.evaluated})
        print(json.dumps(rows[-1]))
    if args.out:
        evaluation.write_csv(args.out + ".csv", rows)
        evaluation.write_json(args.out + ".json", rows)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="filtra",
                                  description="Filtered-ANN retrieval engine")
    sub = top.add_subparsers(dest="command", required=True)

    def add_catalog_args(p):
        p.add_argument("--catalog", required=False, help="catalog file")
        p.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
        p.add_argument("--feature-names", help="sidecar: name<TAB>feature_id")
        p.add_argument("--values", help="sidecar: string<TAB>value")
        p.add_argument("--no-normalize", action="store_true",
                       help="skip L2 normalization at ingestion")

    p = sub.add_parser("build", help="build a snapshot from a catalog")
    add_catalog_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--bits", type=int, default=1024, help="bloom signature bits")
    p.add_argument("--hashes", type=int, default=5, help="bloom hash functions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--version", type=int, default=1)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--scorer", help="scorer weights JSON file")
    p.add_argument("--value-model", help="value model JSON file")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synth", help="generate a synthetic catalog")
    p.add_argument("--items", type=int, default=10000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("describe", help="dump a snapshot header as JSON")
    p.add_argument("--snapshot", required=True)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("query", help="serve one request and exit")
    p.add_argument("--snapshot", action="append", required=True)
    p.add_argument("--req", default="-", help="request JSON file, '-' for stdin")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="NDJSON serving loop")
    p.add_argument("--snapshot", action="append", required=True,
                   help="snapshot file (repeat for in-process shards)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7433)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--batch-timeout-ms", type=float, default=DEFAULT_BATCH_TIMEOUT_MS)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--stdin", action="store_true", help="serve stdin/stdout instead of TCP")
    p.add_argument("--watch-interval", type=float, default=0.0, dest="watch_interval",
                   help="seconds between snapshot mtime checks (0 disables hot reload)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="benchmark an engine against a workload")
    add_catalog_args(p)
    p.add_argument("--snapshot", action="append", required=True)
    p.add_argument("--workload", help="NDJSON request file (default: synthesized)")
    p.add_argument("--requests", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nprobe", type=int, default=24)
    p.add_argument("--k0", type=int, default=1024)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--workload-id", default="bench")
    p.add_argument("--out", help="write <out>.json and <out>.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="evaluation experiments")
    esub = p.add_subparsers(dest="experiment", required=True)

    e = esub.add_parser("recall", help="recall@k vs nprobe on synthetic data")
    e.add_argument("--items", type=int, default=100000)
    e.add_argument("--dim", type=int, default=32)
    e.add_argument("--clusters", type=int, default=316)
    e.add_argument("--queries", type=int, default=50)
    e.add_argument("--topk", type=int, default=1024)
    e.add_argument("--nprobes", default="1,2,4,8,16,32,64")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_recall)

    e = esub.add_parser("fpr", help="measured vs theoretical false positive rate")
    e.add_argument("--items", type=int, default=20000)
    e.add_argument("--values-per-item", type=int, default=10)
    e.add_argument("--leaves", type=int, default=500)
    e.add_argument("--bits", default="512,1024,2048")
    e.add_argument("--hashes", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_fpr)

    return top


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FiltraError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": {"type": "OSError", "message": str(exc)}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
