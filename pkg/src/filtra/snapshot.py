"""Versioned binary snapshots: publish once, load atomically, serve immutably.

A snapshot is one file bundling everything a serving engine needs — centroids,
slot layout, quantized items, quantization parameters, signature planes,
validity mask, id table, embedding cache, scorer weights, default value-model
formula, and name dictionaries — so no reader can ever pair indexes from
different builds. Every section is independently checksummed (blake2b-64,
pinned by format_version) and all numeric payloads are little-endian;
publishing the same inputs twice yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bloom import BloomIndex, BloomParams, build_bloom
from .catalog import Catalog
from .errors import BadMagic, ChecksumMismatch, TruncatedSnapshot, VersionUnsupported, WriteError
from .filter_query import Vocabulary
from .ivf import Centroids, IvfIndex, build_ivf
from .quantize import QuantParams, QuantizedMatrix
from .retrieval import Engine
from .scoring import EmbeddingCache, Scorer, identity_mol, scorer_from_dict, scorer_to_dict
from .value_model import ValueModelConfig, parse_value_model, value_model_to_dict

MAGIC = b"FLTRSNP1"
FORMAT_VERSION = 1

SEC_CENTROIDS = 1
SEC_PERM = 2
SEC_CLUSTER_OFFSETS = 3
SEC_ITEMS_Q = 4
SEC_QUANT_PARAMS = 5
SEC_BLOOM_PLANES = 6
SEC_VALID_MASK = 7
SEC_ITEM_IDS = 8
SEC_EMBEDDING_CACHE = 9
SEC_SCORER = 10
SEC_VALUE_MODEL = 11
SEC_VOCAB = 12

_HEADER_FMT = "<8sIQIQQIIII"  # magic, fmt, snap_ver, dim, n_items, n_slots, k, M, K, scheme
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)
_TABLE_ENTRY_FMT = "<IQQQ"  # section_id, offset, length, checksum
_TABLE_ENTRY_SIZE = struct.calcsize(_TABLE_ENTRY_FMT)


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class PublishConfig:
    """Build knobs for one snapshot."""

    n_clusters: int | None = None           # None -> ceil(sqrt(n))
    bloom: BloomParams = field(default_factory=BloomParams)
    seed: int = 0
    scorer: Scorer | None = None             # None -> identity mixture (dot product)
    value_model: dict | None = None          # JSON formula; None -> per-request mean
    value_dict: dict[str, int] | None = None  # string value sidecar


@dataclass(frozen=True)
class SnapshotInfo:
    format_version: int
    snapshot_version: int
    dim: int
    n_items: int
    n_slots: int
    n_clusters: int
    bloom_m: int
    bloom_k: int
    hash_scheme_id: int
    sections: list[tuple[int, int, int, int]]  # (id, offset, length, checksum)


def build_engine(catalog: Catalog, config: PublishConfig | None = None,
                 item_tower_embeddings: np.ndarray | None = None,
                 snapshot_version: int = 0) -> Engine:
    """Assemble the full in-memory serving state from a catalog."""
    config = config or PublishConfig()
    ivf = build_ivf(catalog, k=config.n_clusters, seed=config.seed)
    bloom_index = build_bloom(ivf.slot_features(catalog.feature_lists), config.bloom,
                              n_slots=ivf.n_slots)
    cache_vectors = (np.asarray(item_tower_embeddings, dtype=np.float32)
                     if item_tower_embeddings is not None else catalog.embeddings)
    if len(cache_vectors) != len(catalog):
        raise WriteError("item tower embedding count does not match catalog")
    cache = EmbeddingCache(catalog.item_ids, cache_vectors)
    scorer = config.scorer if config.scorer is not None else identity_mol(cache.dim)
    vm: ValueModelConfig | None = (parse_value_model(config.value_model)
                                   if config.value_model is not None else None)
    vocab = Vocabulary.from_schema(catalog.feature_schema, config.value_dict)
    return Engine(ivf=ivf, bloom=bloom_index, cache=cache, scorer=scorer,
                  vocab=vocab, default_value_model=vm,
                  snapshot_version=snapshot_version)


def _engine_sections(engine: Engine) -> list[tuple[int, bytes]]:
    ivf = engine.ivf
    cache = engine.cache
    qp = ivf.items_q.params
    vocab_obj = {
        "features": {str(fid): name for fid, name in
                     sorted({v: k for k, v in engine.vocab.feature_ids.items()}.items())},
        "values": dict(sorted(engine.vocab.values.items())),
    }
    vm = engine.default_value_model
    return [
        (SEC_CENTROIDS, np.ascontiguousarray(ivf.centroids.vectors, dtype="<f4").tobytes()),
        (SEC_PERM, np.ascontiguousarray(ivf.perm, dtype="<i8").tobytes()),
        (SEC_CLUSTER_OFFSETS, np.ascontiguousarray(ivf.cluster_offsets, dtype="<u8").tobytes()),
        (SEC_ITEMS_Q, np.ascontiguousarray(ivf.items_q.data, dtype="i1").tobytes()),
        (SEC_QUANT_PARAMS, struct.pack("<dd", qp.global_min, qp.global_max)),
        (SEC_BLOOM_PLANES, np.ascontiguousarray(engine.bloom.planes, dtype="<u8").tobytes()),
        (SEC_VALID_MASK, np.ascontiguousarray(ivf.valid_mask, dtype="<u8").tobytes()),
        (SEC_ITEM_IDS, np.ascontiguousarray(ivf.item_ids, dtype="<u8").tobytes()),
        (SEC_EMBEDDING_CACHE,
         struct.pack("<IQ", cache.dim, len(cache))
         + np.ascontiguousarray(cache.item_ids, dtype="<u8").tobytes()
         + np.ascontiguousarray(cache.vectors, dtype="<f4").tobytes()),
        (SEC_SCORER, _json_bytes(scorer_to_dict(engine.scorer))),
        (SEC_VALUE_MODEL, _json_bytes(value_model_to_dict(vm) if vm is not None else None)),
        (SEC_VOCAB, _json_bytes(vocab_obj)),
    ]


def serialize_engine(engine: Engine, snapshot_version: int) -> bytes:
    sections = _engine_sections(engine)
    header = struct.pack(
        _HEADER_FMT, MAGIC, FORMAT_VERSION, snapshot_version, engine.ivf.dim,
        engine.ivf.n_items, engine.ivf.n_slots, engine.ivf.n_clusters,
        engine.bloom.params.m_bits, engine.bloom.params.k_hashes,
        engine.bloom.params.hash_scheme_id)
    table_size = 4 + len(sections) * _TABLE_ENTRY_SIZE
    offset = _HEADER_SIZE + table_size
    table = struct.pack("<I", len(sections))
    payload = b""
    for sec_id, data in sections:
        table += struct.pack(_TABLE_ENTRY_FMT, sec_id, offset, len(data), _checksum(data))
        payload += data
        offset += len(data)
    return header + table + payload


def publish(catalog: Catalog, path: str | Path, version: int,
            config: PublishConfig | None = None,
            item_tower_embeddings: np.ndarray | None = None) -> Engine:
    """Build every index and write the snapshot; returns the built engine.

    The write goes through a temporary sibling file and an atomic rename, so a
    crash never leaves a half-written snapshot at the target path.
    """
    engine = build_engine(catalog, config, item_tower_embeddings,
                          snapshot_version=version)
    blob = serialize_engine(engine, version)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        tmp.replace(path)
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    return engine


def _parse_header(blob: bytes) -> tuple[SnapshotInfo, int]:
    if len(blob) < _HEADER_SIZE + 4:
        raise TruncatedSnapshot("file shorter than header")
    magic, fmt, snap_ver, dim, n_items, n_slots, k, m, kh, scheme = struct.unpack_from(
        _HEADER_FMT, blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if fmt != FORMAT_VERSION:
        raise VersionUnsupported(fmt)
    (n_sections,) = struct.unpack_from("<I", blob, _HEADER_SIZE)
    table_end = _HEADER_SIZE + 4 + n_sections * _TABLE_ENTRY_SIZE
    if len(blob) < table_end:
        raise TruncatedSnapshot("file ends inside the section table")
    sections = []
    for i in range(n_sections):
        entry = struct.unpack_from(_TABLE_ENTRY_FMT, blob, _HEADER_SIZE + 4 + i * _TABLE_ENTRY_SIZE)
        sections.append(entry)
    info = SnapshotInfo(format_version=fmt, snapshot_version=snap_ver, dim=dim,
                        n_items=n_items, n_slots=n_slots, n_clusters=k,
                        bloom_m=m, bloom_k=kh, hash_scheme_id=scheme,
                        sections=sections)
    return info, table_end


def _sections_dict(blob: bytes, info: SnapshotInfo) -> dict[int, bytes]:
    out: dict[int, bytes] = {}
    for sec_id, offset, length, checksum in info.sections:
        if offset + length > len(blob):
            raise TruncatedSnapshot(f"section {sec_id} extends past end of file")
        data = blob[offset:offset + length]
        if _checksum(data) != checksum:
            raise ChecksumMismatch(sec_id)
        out[sec_id] = data
    return out


def describe(path: str | Path) -> dict:
    """Header and section table as a JSON-friendly dict (no payload reads)."""
    blob = Path(path).read_bytes()
    info, _ = _parse_header(blob)
    return {
        "format_version": info.format_version,
        "snapshot_version": info.snapshot_version,
        "dim": info.dim,
        "n_items": info.n_items,
        "n_slots": info.n_slots,
        "n_clusters": info.n_clusters,
        "bloom_m": info.bloom_m,
        "bloom_k": info.bloom_k,
        "hash_scheme_id": info.hash_scheme_id,
        "sections": [{"id": s, "offset": o, "length": n, "checksum": c}
                     for s, o, n, c in info.sections],
    }


def _array(data: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(data, dtype=dtype)
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise TruncatedSnapshot(f"section payload has {arr.size} elements, expected {expected}")
    return arr.reshape(shape).copy()


def load(path: str | Path) -> Engine:
    """Verify and materialize a snapshot into an immutable engine, one pass."""
    blob = Path(path).read_bytes()
    info, _ = _parse_header(blob)
    sections = _sections_dict(blob, info)
    try:
        centroids = Centroids(_array(sections[SEC_CENTROIDS], "<f4",
                                     (info.n_clusters, info.dim)))
        perm = _array(sections[SEC_PERM], "<i8", (info.n_slots,))
        offsets = _array(sections[SEC_CLUSTER_OFFSETS], "<u8", (info.n_clusters, 2))
        items_q = _array(sections[SEC_ITEMS_Q], "i1", (info.n_slots, info.dim))
        gmin, gmax = struct.unpack("<dd", sections[SEC_QUANT_PARAMS])
        planes = _array(sections[SEC_BLOOM_PLANES], "<u8",
                        (info.bloom_m, (info.n_slots + 63) // 64))
        valid = _array(sections[SEC_VALID_MASK], "<u8", ((info.n_slots + 63) // 64,))
        item_ids = _array(sections[SEC_ITEM_IDS], "<u8", (info.n_slots,))
        cache_blob = sections[SEC_EMBEDDING_CACHE]
        cache_dim, n_cache = struct.unpack_from("<IQ", cache_blob, 0)
        ids_off = struct.calcsize("<IQ")
        vec_off = ids_off + 8 * n_cache
        cache_ids = _array(cache_blob[ids_off:vec_off], "<u8", (n_cache,))
        cache_vecs = _array(cache_blob[vec_off:], "<f4", (n_cache, cache_dim))
        scorer = scorer_from_dict(json.loads(sections[SEC_SCORER].decode("utf-8")))
        vm_spec = json.loads(sections[SEC_VALUE_MODEL].decode("utf-8"))
        vocab_spec = json.loads(sections[SEC_VOCAB].decode("utf-8"))
    except KeyError as exc:
        raise TruncatedSnapshot(f"missing section {exc}") from exc
    except (struct.error, ValueError) as exc:
        raise TruncatedSnapshot(str(exc)) from exc

    qp = QuantParams(global_min=gmin, global_max=gmax)
    inv_perm = np.full(info.n_items, -1, dtype=np.int64)
    real = perm >= 0
    inv_perm[perm[real]] = np.flatnonzero(real)
    ivf = IvfIndex(centroids=centroids, perm=perm, inv_perm=inv_perm,
                   cluster_offsets=offsets,
                   items_q=QuantizedMatrix(data=items_q, params=qp),
                   valid_mask=valid, item_ids=item_ids)
    params = BloomParams(m_bits=info.bloom_m, k_hashes=info.bloom_k,
                         hash_scheme_id=info.hash_scheme_id)
    bloom_index = BloomIndex(params=params, planes=planes, n_slots=info.n_slots)
    cache = EmbeddingCache(cache_ids, cache_vecs)
    vocab = Vocabulary(feature_ids={name: int(fid) for fid, name in
                                    vocab_spec.get("features", {}).items()},
                       values={k: int(v) for k, v in vocab_spec.get("values", {}).items()})
    vm = parse_value_model(vm_spec) if vm_spec is not None else None
    return Engine(ivf=ivf, bloom=bloom_index, cache=cache, scorer=scorer,
                  vocab=vocab, default_value_model=vm,
                  snapshot_version=info.snapshot_version)
