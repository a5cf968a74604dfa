"""filtra: a single-process filtered-ANN retrieval engine.

Int8 IVF nearest-neighbor search fused with bloom-signature feature filtering
over a shared cluster-major slot space, re-ranked by learned scorers with
multi-task aggregation, published and served as one versioned binary snapshot.
"""

from .bloom import BloomIndex, BloomParams, QueryBloom, bloom_fpr_theoretical, \
    build_bloom, hash_positions
from .catalog import Catalog, FeatureValue, Item, load_catalog, save_catalog, synth_catalog
from .exact_filter import build_forward, build_inverted, forward_eval, inverted_eval
from .filter_query import CompiledFilter, Vocabulary, compile_filter, eval_compiled, \
    format_filter, parse_filter
from .ivf import IvfIndex, TopkResult, build_ivf, kmeans_pp_init, kmeans_train, \
    probe_centroids, search, search_clusters
from .quantize import QuantParams, QuantizedMatrix, compute_quant_params, int8_dot, \
    quantize_matrix, quantize_value
from .retrieval import Engine, RetrievalRequest, TaskQuery, codesigned_search, retrieve
from .scoring import EmbeddingCache, MlpScorer, MolScorer, esr_rank, identity_mol
from .snapshot import PublishConfig, build_engine, describe, load, publish
from .value_model import parse_value_model, value_model_eval

__version__ = "0.1.0"

__all__ = [
    "BloomIndex", "BloomParams", "Catalog", "CompiledFilter", "EmbeddingCache",
    "Engine", "FeatureValue", "Item", "IvfIndex", "MlpScorer", "MolScorer",
    "PublishConfig", "QuantParams", "QuantizedMatrix", "QueryBloom",
    "RetrievalRequest", "TaskQuery", "TopkResult", "Vocabulary",
    "bloom_fpr_theoretical", "build_bloom", "build_engine", "build_forward",
    "build_inverted", "build_ivf", "codesigned_search", "compile_filter",
    "compute_quant_params", "describe", "esr_rank", "eval_compiled",
    "format_filter", "forward_eval", "hash_positions", "identity_mol",
    "int8_dot", "inverted_eval", "kmeans_pp_init", "kmeans_train",
    "load", "load_catalog", "parse_filter", "parse_value_model",
    "probe_centroids", "publish", "quantize_matrix", "quantize_value",
    "retrieve", "save_catalog", "search", "search_clusters", "synth_catalog",
    "value_model_eval",
]
