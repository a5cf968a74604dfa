"""Candidate re-ranking: embedding cache and learned scorers.

Candidate generation runs on Int8 rows; re-ranking always reads full-precision
item embeddings from a cache precomputed at publish time. Two scorer shapes
are supported: an MLP over the concatenated user/item embedding with per-task
linear heads, and a mixture-of-logits similarity (gated sum of component dot
products between projected user/item sub-embeddings). Weights are stored as
float32; all arithmetic accumulates in float64 so a score depends only on the
(user, item) pair, not on how candidates were batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingItem
from .vecmath import dot_rows


class EmbeddingCache:
    """Total item_id -> float32 vector lookup table."""

    def __init__(self, item_ids: np.ndarray, vectors: np.ndarray):
        self.item_ids = np.asarray(item_ids, dtype=np.uint64)
        self.vectors = np.asarray(vectors, dtype=np.float32)
        if len(self.item_ids) != len(self.vectors):
            raise ValueError("ids and vectors disagree on length")
        self._index = {int(i): row for row, i in enumerate(self.item_ids)}

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def lookup(self, item_id: int) -> np.ndarray:
        row = self._index.get(int(item_id))
        if row is None:
            raise MissingItem(int(item_id))
        return self.vectors[row]

    def batch(self, item_ids: np.ndarray) -> np.ndarray:
        rows = np.empty(len(item_ids), dtype=np.int64)
        for i, item_id in enumerate(item_ids):
            row = self._index.get(int(item_id))
            if row is None:
                raise MissingItem(int(item_id))
            rows[i] = row
        return self.vectors[rows]


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray  # f32 (in,)
    bias: float


@dataclass(frozen=True)
class MlpScorer:
    """ReLU MLP on user‖item with a per-task (or shared) linear output head."""

    hidden: tuple[tuple[np.ndarray, np.ndarray], ...]  # [(W (out,in), b (out,)), ...]
    heads: dict[str, LinearHead]
    shared_head: LinearHead | None = None

    def head_for(self, task: str) -> LinearHead:
        head = self.heads.get(task, self.shared_head)
        if head is None:
            raise KeyError(f"no output head for task {task!r}")
        return head

    def score(self, user: np.ndarray, items: np.ndarray, task: str = "") -> np.ndarray:
        items = np.atleast_2d(np.asarray(items, dtype=np.float32))
        x = np.concatenate(
            [np.broadcast_to(np.asarray(user, dtype=np.float64), (items.shape[0], len(user))),
             items.astype(np.float64)], axis=1)
        for w, b in self.hidden:
            x = x @ w.astype(np.float64).T + b.astype(np.float64)
            np.maximum(x, 0.0, out=x)
        head = self.head_for(task)
        return x @ head.weight.astype(np.float64) + float(head.bias)


@dataclass(frozen=True)
class MolScorer:
    """Mixture of logits: softmax-gated sum of component dot products.

    score(u, i) = sum_p softmax(Wg·(u‖i) + bg)_p * <U_p u, I_p i>. Component
    projections are shared across tasks; task differences arrive through the
    per-task user embeddings.
    """

    components: tuple[tuple[np.ndarray, np.ndarray], ...]  # [(U_p (d_p,du), I_p (d_p,di))]
    gate_weight: np.ndarray  # f32 (P, du+di)
    gate_bias: np.ndarray    # f32 (P,)

    def score(self, user: np.ndarray, items: np.ndarray, task: str = "") -> np.ndarray:
        items64 = np.atleast_2d(np.asarray(items, dtype=np.float32)).astype(np.float64)
        user64 = np.asarray(user, dtype=np.float32).astype(np.float64)
        n = items64.shape[0]
        p = len(self.components)
        dots = np.empty((n, p), dtype=np.float64)
        for j, (u_proj, i_proj) in enumerate(self.components):
            u_p = u_proj.astype(np.float64) @ user64
            i_p = items64 @ i_proj.astype(np.float64).T
            # same per-row reduction as dot_rows, so an identity component is
            # bit-equal to the plain dot product
            dots[:, j] = np.sum(i_p * u_p, axis=1)
        logits = (np.concatenate([np.broadcast_to(user64, (n, len(user64))),
                                  items64], axis=1)
                  @ self.gate_weight.astype(np.float64).T
                  + self.gate_bias.astype(np.float64))
        logits -= logits.max(axis=1, keepdims=True)
        gates = np.exp(logits)
        gates /= gates.sum(axis=1, keepdims=True)
        return np.sum(gates * dots, axis=1)


Scorer = MlpScorer | MolScorer


def identity_mol(dim: int) -> MolScorer:
    """Single-component mixture with identity projections: the plain dot product."""
    eye = np.eye(dim, dtype=np.float32)
    return MolScorer(components=((eye, eye),),
                     gate_weight=np.zeros((1, 2 * dim), dtype=np.float32),
                     gate_bias=np.zeros(1, dtype=np.float32))


def score_items(scorer: Scorer, user: np.ndarray, items: np.ndarray,
                task: str = "") -> np.ndarray:
    return scorer.score(user, items, task=task)


def score_by_ids(scorer: Scorer, cache: EmbeddingCache, user: np.ndarray,
                 item_ids: np.ndarray, tasks: list[str]) -> dict[str, np.ndarray]:
    """Per-task scores for a candidate id list, embeddings from the cache."""
    vectors = cache.batch(np.asarray(item_ids, dtype=np.uint64))
    return {task: scorer.score(user, vectors, task=task) for task in tasks}


def esr_rank(cache: EmbeddingCache, scorer: Scorer, user: np.ndarray,
             item_ids: list[int] | np.ndarray, topk: int,
             task: str = "") -> list[tuple[int, float]]:
    """Early-stage ranking: batch cache lookup, score, sort, truncate."""
    ids = np.asarray(item_ids, dtype=np.uint64)
    vectors = cache.batch(ids)
    scores = score_items(scorer, user, vectors, task=task)
    order = np.lexsort((ids, -scores))[:topk]
    return [(int(ids[i]), float(scores[i])) for i in order]


# --- serialization (nested-list JSON round trips float32 exactly) ------------


def _arr(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float32).tolist()


def scorer_to_dict(scorer: Scorer) -> dict:
    if isinstance(scorer, MlpScorer):
        out: dict = {
            "kind": "mlp",
            "hidden": [{"w": _arr(w), "b": _arr(b)} for w, b in scorer.hidden],
            "heads": {name: {"w": _arr(h.weight), "b": float(np.float32(h.bias))}
                      for name, h in sorted(scorer.heads.items())},
        }
        if scorer.shared_head is not None:
            out["shared_head"] = {"w": _arr(scorer.shared_head.weight),
                                  "b": float(np.float32(scorer.shared_head.bias))}
        return out
    if isinstance(scorer, MolScorer):
        return {
            "kind": "mol",
            "components": [{"u": _arr(u), "i": _arr(i)} for u, i in scorer.components],
            "gate": {"w": _arr(scorer.gate_weight), "b": _arr(scorer.gate_bias)},
        }
    raise TypeError(f"not a scorer: {scorer!r}")


def scorer_from_dict(spec: dict) -> Scorer:
    kind = spec.get("kind")
    if kind == "mlp":
        hidden = tuple((np.asarray(layer["w"], dtype=np.float32),
                        np.asarray(layer["b"], dtype=np.float32))
                       for layer in spec.get("hidden", []))
        heads = {name: LinearHead(np.asarray(h["w"], dtype=np.float32), float(h["b"]))
                 for name, h in spec.get("heads", {}).items()}
        shared = spec.get("shared_head")
        shared_head = (LinearHead(np.asarray(shared["w"], dtype=np.float32), float(shared["b"]))
                       if shared else None)
        return MlpScorer(hidden=hidden, heads=heads, shared_head=shared_head)
    if kind == "mol":
        components = tuple((np.asarray(c["u"], dtype=np.float32),
                            np.asarray(c["i"], dtype=np.float32))
                           for c in spec["components"])
        return MolScorer(components=components,
                         gate_weight=np.asarray(spec["gate"]["w"], dtype=np.float32),
                         gate_bias=np.asarray(spec["gate"]["b"], dtype=np.float32))
    raise ValueError(f"unknown scorer kind {kind!r}")
