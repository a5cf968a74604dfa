import numpy as np
import pytest

from filtra.errors import DivByZero, MissingItem, UnknownTask
from filtra.scoring import (EmbeddingCache, LinearHead, MlpScorer, MolScorer, esr_rank,
                            identity_mol, scorer_from_dict, scorer_to_dict)
from filtra.value_model import (mean_of_tasks, parse_value_model, value_model_eval,
                                value_model_to_dict)
from filtra.vecmath import dot_rows


def make_cache(n=20, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.arange(100, 100 + n, dtype=np.uint64)
    return EmbeddingCache(ids, rng.standard_normal((n, dim)).astype(np.float32)), rng


# --- embedding cache -----------------------------------------------------------


def test_cache_lookup_exact_row():
    cache, _ = make_cache()
    assert np.array_equal(cache.lookup(105), cache.vectors[5])
    batch = cache.batch(np.array([101, 119, 101], dtype=np.uint64))
    assert np.array_equal(batch[0], cache.vectors[1])
    assert np.array_equal(batch[1], cache.vectors[19])
    assert np.array_equal(batch[2], cache.vectors[1])


def test_cache_missing_item():
    cache, _ = make_cache()
    with pytest.raises(MissingItem):
        cache.lookup(9999)
    with pytest.raises(MissingItem):
        cache.batch(np.array([100, 9999], dtype=np.uint64))


# --- MLP scorer ------------------------------------------------------------------


def test_mlp_zero_weights_zero_scores():
    dim = 4
    scorer = MlpScorer(
        hidden=((np.zeros((3, 2 * dim), dtype=np.float32), np.zeros(3, dtype=np.float32)),),
        heads={}, shared_head=LinearHead(np.zeros(3, dtype=np.float32), 0.0))
    out = scorer.score(np.ones(dim, dtype=np.float32),
                       np.ones((5, dim), dtype=np.float32), task="x")
    assert np.array_equal(out, np.zeros(5))


def test_mlp_dot_product_head_recovers_ordering():
    cache, rng = make_cache(n=50, dim=8)
    user = rng.standard_normal(8).astype(np.float32)
    # head weight = [0 (user part), user (item part)] makes score = user . item
    w = np.concatenate([np.zeros(8, dtype=np.float32), user])
    scorer = MlpScorer(hidden=(), heads={}, shared_head=LinearHead(w, 0.0))
    scores = scorer.score(user, cache.vectors, task="any")
    dots = cache.vectors.astype(np.float64) @ user.astype(np.float64)
    assert np.allclose(scores, dots, rtol=1e-12, atol=1e-12)


def test_mlp_matches_independent_forward_pass(rng):
    dim_u, dim_i, hidden = 5, 7, 11
    w1 = rng.standard_normal((hidden, dim_u + dim_i)).astype(np.float32)
    b1 = rng.standard_normal(hidden).astype(np.float32)
    w2 = rng.standard_normal((4, hidden)).astype(np.float32)
    b2 = rng.standard_normal(4).astype(np.float32)
    head = LinearHead(rng.standard_normal(4).astype(np.float32), 0.25)
    scorer = MlpScorer(hidden=((w1, b1), (w2, b2)), heads={"t": head})
    user = rng.standard_normal(dim_u).astype(np.float32)
    items = rng.standard_normal((5, dim_i)).astype(np.float32)
    got = scorer.score(user, items, task="t")
    for i in range(5):
        x = np.concatenate([user, items[i]]).astype(np.float64)
        x = np.maximum(w1.astype(np.float64) @ x + b1, 0.0)
        x = np.maximum(w2.astype(np.float64) @ x + b2, 0.0)
        want = head.weight.astype(np.float64) @ x + head.bias
        assert got[i] == pytest.approx(want, rel=1e-5)


def test_mlp_per_task_heads():
    w_a = np.array([1.0, 0.0], dtype=np.float32)
    w_b = np.array([0.0, 1.0], dtype=np.float32)
    scorer = MlpScorer(hidden=(), heads={"a": LinearHead(w_a, 0.0),
                                         "b": LinearHead(w_b, 0.0)})
    user = np.array([3.0], dtype=np.float32)
    items = np.array([[5.0]], dtype=np.float32)
    assert scorer.score(user, items, task="a")[0] == 3.0
    assert scorer.score(user, items, task="b")[0] == 5.0
    with pytest.raises(KeyError):
        scorer.score(user, items, task="c")


# --- MoL scorer -------------------------------------------------------------------


def test_identity_mol_is_exact_dot_product():
    cache, rng = make_cache(n=30, dim=6)
    user = rng.standard_normal(6).astype(np.float32)
    scorer = identity_mol(6)
    got = scorer.score(user, cache.vectors)
    want = dot_rows(cache.vectors, user)
    assert np.array_equal(got, want)  # bit-exact


def test_mol_gates_are_softmax_normalized(rng):
    p, dim = 3, 4
    comps = tuple((rng.standard_normal((2, dim)).astype(np.float32),
                   rng.standard_normal((2, dim)).astype(np.float32)) for _ in range(p))
    gate_w = rng.standard_normal((p, 2 * dim)).astype(np.float32)
    gate_b = rng.standard_normal(p).astype(np.float32)
    scorer = MolScorer(components=comps, gate_weight=gate_w, gate_bias=gate_b)
    user = rng.standard_normal(dim).astype(np.float32)
    items = rng.standard_normal((6, dim)).astype(np.float32)
    got = scorer.score(user, items)
    for i in range(6):
        x = np.concatenate([user, items[i]]).astype(np.float64)
        logits = gate_w.astype(np.float64) @ x + gate_b
        gates = np.exp(logits - logits.max())
        gates /= gates.sum()
        dots = [float(np.dot(u.astype(np.float64) @ user.astype(np.float64),
                             ip.astype(np.float64) @ items[i].astype(np.float64)))
                for u, ip in comps]
        assert got[i] == pytest.approx(float(np.dot(gates, dots)), rel=1e-5)


def test_scorer_json_round_trip(rng):
    mlp = MlpScorer(
        hidden=((rng.standard_normal((3, 4)).astype(np.float32),
                 rng.standard_normal(3).astype(np.float32)),),
        heads={"like": LinearHead(rng.standard_normal(3).astype(np.float32), 0.5)},
        shared_head=LinearHead(rng.standard_normal(3).astype(np.float32), -1.0))
    back = scorer_from_dict(scorer_to_dict(mlp))
    items = rng.standard_normal((4, 2)).astype(np.float32)
    user = rng.standard_normal(2).astype(np.float32)
    assert np.array_equal(mlp.score(user, items, "like"), back.score(user, items, "like"))

    mol = identity_mol(5)
    back2 = scorer_from_dict(scorer_to_dict(mol))
    items5 = rng.standard_normal((4, 5)).astype(np.float32)
    user5 = rng.standard_normal(5).astype(np.float32)
    assert np.array_equal(mol.score(user5, items5), back2.score(user5, items5))


# --- esr ranking ------------------------------------------------------------------


def test_score_by_ids_matches_direct():
    from filtra.scoring import score_by_ids
    cache, rng = make_cache(n=12, dim=4)
    user = rng.standard_normal(4).astype(np.float32)
    scorer = identity_mol(4)
    ids = np.array([104, 100, 111], dtype=np.uint64)
    out = score_by_ids(scorer, cache, user, ids, ["t1", "t2"])
    assert set(out) == {"t1", "t2"}
    direct = scorer.score(user, cache.batch(ids))
    assert np.array_equal(out["t1"], direct)
    with pytest.raises(MissingItem):
        score_by_ids(scorer, cache, user, np.array([1], dtype=np.uint64), ["t"])


def test_esr_full_list_when_topk_large():
    cache, rng = make_cache(n=10, dim=4)
    user = rng.standard_normal(4).astype(np.float32)
    ranked = esr_rank(cache, identity_mol(4), user, cache.item_ids, topk=100)
    assert len(ranked) == 10
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_esr_matches_cache_scores():
    cache, rng = make_cache(n=8, dim=4)
    user = rng.standard_normal(4).astype(np.float32)
    ranked = esr_rank(cache, identity_mol(4), user, [103, 101], topk=2)
    want = {103: float(dot_rows(cache.lookup(103).reshape(1, -1), user)[0]),
            101: float(dot_rows(cache.lookup(101).reshape(1, -1), user)[0])}
    assert dict(ranked) == want


def test_esr_missing_item():
    cache, rng = make_cache()
    with pytest.raises(MissingItem):
        esr_rank(cache, identity_mol(6), np.zeros(6, dtype=np.float32), [1], topk=1)


def test_esr_scales_to_thousands():
    rng = np.random.default_rng(3)
    n = 5720
    cache = EmbeddingCache(np.arange(n, dtype=np.uint64),
                           rng.standard_normal((n, 16)).astype(np.float32))
    ranked = esr_rank(cache, identity_mol(16),
                      rng.standard_normal(16).astype(np.float32),
                      np.arange(n, dtype=np.uint64), topk=100)
    assert len(ranked) == 100


# --- value model -------------------------------------------------------------------


def test_vm_identity_task():
    cfg = parse_value_model({"op": "task", "task": "like"})
    assert value_model_eval(cfg, {"like": 0.7}) == 0.7


def test_vm_weighted_sum():
    cfg = parse_value_model({"op": "add", "args": [
        {"op": "mul", "args": [{"op": "const", "value": 0.5},
                               {"op": "task", "task": "like"}]},
        {"op": "mul", "args": [{"op": "const", "value": 0.3},
                               {"op": "task", "task": "share"}]},
        {"op": "mul", "args": [{"op": "const", "value": 0.2},
                               {"op": "task", "task": "comment"}]}]})
    got = value_model_eval(cfg, {"like": 1.0, "share": 0.0, "comment": 0.5})
    assert got == pytest.approx(0.6)


def test_vm_if_matches_naive_interpreter(rng):
    cfg = parse_value_model({
        "op": "if",
        "cond": {"left": {"op": "task", "task": "share"}, "cmp": ">",
                 "right": {"op": "const", "value": 0.8}},
        "then": {"op": "mul", "args": [{"op": "const", "value": 2.0},
                                       {"op": "task", "task": "like"}]},
        "else": {"op": "task", "task": "like"}})

    def naive(share, like):
        return 2.0 * like if share > 0.8 else like

    for _ in range(200):
        share, like = rng.random(), rng.random()
        assert value_model_eval(cfg, {"share": share, "like": like}) == \
            pytest.approx(naive(share, like))


def test_vm_vectorized_matches_scalar(rng):
    cfg = parse_value_model({"op": "clamp", "lo": -0.2, "hi": 0.9, "args": [
        {"op": "sub", "args": [{"op": "task", "task": "a"},
                               {"op": "max", "args": [{"op": "task", "task": "b"},
                                                      {"op": "const", "value": 0.1}]}]}]})
    a = rng.random(50)
    b = rng.random(50)
    vec = value_model_eval(cfg, {"a": a, "b": b})
    for i in range(50):
        assert vec[i] == pytest.approx(value_model_eval(cfg, {"a": a[i], "b": b[i]}))


def test_vm_errors():
    with pytest.raises(UnknownTask):
        value_model_eval(parse_value_model({"op": "task", "task": "nope"}), {"like": 1.0})
    div = parse_value_model({"op": "div", "args": [{"op": "const", "value": 1.0},
                                                   {"op": "task", "task": "x"}]})
    with pytest.raises(DivByZero):
        value_model_eval(div, {"x": 0.0})
    with pytest.raises(ValueError):
        parse_value_model({"op": "nope"})
    with pytest.raises(ValueError):
        parse_value_model({"op": "sub", "args": [{"op": "const", "value": 1.0}]})


def test_vm_depth_limit():
    node = {"op": "const", "value": 1.0}
    for _ in range(70):
        node = {"op": "add", "args": [node]}
    with pytest.raises(ValueError):
        parse_value_model(node)


def test_vm_linear_configs_argmax_invariant(rng):
    # positive rescaling of all task scores preserves the argmax for linear configs
    cfg = parse_value_model({"op": "add", "args": [
        {"op": "mul", "args": [{"op": "const", "value": 0.7},
                               {"op": "task", "task": "a"}]},
        {"op": "mul", "args": [{"op": "const", "value": 0.3},
                               {"op": "task", "task": "b"}]}]})
    a, b = rng.random(40), rng.random(40)
    base = value_model_eval(cfg, {"a": a, "b": b})
    scaled = value_model_eval(cfg, {"a": 3.7 * a, "b": 3.7 * b})
    assert int(np.argmax(base)) == int(np.argmax(scaled))


def test_vm_round_trip_and_default():
    cfg = mean_of_tasks(["x", "y"])
    back = parse_value_model(value_model_to_dict(cfg))
    assert value_model_eval(back, {"x": 1.0, "y": 3.0}) == pytest.approx(2.0)
    single = mean_of_tasks(["only"])
    assert value_model_eval(single, {"only": 0.25}) == 0.25
