"""Toy-model tests: seeded reproducibility, incremental/batched forward
agreement, sparse-vs-full equivalence when nothing is pruned, planted
attention concentration, and KV cache mechanics.
"""

import numpy as np
import pytest

from spardec.errors import ConfigurationError, ContractError
from spardec.model import (
    KvCache,
    KVEntry,
    ModelConfig,
    forward_full,
    forward_sparse,
    greedy_token,
    init_model,
    plant_attention_concentration,
)
from spardec.selection import CriticalTokenSet, rematerialize_scores

CFG = ModelConfig(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=32, seed=0)


def tokens_for(seed, n, vocab=32):
    return np.random.default_rng(seed).integers(0, vocab, size=n).tolist()


def full_set(n):
    return CriticalTokenSet(positions=np.arange(n), budget=n, identified_at=n)


# -- config and init ---------------------------------------------------------


def test_config_pins_hidden_dim():
    assert CFG.hidden_dim == 32
    assert CFG.group_size == 2
    with pytest.raises(ConfigurationError):
        ModelConfig(2, 4, 2, 8, 32, hidden_dim=64)


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigurationError):
        ModelConfig(2, 4, 3, 8, 32)  # 3 does not divide 4
    with pytest.raises(ConfigurationError):
        ModelConfig(2, 4, 2, 7, 32)  # odd head_dim
    with pytest.raises(ConfigurationError):
        ModelConfig(0, 4, 2, 8, 32)
    with pytest.raises(ConfigurationError):
        ModelConfig(2, 4, 2, 8, 1)


def test_init_is_bit_reproducible():
    a = init_model(CFG)
    b = init_model(CFG)
    assert np.array_equal(a.embedding, b.embedding)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.wq, lb.wq)
        assert np.array_equal(la.mlp_out, lb.mlp_out)


def test_init_seed_changes_weights():
    a = init_model(CFG)
    b = init_model(ModelConfig(2, 4, 2, 8, 32, seed=1))
    assert not np.array_equal(a.embedding, b.embedding)


# -- full forward ------------------------------------------------------------


def test_batched_equals_incremental_bitwise():
    model = init_model(CFG)
    toks = tokens_for(3, 9)
    logits_b, entries_b, _ = forward_full(model, KvCache(CFG), toks)

    cache = KvCache(CFG)
    logits_i = []
    for t in toks:
        rows, entries, _ = forward_full(model, cache, [t])
        logits_i.append(rows[0])
        cache.extend(entries)
    for lb, li in zip(logits_b, logits_i):
        assert np.array_equal(lb, li)
    assert np.array_equal(entries_b[4].k, np.stack([cache.keys(l)[4] for l in range(2)]))


def test_forward_full_leaves_cache_alone():
    model = init_model(CFG)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(0, 4))
    assert len(cache) == 0
    cache.extend(entries)
    n_before = len(cache)
    forward_full(model, cache, tokens_for(1, 3))
    assert len(cache) == n_before


def test_forward_full_score_log_shapes():
    model = init_model(CFG)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(2, 5))
    cache.extend(entries)
    _, _, log = forward_full(model, cache, tokens_for(4, 3))
    assert log.num_queries() == 3
    for q in range(3):
        for layer_rows in log.layers:
            assert layer_rows[q].kv_len() == 5 + q + 1
    log.validate()


def test_forward_full_rejects_bad_input():
    model = init_model(CFG)
    with pytest.raises(ContractError):
        forward_full(model, KvCache(CFG), [])
    with pytest.raises(ContractError):
        forward_full(model, KvCache(CFG), [99])


def test_capture_scores_off_leaves_log_empty():
    model = init_model(CFG)
    _, _, log = forward_full(model, KvCache(CFG), tokens_for(5, 4), capture_scores=False)
    assert all(rows == [] for rows in log.layers)


# -- sparse forward ----------------------------------------------------------


def test_sparse_with_everything_selected_matches_full():
    # Keeping all positions and no fresh entries, the sparse path sees the
    # exact keys the full path sees, in the same order.
    model = init_model(CFG)
    toks = tokens_for(6, 8)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, toks[:-1])
    cache.extend(entries)
    full_rows, _, _ = forward_full(model, cache, [toks[-1]])
    sparse_logits, _ = forward_sparse(model, cache, full_set(len(cache)), [], toks[-1])
    np.testing.assert_allclose(sparse_logits, full_rows[0], atol=1e-12)


def test_sparse_sees_fresh_entries():
    model = init_model(CFG)
    toks = tokens_for(7, 6)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, toks)
    cache.extend(entries)
    crit = full_set(len(cache))
    l1, e1 = forward_sparse(model, cache, crit, [], 3)
    l2, _ = forward_sparse(model, cache, crit, [e1], 5)
    # Same second token without the fresh entry attends differently.
    cache2 = KvCache(CFG)
    cache2.extend(entries)
    l2_blind, _ = forward_sparse(model, cache2, crit, [], 5)
    assert not np.allclose(l2, l2_blind)


def test_sparse_rejects_critical_positions_outside_cache():
    model = init_model(CFG)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(8, 4))
    cache.extend(entries)
    bad = CriticalTokenSet(positions=np.array([1, 5]), budget=2, identified_at=6)
    with pytest.raises(ContractError):
        forward_sparse(model, cache, bad, [], 0)


def test_pruning_changes_the_prediction_somewhere():
    # At budget 1 the draft must disagree with full attention on at least
    # one of these prompts, otherwise sparsity is doing nothing.
    model = init_model(CFG)
    diff = 0
    for seed in range(30):
        toks = tokens_for(100 + seed, 24)
        cache = KvCache(CFG)
        _, entries, _ = forward_full(model, cache, toks[:-1])
        cache.extend(entries)
        full_rows, _, _ = forward_full(model, cache, [toks[-1]])
        crit = CriticalTokenSet(positions=np.array([0]), budget=1, identified_at=len(cache))
        sparse_logits, _ = forward_sparse(model, cache, crit, [], toks[-1])
        diff += greedy_token(sparse_logits) != greedy_token(full_rows[0])
    assert diff > 0


# -- planted concentration ---------------------------------------------------


def test_planted_mass_is_exactly_zero_elsewhere():
    model = plant_attention_concentration(init_model(CFG), positions=[1, 4, 6])
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(9, 10))
    cache.extend(entries)
    _, _, log = forward_full(model, cache, tokens_for(10, 2))
    probs = rematerialize_scores(log)
    planted = {1, 4, 6}
    for layer_rows in probs:
        for p in layer_rows:
            cold = [j for j in range(p.shape[1]) if j not in planted]
            assert np.all(p[:, cold] == 0.0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_planted_sparse_agrees_with_full_argmax():
    # Attention mass outside the planted set underflows to zero, so drafting
    # over only those positions predicts the same tokens as full attention.
    model = plant_attention_concentration(init_model(CFG), positions=[0, 2, 5])
    toks = tokens_for(11, 12)
    cache = KvCache(CFG)
    _, entries, _ = forward_full(model, cache, toks)
    cache.extend(entries)
    crit = CriticalTokenSet(positions=np.array([0, 2, 5]), budget=3, identified_at=len(cache))

    fresh = []
    tok = toks[-1]
    drafted_sparse = []
    for _ in range(4):
        logits, entry = forward_sparse(model, cache, crit, fresh, tok)
        fresh.append(entry)
        tok = greedy_token(logits)
        drafted_sparse.append(tok)

    replay = KvCache(CFG)
    replay.extend(entries)
    tok = toks[-1]
    drafted_full = []
    for _ in range(4):
        rows, ents, _ = forward_full(model, replay, [tok])
        replay.extend(ents)
        tok = greedy_token(rows[0])
        drafted_full.append(tok)
    assert drafted_sparse == drafted_full


def test_plant_rejects_duplicates_and_negatives():
    model = init_model(CFG)
    with pytest.raises(ContractError):
        plant_attention_concentration(model, [1, 1])
    with pytest.raises(ContractError):
        plant_attention_concentration(model, [-1, 2])


# -- cache and small pieces --------------------------------------------------


def test_cache_grows_and_truncates():
    cache = KvCache(CFG, capacity=2)
    model = init_model(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(12, 7))
    cache.extend(entries)
    assert len(cache) == 7
    before = cache.keys(0)[3].copy()
    cache.truncate(4)
    assert len(cache) == 4
    assert np.array_equal(cache.keys(0)[3], before)
    with pytest.raises(ContractError):
        cache.truncate(9)
    with pytest.raises(ContractError):
        cache.truncate(-1)


def test_cache_gather_picks_rows():
    cache = KvCache(CFG)
    model = init_model(CFG)
    _, entries, _ = forward_full(model, cache, tokens_for(13, 5))
    cache.extend(entries)
    k, v = cache.gather(1, np.array([0, 3]))
    assert np.array_equal(k[1], cache.keys(1)[3])
    assert np.array_equal(v[0], cache.values(1)[0])


def test_kventry_validate():
    good = KVEntry(k=np.zeros((2, 2, 8)), v=np.zeros((2, 2, 8)))
    good.validate()
    with pytest.raises(ContractError):
        KVEntry(k=np.zeros((2, 2, 8)), v=np.zeros((2, 2, 4))).validate()
    with pytest.raises(ContractError):
        KVEntry(k=np.full((2, 2, 8), np.nan), v=np.zeros((2, 2, 8))).validate()


def test_greedy_token_tie_to_lowest_id():
    assert greedy_token(np.array([1.0, 3.0, 3.0])) == 1
    assert greedy_token(np.array([5.0])) == 0
