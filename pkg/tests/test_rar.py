import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afmrl import attrgen, rar
from afmrl.attrgen import GenVocab, init_policy, logprob_backward, token_logprobs
from afmrl.corpus import ConfigError
from afmrl.embednet import Encoder
from afmrl.evalsuite import METRICS
from afmrl.rar import (
    EncoderMutatedError,
    GrpoBatch,
    GrpoConfig,
    RewardConfig,
    final_reward,
    grpo_objective,
    normalize_advantages,
    ranked_pool,
    retrieval_reward,
    reward_variant,
)

from oracles import central_diff, max_rel_err


def test_reward_config_validation():
    for bad in (dict(k=0), dict(k=5, pool_size=4), dict(eta=0.5), dict(kind="mrr")):
        with pytest.raises(ConfigError):
            RewardConfig(**bad).validate()
    for bad in (dict(clip=0), dict(beta=-1), dict(group_size=1), dict(steps=-1)):
        with pytest.raises(ConfigError):
            GrpoConfig(**bad).validate()


def test_recall_example():
    assert reward_variant(["a", "c", "d", "b"], {"a", "b"}, 3) == 0.5


def test_full_pool_recall_is_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ranked = list(rng.permutation(10))
        pos = set(rng.choice(10, 3, replace=False))
        assert reward_variant(ranked, pos, 10) == 1.0
        assert reward_variant(ranked, pos, 15) == 1.0


def test_empty_positives_rejected():
    with pytest.raises(ConfigError):
        reward_variant([1, 2], set(), 1)


def test_reward_against_exhaustive_sort():
    enc = Encoder({"W1": np.eye(3), "b1": np.zeros(3), "W2": np.eye(3), "b2": np.zeros(3)})
    pool = np.array([[1, 0, 0], [0.9, 0.1, 0], [0, 1, 0], [0.5, 0.5, 0], [0, 0, 1], [0.7, 0, 0.7]], float)
    pool_emb = enc.encode(pool)
    ids = [10, 11, 12, 13, 14, 15]
    q = np.array([0.8, 0.3, 0.1])
    qe = enc.encode(q)
    scores = {i: float(qe @ e) for i, e in zip(ids, pool_emb)}
    best = max(itertools.permutations(ids), key=lambda p: [scores[i] for i in p])
    oracle = sorted(ids, key=lambda i: -scores[i])
    assert list(best) == oracle == ranked_pool(qe, pool_emb, ids)
    for k in range(1, 7):
        assert retrieval_reward(enc, q, pool_emb, ids, {11, 15}, k) == \
            len({11, 15} & set(oracle[:k])) / 2
    with pytest.raises(ConfigError):
        retrieval_reward(enc, q, pool_emb, ids, {99}, 1)


def test_final_reward():
    assert final_reward(0.5, True) == 0.5
    assert final_reward(0.0, True) == 0.0
    assert final_reward(0.9, False) == -0.1
    assert final_reward(0.9, False, eta=-0.3) == -0.3


@pytest.mark.parametrize("kind", ["recall", "precision", "ndcg"])
def test_variants_match_metrics(kind):
    rng = np.random.default_rng(1)
    ranked = list(rng.permutation(7))
    assert reward_variant(ranked, {ranked[0]}, 3, kind) == METRICS[kind](ranked, {ranked[0]}, 3)
    assert reward_variant([0, 1, 2], {0}, 2, "precision") == 0.5
    assert reward_variant([1, 2, 0], {0}, 2, kind) == 0.0


@given(st.integers(0, 10_000))
def test_recall_non_decreasing_in_k(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    ranked = list(rng.permutation(n))
    pos = set(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist())
    vals = [reward_variant(ranked, pos, k) for k in range(1, n + 1)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0


def test_advantages_examples():
    np.testing.assert_array_equal(normalize_advantages(np.array([1.0, 0.0])), [1.0, -1.0])
    assert not normalize_advantages(np.full(5, 0.3)).any()


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=16))
def test_advantages_centred_and_scaled(rewards):
    a = normalize_advantages(np.array(rewards))
    if np.std(rewards) >= 1e-8:
        assert abs(a.sum()) < 1e-9 and abs(a.std() - 1.0) < 1e-9
    else:
        assert not a.any()


def tiny_policy(seed):
    vocab = GenVocab((attrgen.STOP, "a=1", "a=2"))
    pol = init_policy(vocab, 2, 2, 4, seed)
    rng = np.random.default_rng(seed + 7)
    pol.params["Wo"] = rng.normal(size=pol.params["Wo"].shape)
    pol.params["bo"] = rng.normal(size=3)
    return pol


def perturbed(pol, scale, seed):
    out = attrgen.clone_policy(pol)
    rng = np.random.default_rng(seed)
    out.set_params({k: v + scale * rng.normal(size=v.shape) for k, v in pol.params.items()})
    return out


def rollout_batch(old, n_groups=2, g=4, seed=0):
    rng = np.random.default_rng(seed)
    X, seqs, lps, adv = [], [], [], []
    for _ in range(n_groups):
        x = rng.normal(size=2)
        samples = [attrgen.sample(old, x, rng) for _ in range(g)]
        a = normalize_advantages(rng.uniform(size=g))
        for s, ai in zip(samples, a):
            X.append(x)
            seqs.append(s.tokens)
            lps.extend(s.logprobs)
            adv.extend([ai] * len(s.tokens))
    return GrpoBatch(np.stack(X), seqs, np.array(lps), np.array(adv))


def with_params(pol, params):
    out = attrgen.clone_policy(pol)
    out.params = params
    return out


def test_ratio_one_gives_vanilla_policy_gradient():
    old = tiny_policy(0)
    batch = rollout_batch(old)
    stats, grads = grpo_objective(old, old, batch, GrpoConfig(beta=0.0))
    T = len(batch.adv)
    ref = logprob_backward(old, batch.X, batch.seqs, batch.adv / T)
    assert stats.clip_frac == 0.0
    assert max(np.max(np.abs(grads[k] - ref[k])) for k in grads) < 1e-10


def test_kl_term_vanishes_at_reference():
    old = tiny_policy(1)
    batch = rollout_batch(old)
    s0, g0 = grpo_objective(old, old, batch, GrpoConfig(beta=0.0))
    s1, g1 = grpo_objective(old, old, batch, GrpoConfig(beta=0.5))
    assert s1.kl == 0.0
    for k in g0:
        np.testing.assert_allclose(g0[k], g1[k], atol=1e-15)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_clipped_tokens_get_zero_gradient(sign):
    pol = tiny_policy(2)
    batch = rollout_batch(pol)
    eps = 0.2
    lp = token_logprobs(pol, batch.X, batch.seqs)
    # ratio 1 + 2 eps with positive advantage, or 1 - 2 eps with negative advantage
    ratio = 1 + 2 * eps if sign > 0 else 1 - 2 * eps
    b = GrpoBatch(batch.X, batch.seqs, lp - np.log(ratio), np.full(len(lp), sign * 0.7))
    stats, grads = grpo_objective(pol, pol, b, GrpoConfig(clip=eps, beta=0.0))
    assert stats.clip_frac == 1.0
    assert all(not g.any() for g in grads.values())


def test_objective_gradient_finite_difference():
    old = tiny_policy(3)
    ref = perturbed(old, 0.3, 1)
    cur = perturbed(old, 0.05, 2)
    batch = rollout_batch(old, seed=4)
    cfg = GrpoConfig(clip=0.2, beta=0.1)
    _, grads = grpo_objective(cur, ref, batch, cfg)
    f = lambda p: grpo_objective(with_params(cur, p), ref, batch, cfg)[0].objective
    fd = central_diff(f, {k: v.copy() for k, v in cur.params.items()})
    assert max_rel_err(grads, fd) < 1e-5


def test_zero_steps_returns_sft(small_stack):
    ex, enc, sft = small_stack
    cfg = replace(ex.config, grpo=replace(ex.config.grpo, steps=0))
    env = ex.env(enc, "train")
    pol, log = rar.train_rl(sft, env, ex.split["train"], cfg.reward, cfg.grpo)
    assert log == []
    for k in sft.params:
        np.testing.assert_array_equal(pol.params[k], sft.params[k])


def test_rl_moves_policy_and_keeps_encoder(small_stack):
    ex, enc, sft = small_stack
    before = enc.checksum()
    pol, log = ex.train_rl(sft, enc)
    assert enc.checksum() == before
    assert len(log) == ex.config.grpo.steps
    _, X, targets = ex.sft_data()
    assert rar.policy_kl(pol, attrgen.snapshot_reference(sft), X[:50], targets[:50]) > 0
    row = log[-1]
    assert 0 <= row.frac_valid <= 1 and row.mean_kl >= 0 and 0 <= row.clip_frac <= 1


def test_mutated_encoder_detected(small_stack):
    ex, enc, sft = small_stack
    env = ex.env(enc.copy(), "train")
    env.encoder.set_params({k: v + 0.0 for k, v in env.encoder.params.items()})
    with pytest.raises(EncoderMutatedError):
        rar.train_rl(sft, env, ex.split["train"], ex.config.reward, replace(ex.config.grpo, steps=1))


def test_env_pools(small_stack):
    ex, enc, _ = small_stack
    env = ex.env(enc, "test")
    u = ex.universe
    for qid in ex.split["test"][:20]:
        pool = env.pools[qid]
        assert qid not in pool.ids and len(pool.ids) <= ex.config.reward.pool_size
        fam = u.product(qid).family_id
        assert {i for i in ex.split["test"] if u.product(i).family_id == fam and i != qid} <= set(pool.ids)
        assert pool.positives == {i for i in pool.ids if u.product(i).group_id == u.product(qid).group_id}


def test_reward_sweep_saturates_at_full_pool(small_stack):
    ex, enc, sft = small_stack
    rows, summary = ex.reward_sweep(sft, enc, kinds=("recall",))
    ks = ex.sweep_ks()
    full = max(ks)
    assert full == ex.config.reward.pool_size
    hist = [r for r in rows if r["k"] == full and r["statistic"] == "valid_raw"]
    assert sum(r["count"] for r in hist) == sum(r["count"] for r in hist if r["bin_hi"] == 1.0) > 0
    assert summary["recall"][full]["frac_valid_raw_one"] == 1.0
    mid = sorted(ks)[len(ks) // 2 - 1]
    assert summary["recall"][mid]["mean_group_std"] > summary["recall"][full]["mean_group_std"]


def test_cit_fraction_zero_is_plain_retrain(small_stack):
    ex, _, sft = small_stack
    cfg = replace(ex.config, cit=replace(ex.config.cit, fraction=0.0), train=replace(ex.config.train, steps=20))
    from afmrl.pipeline import Experiment

    ex2 = Experiment(cfg, ex.universe, ex.pairs)
    res = ex2.cit(sft)
    _, plain = ex2.train_encoder("agcl")
    assert res.covered_pairs == 0
    assert [repr(r.loss) for r in res.train_log] == [repr(r.loss) for r in plain]


def test_cit_covers_fraction(small_stack):
    ex, _, sft = small_stack
    cfg = replace(ex.config, train=replace(ex.config.train, steps=5))
    from afmrl.pipeline import Experiment

    res = Experiment(cfg, ex.universe, ex.pairs).cit(sft)
    assert res.covered_pairs == round(0.3 * len(ex.pairs))
    assert res.valid_fraction >= 0.9
    with pytest.raises(ConfigError):
        rar.cit_round(sft, np.zeros((2, 3)), np.zeros((2, 3)), 1.5, lambda q, c: None, 0)
