"""Retrieval-rewarded GRPO for the attribute generator.

The frozen encoder scores each generated attribute set by retrieving the
enriched query against a candidate pool; the reward is Recall@k (or precision /
NDCG variants), with a fixed penalty for malformed generations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attrgen
from .attrgen import GenSample, Policy, logprob_backward, token_logprobs
from .corpus import ConfigError, ProductUniverse
from .embednet import AdamState, Encoder, FeatureConfig, adam_step, featurize
from .evalsuite import METRICS, rank_by_similarity


class EncoderMutatedError(RuntimeError):
    """The reward encoder changed while it was supposed to be frozen."""


@dataclass(frozen=True)
class RewardConfig:
    k: int = 10
    eta: float = -0.1
    kind: str = "recall"
    pool_size: int = 40

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.pool_size < self.k:
            raise ConfigError("pool_size must be >= k")
        if self.eta > 0:
            raise ConfigError("eta must be <= 0")
        if self.kind not in ("recall", "precision", "ndcg"):
            raise ConfigError(f"unknown reward kind {self.kind!r}")


@dataclass(frozen=True)
class GrpoConfig:
    clip: float = 0.2
    beta: float = 0.01
    lr: float = 1e-3
    steps: int = 400
    group_size: int = 8
    queries_per_step: int = 8
    inner_epochs: int = 1
    std_floor: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.clip < 1:
            raise ConfigError("clip must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.steps < 0 or self.queries_per_step < 1 or self.inner_epochs < 1:
            raise ConfigError("steps >= 0, queries_per_step >= 1, inner_epochs >= 1 required")


def ranked_pool(query_emb: np.ndarray, pool_emb: np.ndarray, pool_ids: Sequence[int]) -> list[int]:
    return rank_by_similarity(pool_emb @ query_emb, pool_ids)


def reward_variant(ranked: Sequence[int], positives, k: int, kind: str = "recall") -> float:
    if not positives:
        raise ConfigError("ground-truth positive set is empty")
    return METRICS[kind](ranked, positives, k)


def retrieval_reward(
    encoder: Encoder,
    query_feature: np.ndarray,
    pool_emb: np.ndarray,
    pool_ids: Sequence[int],
    positives,
    k: int,
    kind: str = "recall",
) -> float:
    """Metric@k of retrieving the (already enriched) query against the pool."""
    missing = set(positives) - set(pool_ids)
    if missing:
        raise ConfigError(f"positives {sorted(missing)} are not in the pool")
    return reward_variant(ranked_pool(encoder.encode(query_feature), pool_emb, pool_ids),
                          positives, k, kind)


def final_reward(R: float, valid: bool, eta: float = -0.1) -> float:
    return R if valid else eta


def normalize_advantages(rewards: np.ndarray, std_floor: float = 1e-8) -> np.ndarray:
    """Group-centred, population-std-scaled rewards; flat groups get all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if std < std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class QueryPool:
    ids: list[int]
    emb: np.ndarray
    positives: frozenset


@dataclass
class RetrievalEnv:
    """Frozen encoder plus per-query candidate pools."""

    encoder: Encoder
    universe: ProductUniverse
    features: FeatureConfig
    pools: dict[int, QueryPool]
    query_features: dict[int, np.ndarray]
    instruction: str = "product"
    _checksum: str = field(init=False, default="")
    _version: int = field(init=False, default=0)

    def __post_init__(self):
        self._checksum = self.encoder.checksum()
        self._version = self.encoder.version

    def assert_frozen(self) -> None:
        if self.encoder.version != self._version or self.encoder.checksum() != self._checksum:
            raise EncoderMutatedError("reward encoder parameters changed during RL")

    def rewards(self, qid: int, attr_sets: Sequence[Sequence[str]], k: int, kind: str) -> np.ndarray:
        pool = self.pools[qid]
        q = self.universe.product(qid)
        X = np.stack([featurize(q, self.instruction, a, config=self.features) for a in attr_sets])
        E = self.encoder.encode(X)
        return np.array([
            reward_variant(ranked_pool(e, pool.emb, pool.ids), pool.positives, k, kind) for e in E
        ])

    def sample_rewards(self, qid: int, samples: Sequence[GenSample], cfg: RewardConfig) -> tuple[np.ndarray, np.ndarray]:
        raw = np.zeros(len(samples))
        valid_idx = [i for i, s in enumerate(samples) if s.valid]
        if valid_idx:
            raw[valid_idx] = self.rewards(qid, [samples[i].attributes for i in valid_idx], cfg.k, cfg.kind)
        final = np.array([final_reward(raw[i], s.valid, cfg.eta) for i, s in enumerate(samples)])
        return raw, final


def build_env(
    encoder: Encoder,
    universe: ProductUniverse,
    features: FeatureConfig,
    query_ids: Sequence[int],
    distractor_ids: Sequence[int],
    pool_size: int,
    seed: int,
) -> RetrievalEnv:
    """Pool = the query's whole family (minus itself) topped up with random distractors."""
    rng = np.random.default_rng(seed)
    emb_cache: dict[int, np.ndarray] = {}

    def embed(ids):
        todo = [i for i in ids if i not in emb_cache]
        if todo:
            X = np.stack([featurize(universe.product(i), "product", config=features, modality="both")
                          for i in todo])
            for i, e in zip(todo, encoder.encode(X)):
                emb_cache[i] = e
        return np.stack([emb_cache[i] for i in ids])

    distractor_ids = list(distractor_ids)
    pools = {}
    qfeat = {}
    for qid in query_ids:
        q = universe.product(qid)
        family = [pid for g in universe.family_groups(q.family_id)
                  for pid in universe.group_members(g) if pid != qid]
        if len(family) > pool_size:
            raise ConfigError(f"pool_size={pool_size} smaller than family size {len(family)}")
        others = [i for i in distractor_ids if universe.product(i).family_id != q.family_id]
        n_extra = min(pool_size - len(family), len(others))
        extra = [others[i] for i in sorted(rng.choice(len(others), n_extra, replace=False))] if n_extra else []
        ids = sorted(set(family) | set(extra))
        pos = frozenset(i for i in ids if universe.product(i).group_id == q.group_id)
        pools[qid] = QueryPool(ids, embed(ids), pos)
        qfeat[qid] = featurize(q, "product", config=features)
    return RetrievalEnv(encoder, universe, features, pools, qfeat)


@dataclass
class RolloutGroup:
    query_id: int
    samples: list[GenSample]
    raw_rewards: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray


def collect_group(
    policy: Policy,
    env: RetrievalEnv,
    qid: int,
    reward_cfg: RewardConfig,
    grpo_cfg: GrpoConfig,
    rng: np.random.Generator,
) -> RolloutGroup:
    x = env.query_features[qid]
    samples = [attrgen.sample(policy, x, rng) for _ in range(grpo_cfg.group_size)]
    raw, final = env.sample_rewards(qid, samples, reward_cfg)
    return RolloutGroup(qid, samples, raw, final, normalize_advantages(final, grpo_cfg.std_floor))


@dataclass
class GrpoBatch:
    X: np.ndarray
    seqs: list[tuple[int, ...]]
    old_logp: np.ndarray
    adv: np.ndarray  # per token


def make_batch(groups: Sequence[RolloutGroup], env: RetrievalEnv) -> GrpoBatch:
    X, seqs, old, adv = [], [], [], []
    for g in groups:
        for s, a in zip(g.samples, g.advantages):
            X.append(env.query_features[g.query_id])
            seqs.append(s.tokens)
            old.extend(s.logprobs)
            adv.extend([a] * len(s.tokens))
    return GrpoBatch(np.stack(X), seqs, np.array(old), np.array(adv))


@dataclass
class GrpoStats:
    objective: float
    surrogate: float
    kl: float
    clip_frac: float


def grpo_objective(
    policy: Policy,
    reference: Policy,
    batch: GrpoBatch,
    cfg: GrpoConfig,
) -> tuple[GrpoStats, dict[str, np.ndarray]]:
    """Token-mean clipped surrogate minus beta * KL estimate, and its gradient."""
    lp = token_logprobs(policy, batch.X, batch.seqs)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite policy log-probabilities")
    lref = token_logprobs(reference, batch.X, batch.seqs)
    A = batch.adv
    T = len(lp)
    ratio = np.exp(lp - batch.old_logp)
    unclipped = ratio * A
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * A
    surr = np.minimum(unclipped, clipped)
    # the clipped branch is constant in theta, so it contributes no gradient
    use_unclipped = unclipped <= clipped
    d_surr = np.where(use_unclipped, ratio * A, 0.0)
    diff = lref - lp
    kl = np.exp(diff) - diff - 1.0
    d_kl = 1.0 - np.exp(diff)
    objective = float(np.mean(surr - cfg.beta * kl))
    coef = (d_surr - cfg.beta * d_kl) / T
    grads = logprob_backward(policy, batch.X, batch.seqs, coef)
    stats = GrpoStats(objective, float(surr.mean()), float(kl.mean()),
                      float(np.mean(~use_unclipped)))
    return stats, grads


def grpo_update(policy: Policy, reference: Policy, batch: GrpoBatch, cfg: GrpoConfig, state: AdamState) -> GrpoStats:
    """Adam ascent on the objective (inner epochs reuse the same old log-probs)."""
    stats = None
    for _ in range(cfg.inner_epochs):
        stats, grads = grpo_objective(policy, reference, batch, cfg)
        policy.set_params(adam_step(policy.params, {k: -g for k, g in grads.items()}, state))
    return stats


@dataclass
class RlLogRow:
    step: int
    mean_reward: float
    frac_valid: float
    mean_answer_len: float
    mean_think_len: float
    mean_kl: float
    clip_frac: float


def _group_stats(policy: Policy, groups: Sequence[RolloutGroup]) -> tuple[float, float, float, float]:
    samples = [s for g in groups for s in g.samples]
    decoded = [policy.vocab.decode(s.tokens) for s in samples]
    return (
        float(np.mean([r for g in groups for r in g.rewards])),
        float(np.mean([s.valid for s in samples])),
        float(np.mean([attrgen.answer_length(d) for d in decoded])),
        float(np.mean([s.think_len for s in samples])),
    )


def train_rl(
    policy_sft: Policy,
    env: RetrievalEnv,
    query_ids: Sequence[int],
    reward_cfg: RewardConfig,
    grpo_cfg: GrpoConfig,
) -> tuple[Policy, list[RlLogRow]]:
    reward_cfg.validate()
    grpo_cfg.validate()
    reference = attrgen.snapshot_reference(policy_sft)
    policy = attrgen.clone_policy(policy_sft)
    rng = np.random.default_rng(grpo_cfg.seed)
    state = AdamState(lr=grpo_cfg.lr)
    log = []
    order: list[int] = []
    qids = list(query_ids)
    for step in range(1, grpo_cfg.steps + 1):
        env.assert_frozen()
        batch_q = []
        while len(batch_q) < min(grpo_cfg.queries_per_step, len(qids)):
            if not order:
                order = [qids[i] for i in rng.permutation(len(qids))]
            batch_q.append(order.pop())
        groups = [collect_group(policy, env, q, reward_cfg, grpo_cfg, rng) for q in batch_q]
        mean_r, frac_valid, ans_len, think_len = _group_stats(policy, groups)
        stats = grpo_update(policy, reference, make_batch(groups, env), grpo_cfg, state)
        log.append(RlLogRow(step, mean_r, frac_valid, ans_len, think_len, stats.kl, stats.clip_frac))
    env.assert_frozen()
    return policy, log


def policy_kl(policy: Policy, reference: Policy, X: np.ndarray, seqs) -> float:
    """Mean per-token KL estimate on the given sequences."""
    lp = token_logprobs(policy, X, seqs)
    lref = token_logprobs(reference, X, seqs)
    diff = lref - lp
    return float(np.mean(np.exp(diff) - diff - 1.0))


def evaluate_policy(
    policy: Policy,
    env: RetrievalEnv,
    query_ids: Sequence[int],
    reward_cfg: RewardConfig,
    n_samples: int = 8,
    seed: int = 0,
) -> dict[str, float]:
    """Mean final reward of sampled (temperature 1) and greedy generations."""
    rng = np.random.default_rng(seed)
    sampled, greedy, valid = [], [], []
    for qid in query_ids:
        x = env.query_features[qid]
        samples = [attrgen.sample(policy, x, rng) for _ in range(n_samples)]
        sampled.extend(env.sample_rewards(qid, samples, reward_cfg)[1])
        g = attrgen.sample(policy, x, rng, greedy=True)
        greedy.extend(env.sample_rewards(qid, [g], reward_cfg)[1])
        valid.append(g.valid)
    return {"sampled_reward": float(np.mean(sampled)), "greedy_reward": float(np.mean(greedy)),
            "greedy_valid": float(np.mean(valid))}


@dataclass
class CitResult:
    encoder: Encoder
    train_log: list
    covered_pairs: int
    valid_fraction: float


def cit_round(
    policy_rl: Policy,
    pair_query_features: np.ndarray,
    pair_cand_features: np.ndarray,
    fraction: float,
    retrain: Callable[[dict[int, tuple[str, ...]], dict[int, tuple[str, ...]]], tuple[Encoder, list]],
    seed: int,
) -> CitResult:
    """Regenerate attributes for ``fraction`` of training pairs and retrain the encoder.

    ``retrain(query_attrs, cand_attrs)`` receives per-pair-index overrides: the
    query side is used both for BM25 weighting and for query enrichment, the
    candidate side for BM25 only. Invalid generations leave a pair unchanged.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must lie in [0, 1]")
    n = pair_query_features.shape[0]
    rng = np.random.default_rng(seed)
    n_cover = int(round(fraction * n))
    covered = sorted(int(i) for i in rng.choice(n, n_cover, replace=False)) if n_cover else []
    q_over: dict[int, tuple[str, ...]] = {}
    c_over: dict[int, tuple[str, ...]] = {}
    n_valid = 0
    for i in covered:
        gq = attrgen.sample(policy_rl, pair_query_features[i], rng, greedy=True)
        gc = attrgen.sample(policy_rl, pair_cand_features[i], rng, greedy=True)
        if gq.valid:
            n_valid += 1
            q_over[i] = gq.attributes
            if gc.valid:
                c_over[i] = gc.attributes
    encoder, log = retrain(q_over, c_over)
    return CitResult(encoder, log, len(covered), n_valid / len(covered) if covered else 1.0)


def reward_distribution_study(
    policy: Policy,
    env: RetrievalEnv,
    query_ids: Sequence[int],
    ks: Sequence[int],
    kind: str = "recall",
    group_size: int = 8,
    eta: float = -0.1,
    n_bins: int = 10,
    seed: int = 0,
) -> tuple[list[dict], dict[int, dict[str, float]]]:
    """Histograms per k of group mean reward, within-group std and raw valid rewards.

    The same rollouts are scored at every k so differences come from k alone.
    """
    rng = np.random.default_rng(seed)
    stats: dict[int, dict[str, list[float]]] = {
        k: {"group_mean": [], "group_std": [], "valid_raw": []} for k in ks
    }
    for qid in query_ids:
        x = env.query_features[qid]
        samples = [attrgen.sample(policy, x, rng) for _ in range(group_size)]
        for k in ks:
            cfg = RewardConfig(k=k, eta=eta, kind=kind, pool_size=max(k, len(env.pools[qid].ids)))
            raw, final = env.sample_rewards(qid, samples, cfg)
            stats[k]["group_mean"].append(float(final.mean()))
            stats[k]["group_std"].append(float(final.std()))
            stats[k]["valid_raw"].extend(float(r) for r, s in zip(raw, samples) if s.valid)
    edges = {
        "group_mean": np.linspace(min(eta, 0.0), 1.0, n_bins + 1),
        "group_std": np.linspace(0.0, 0.6, n_bins + 1),
        "valid_raw": np.linspace(0.0, 1.0, n_bins + 1),
    }
    rows = []
    summary = {}
    for k in ks:
        for stat, e in edges.items():
            vals = np.clip(stats[k][stat], e[0], e[-1])
            counts, _ = np.histogram(vals, bins=e)
            for lo, hi, c in zip(e[:-1], e[1:], counts):
                rows.append({"reward_kind": kind, "k": k, "statistic": stat,
                             "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)})
        raw = stats[k]["valid_raw"]
        summary[k] = {
            "mean_reward": float(np.mean(stats[k]["group_mean"])),
            "mean_group_std": float(np.mean(stats[k]["group_std"])),
            "frac_valid_raw_one": float(np.mean(np.asarray(raw) == 1.0)) if raw else float("nan"),
        }
    return rows, summary
