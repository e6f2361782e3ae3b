"""End-to-end experiment stages on one synthetic universe.

An :class:`Experiment` owns the universe, the train/val/test split and the
featurised training pairs; stage methods train encoders and generators and
evaluate them. Everything is a pure function of the config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import attrgen, evalsuite, rar
from .agcl import AgclConfig
from .attrgen import Policy, SftConfig
from .corpus import (
    ConfigError,
    ProductUniverse,
    TrainingPair,
    UniverseConfig,
    generate_universe,
    oracle_attributes,
    sample_pairs,
    split_families,
)
from .embednet import QUERY_MODALITY, TARGET_MODALITY, Encoder, FeatureConfig, featurize
from .gradcache import PairBatches, TrainConfig, TrainLogRow, train_large_batch
from .rar import GrpoConfig, RewardConfig


@dataclass(frozen=True)
class EncoderConfig:
    d_hidden: int = 64
    d_embed: int = 32


@dataclass(frozen=True)
class DataConfig:
    n_pairs: int = 4096
    val_fraction: float = 0.2
    test_fraction: float = 0.3
    # "product": every group contributes views to all splits; "family": whole families held out
    split_by: str = "product"


@dataclass(frozen=True)
class PolicyConfig:
    d_ctx: int = 128
    max_len: int = 16


@dataclass(frozen=True)
class CitConfig:
    fraction: float = 0.3


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    probe_epochs: int = 300
    probe_train_fraction: float = 0.6
    # "group" (fine identity) or "category"
    downstream_label: str = "group"
    reward_samples: int = 8
    sweep_ks: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    agcl: AgclConfig = field(default_factory=AgclConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    cit: CitConfig = field(default_factory=CitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    SECTIONS = ("universe", "features", "encoder", "data", "agcl", "train", "policy",
                "sft", "reward", "grpo", "cit", "eval")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same config with every stage seed derived from ``seed``."""
        return replace(
            self,
            seed=seed,
            universe=replace(self.universe, seed=seed),
            train=replace(self.train, seed=seed + 101),
            sft=replace(self.sft, seed=seed + 202),
            grpo=replace(self.grpo, seed=seed + 303),
        )

    def validate(self) -> None:
        self.universe.validate()
        self.agcl.validate()
        self.train.validate()
        self.reward.validate()
        self.grpo.validate()
        if self.features.d_img != self.universe.d_img:
            raise ConfigError("features.d_img must equal universe.d_img")
        if self.eval.downstream_label not in ("group", "category"):
            raise ConfigError("eval.downstream_label must be 'group' or 'category'")


class Experiment:
    def __init__(self, config: ExperimentConfig, universe: ProductUniverse | None = None,
                 pairs: Sequence[TrainingPair] | None = None):
        config.validate()
        self.config = config
        self.universe = universe if universe is not None else generate_universe(config.universe)
        self._oracle: dict[int, list[str]] = {}
        if pairs is not None:
            train = set(self.split["train"])
            if any(p.query_id not in train or p.positive_id not in train for p in pairs):
                raise ConfigError("training pairs must come from the train split")
            self.__dict__["pairs"] = list(pairs)

    # ---- data -------------------------------------------------------------

    @cached_property
    def split(self) -> dict[str, list[int]]:
        d = self.config.data
        fractions = (1 - d.val_fraction - d.test_fraction, d.val_fraction, d.test_fraction)
        if d.split_by == "family":
            parts = split_families(self.universe, fractions, self.config.seed + 7)
            return {name: sorted(pid for f in fams for g in self.universe.family_groups(f)
                                 for pid in self.universe.group_members(g))
                    for name, fams in zip(("train", "val", "test"), parts)}
        if d.split_by != "product":
            raise ConfigError(f"unknown split_by {d.split_by!r}")
        out = {"train": [], "val": [], "test": []}
        rng = np.random.default_rng(self.config.seed + 7)
        for g in self.universe.group_ids:
            members = list(self.universe.group_members(g))
            n = len(members)
            n_test = int(round(fractions[2] * n))
            n_val = int(round(fractions[1] * n))
            if min(n_test, n_val) < 2 or n - n_test - n_val < 2:
                raise ConfigError(f"group {g} with {n} products is too small for a product split")
            order = [members[i] for i in rng.permutation(n)]
            out["test"] += order[:n_test]
            out["val"] += order[n_test:n_test + n_val]
            out["train"] += order[n_test + n_val:]
        return {k: sorted(v) for k, v in out.items()}

    def groups_of(self, ids) -> list[int]:
        return sorted({self.universe.product(i).group_id for i in ids})

    @cached_property
    def pairs(self):
        return sample_pairs(self.universe, self.config.data.n_pairs, self.config.seed + 11,
                            self.groups_of(self.split["train"]), allowed_ids=self.split["train"])

    def oracle(self, pid: int) -> list[str]:
        if pid not in self._oracle:
            self._oracle[pid] = oracle_attributes(self.universe, pid)
        return self._oracle[pid]

    def feature(self, pid: int, instruction: str = "product", extra: Sequence[str] = (),
                modality: str | None = None) -> np.ndarray:
        return featurize(self.universe.product(pid), instruction, extra,
                         config=self.config.features, modality=modality)

    def feature_matrix(self, ids, instruction="product", extras=None, modality=None) -> np.ndarray:
        extras = extras or {}
        return np.stack([self.feature(i, instruction, extras.get(i, ()), modality) for i in ids])

    @cached_property
    def _pair_base(self):
        Xq = np.stack([self.feature(p.query_id, p.instruction, (), QUERY_MODALITY[p.instruction])
                       for p in self.pairs])
        Xc = np.stack([self.feature(p.positive_id, p.instruction, (), TARGET_MODALITY[p.instruction])
                       for p in self.pairs])
        return Xq, Xc

    def pair_batches(self, query_overrides=None, cand_overrides=None) -> PairBatches:
        """Training stream; overrides map pair index -> attribute tokens."""
        query_overrides = query_overrides or {}
        cand_overrides = cand_overrides or {}
        Xq, Xc = self._pair_base
        Xq = Xq.copy()
        for i, attrs in sorted(query_overrides.items()):
            p = self.pairs[i]
            Xq[i] = self.feature(p.query_id, p.instruction, attrs, QUERY_MODALITY[p.instruction])
        qa = [list(query_overrides.get(i, self.oracle(p.query_id))) for i, p in enumerate(self.pairs)]
        ca = [list(cand_overrides.get(i, self.oracle(p.positive_id))) for i, p in enumerate(self.pairs)]
        return PairBatches(Xq, Xc, qa, ca, seed=self.config.train.seed)

    # ---- encoder ----------------------------------------------------------

    def new_encoder(self) -> Encoder:
        e = self.config.encoder
        return Encoder.create(self.config.features.d_in, e.d_hidden, e.d_embed, self.config.train.seed)

    @cached_property
    def _probe_data(self):
        queries, gallery = self.gallery_split("val")
        return queries, gallery, self.feature_matrix(queries), self.feature_matrix(gallery)

    def probe_recall(self, encoder: Encoder) -> float:
        queries, gallery, Xq, Xg = self._probe_data
        return hit_rate_at_1(self.universe, encoder.encode(Xq), encoder.encode(Xg), queries, gallery)

    def train_encoder(self, mode: str, query_overrides=None, cand_overrides=None,
                      probe: bool = True) -> tuple[Encoder, list[TrainLogRow]]:
        encoder = self.new_encoder()
        cfg = replace(self.config.train, mode=mode)
        log = train_large_batch(encoder, self.pair_batches(query_overrides, cand_overrides), cfg,
                                self.config.agcl, self.probe_recall if probe else None)
        return encoder, log

    # ---- generator --------------------------------------------------------

    @cached_property
    def vocab(self) -> attrgen.GenVocab:
        return attrgen.GenVocab.build(self.universe.schema.all_tokens())

    def new_policy(self) -> Policy:
        pc = self.config.policy
        return attrgen.init_policy(self.vocab, self.config.features.d_in, pc.d_ctx, pc.max_len,
                                   self.config.sft.seed)

    def sft_data(self):
        ids = self.split["train"]
        n = self.config.sft.n_examples
        rng = np.random.default_rng(self.config.sft.seed)
        chosen = [ids[i] for i in rng.permutation(len(ids))][:n] if n <= len(ids) else \
            [ids[i % len(ids)] for i in range(n)]
        X = self.feature_matrix(chosen)
        targets = [self.vocab.encode(attrgen.oracle_sequence(self.universe, pid)) for pid in chosen]
        return chosen, X, targets

    def train_sft(self) -> tuple[Policy, list[float]]:
        _, X, targets = self.sft_data()
        return attrgen.sft_train(self.new_policy(), X, targets, self.config.sft)

    def env(self, encoder: Encoder, which: str) -> rar.RetrievalEnv:
        ids = self.split[which]
        return rar.build_env(encoder, self.universe, self.config.features, ids, ids,
                             self.config.reward.pool_size, self.config.seed + 13)

    def train_rl(self, policy_sft: Policy, encoder: Encoder):
        env = self.env(encoder, "train")
        return rar.train_rl(policy_sft, env, self.split["train"], self.config.reward, self.config.grpo)

    def greedy_attributes(self, policy: Policy | None, ids) -> dict[int, tuple[str, ...]]:
        if policy is None:
            return {}
        out = {}
        X = self.feature_matrix(ids)
        for pid, s in zip(ids, attrgen.generate_attributes(policy, X, greedy=True)):
            out[pid] = s.attributes if s.valid else ()
        return out

    # ---- evaluation -------------------------------------------------------

    def gallery_split(self, split: str = "test") -> tuple[list[int], list[int]]:
        """One catalogue listing per group (lowest id) as gallery; the rest are queries."""
        gallery, queries = [], []
        allowed = set(self.split[split])
        for g in self.groups_of(self.split[split]):
            members = [m for m in self.universe.group_members(g) if m in allowed]
            gallery.append(members[0])
            queries.extend(members[1:])
        return queries, gallery

    def evaluate_fine(self, encoder: Encoder, policy: Policy | None = None, split: str = "test"):
        queries, gallery = self.gallery_split(split)
        extras = self.greedy_attributes(policy, queries)
        Eq = encoder.encode(self.feature_matrix(queries, extras=extras))
        Ec = encoder.encode(self.feature_matrix(gallery))
        same_group = lambda a, b: self.universe.product(a).group_id == self.universe.product(b).group_id
        return evalsuite.retrieval_scores(Eq, Ec, queries, gallery, same_group, ("recall", "ndcg"),
                                          self.config.eval.ks)

    def evaluate_coarse(self, encoder: Encoder, policy: Policy | None = None, split: str = "test"):
        ids = self.split[split]
        extras = self.greedy_attributes(policy, ids)
        Eq = encoder.encode(self.feature_matrix(ids, extras=extras))
        Ec = encoder.encode(self.feature_matrix(ids))
        same_cat = lambda a, b: self.universe.product(a).category == self.universe.product(b).category
        return evalsuite.retrieval_scores(Eq, Ec, ids, ids, same_cat, ("map",), self.config.eval.ks)

    def evaluate_cross_modal(self, encoder: Encoder, policy: Policy | None = None, split: str = "test"):
        queries, gallery = self.gallery_split(split)
        extras = self.greedy_attributes(policy, queries)
        same_group = lambda a, b: self.universe.product(a).group_id == self.universe.product(b).group_id
        out = {}
        for task in ("i2t", "t2i"):
            Eq = encoder.encode(self.feature_matrix(queries, task, extras, QUERY_MODALITY[task]))
            Ec = encoder.encode(self.feature_matrix(gallery, task, None, TARGET_MODALITY[task]))
            out[task] = evalsuite.retrieval_scores(Eq, Ec, queries, gallery, same_group, ("recall",),
                                                   self.config.eval.ks)
        return out

    def downstream_embeddings(self, encoder: Encoder, policy: Policy | None, split: str = "test"):
        ids = self.split[split]
        extras = self.greedy_attributes(policy, ids)
        return ids, encoder.encode(self.feature_matrix(ids, extras=extras))

    def evaluate_downstream(self, encoder: Encoder, policy: Policy | None = None, split: str = "test") -> dict[str, float]:
        ids, E = self.downstream_embeddings(encoder, policy, split)
        ev = self.config.eval
        if ev.downstream_label == "group":
            labels = [self.universe.product(i).group_id for i in ids]
        else:
            labels = [self.universe.product(i).category for i in ids]
        # per-class split: the first fraction of each class's items trains the probe
        by_class: dict[int, list[int]] = {}
        for idx, lab in enumerate(labels):
            by_class.setdefault(lab, []).append(idx)
        train_idx, test_idx = [], []
        for members in by_class.values():
            cut = max(1, int(round(ev.probe_train_fraction * len(members))))
            train_idx += members[:cut]
            test_idx += members[cut:]
        acc = evalsuite.linear_probe(E, labels, train_idx, test_idx, epochs=ev.probe_epochs)
        assign = evalsuite.kmeans(E, len(by_class), seed=self.config.seed)
        return {
            "accuracy": acc,
            "nmi": evalsuite.nmi(assign, labels),
            "ari": evalsuite.ari(assign, labels),
            "purity": evalsuite.purity(assign, labels),
        }

    def policy_reward(self, policy: Policy, encoder: Encoder, split: str = "test") -> dict[str, float]:
        env = self.env(encoder, split)
        return rar.evaluate_policy(policy, env, self.split[split], self.config.reward,
                                   self.config.eval.reward_samples, self.config.seed + 17)

    def sweep_ks(self) -> tuple[int, ...]:
        if self.config.eval.sweep_ks:
            return tuple(self.config.eval.sweep_ks)
        pool = self.config.reward.pool_size
        return tuple(sorted({max(1, pool // 20), max(1, pool // 4), max(1, pool // 2), pool}))

    def reward_sweep(self, policy: Policy, encoder: Encoder, kinds=("recall", "precision", "ndcg"),
                     split: str = "test"):
        """Reward histograms over k for each reward kind, from one fixed policy."""
        env = self.env(encoder, split)
        rows, summary = [], {}
        for kind in kinds:
            r, s = rar.reward_distribution_study(policy, env, self.split[split], self.sweep_ks(), kind,
                                                 self.config.grpo.group_size, self.config.reward.eta,
                                                 seed=self.config.seed + 23)
            rows += r
            summary[kind] = s
        return rows, summary

    def cit(self, policy_rl: Policy):
        Xq = self.feature_matrix([p.query_id for p in self.pairs])
        Xc = self.feature_matrix([p.positive_id for p in self.pairs])
        retrain = lambda qo, co: self.train_encoder("agcl", qo, co)
        return rar.cit_round(policy_rl, Xq, Xc, self.config.cit.fraction, retrain,
                             self.config.seed + 19)


def hit_rate_at_1(universe: ProductUniverse, Eq: np.ndarray, Eg: np.ndarray,
                  queries: Sequence[int], gallery: Sequence[int]) -> float:
    """Fraction of queries whose top gallery item (id tie-break) shares their group."""
    S = Eq @ Eg.T
    gal = np.asarray(gallery)
    order = np.lexsort((np.broadcast_to(gal, S.shape), -S), axis=1)
    top = gal[order[:, 0]]
    hits = [universe.product(int(t)).group_id == universe.product(q).group_id
            for t, q in zip(top, queries)]
    return float(np.mean(hits))


def config_sections(cfg: ExperimentConfig) -> dict[str, object]:
    return {name: getattr(cfg, name) for name in ExperimentConfig.SECTIONS}


def dataclass_items(obj) -> list[tuple[str, object]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


LADDER = ("baseline", "agcl", "agcl_sft", "full")


@dataclass
class LadderResult:
    seed: int
    recall_at_1: dict[str, float]
    reward_sft: float
    reward_rl: float
    purity_pre: float
    purity_post: float
    sft_first_attr_acc: float
    seconds: dict[str, float]


def run_ladder(config: ExperimentConfig) -> LadderResult:
    """Every stage of the pipeline for one seed, with the numbers the ablation needs."""
    import time

    seconds = {}
    t = time.perf_counter()
    ex = Experiment(config)
    enc_base, _ = ex.train_encoder("infonce", probe=False)
    seconds["baseline"] = time.perf_counter() - t
    t = time.perf_counter()
    enc, _ = ex.train_encoder("agcl", probe=False)
    seconds["agcl"] = time.perf_counter() - t
    t = time.perf_counter()
    sft, _ = ex.train_sft()
    seconds["sft"] = time.perf_counter() - t
    t = time.perf_counter()
    rl, _ = ex.train_rl(sft, enc)
    seconds["rl"] = time.perf_counter() - t
    r1 = lambda e, p=None: ex.evaluate_fine(e, p)[0].value
    recall = {"baseline": r1(enc_base), "agcl": r1(enc), "agcl_sft": r1(enc, sft), "full": r1(enc, rl)}
    t = time.perf_counter()
    pre = ex.evaluate_downstream(enc, rl)["purity"]
    post = ex.evaluate_downstream(ex.cit(rl).encoder, rl)["purity"]
    seconds["cit"] = time.perf_counter() - t
    return LadderResult(
        seed=config.seed,
        recall_at_1=recall,
        reward_sft=ex.policy_reward(sft, enc)["sampled_reward"],
        reward_rl=ex.policy_reward(rl, enc)["sampled_reward"],
        purity_pre=pre,
        purity_post=post,
        sft_first_attr_acc=first_attribute_accuracy(ex, sft, ex.split["train"]),
        seconds=seconds,
    )


def first_attribute_accuracy(ex: Experiment, policy: Policy, ids) -> float:
    """Share of products whose greedy answer starts with the oracle's first attribute."""
    samples = attrgen.generate_attributes(policy, ex.feature_matrix(ids), greedy=True)
    return float(np.mean([s.valid and s.attributes[0] == ex.oracle(p)[0] for s, p in zip(samples, ids)]))
