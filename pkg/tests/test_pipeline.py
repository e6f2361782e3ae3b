from dataclasses import replace

import pytest

from afmrl.corpus import ConfigError, TrainingPair
from afmrl.pipeline import Experiment, ExperimentConfig, config_sections


def test_with_seed_sets_every_stage_seed():
    cfg = ExperimentConfig().with_seed(5)
    assert cfg.seed == 5 and cfg.universe.seed == 5
    assert len({cfg.train.seed, cfg.sft.seed, cfg.grpo.seed}) == 3


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(eval=replace(ExperimentConfig().eval, downstream_label="brand")).validate()
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        replace(cfg, features=replace(cfg.features, d_img=8)).validate()
    assert set(config_sections(cfg)) == set(ExperimentConfig.SECTIONS)


def test_product_split_partitions_every_group(small_stack):
    ex, _, _ = small_stack
    s = ex.split
    ids = s["train"] + s["val"] + s["test"]
    assert sorted(ids) == list(range(len(ex.universe)))
    for name in ("train", "val", "test"):
        assert set(ex.groups_of(s[name])) == set(ex.universe.group_ids)


def test_family_split_holds_out_families(small_stack):
    ex, _, _ = small_stack
    cfg = replace(ex.config, data=replace(ex.config.data, split_by="family"))
    s = Experiment(cfg, ex.universe).split
    fam = lambda ids: {ex.universe.product(i).family_id for i in ids}
    assert not fam(s["train"]) & fam(s["test"])


def test_pairs_from_train_split(small_stack):
    ex, _, _ = small_stack
    train = set(ex.split["train"])
    assert all(p.query_id in train and p.positive_id in train for p in ex.pairs)
    outside = ex.split["test"][:2]
    with pytest.raises(ConfigError):
        Experiment(ex.config, ex.universe, [TrainingPair(outside[0], outside[1], "product")])


def test_gallery_protocol(small_stack):
    ex, _, _ = small_stack
    queries, gallery = ex.gallery_split("test")
    u = ex.universe
    assert len(gallery) == len(u.group_ids)
    assert not set(queries) & set(gallery)
    for g in gallery:
        members = [m for m in u.group_members(u.product(g).group_id) if m in set(ex.split["test"])]
        assert g == min(members)


def test_evaluations_run(small_stack):
    ex, enc, sft = small_stack
    fine = ex.evaluate_fine(enc, sft)
    assert [(r.metric, r.k) for r in fine] == [(m, k) for m in ("recall", "ndcg") for k in ex.config.eval.ks]
    assert all(0 <= r.value <= 1 for r in fine)
    assert {r.metric for r in ex.evaluate_coarse(enc)} == {"map"}
    assert set(ex.evaluate_cross_modal(enc)) == {"i2t", "t2i"}
    down = ex.evaluate_downstream(enc)
    assert set(down) == {"accuracy", "nmi", "ari", "purity"}


def test_query_overrides_change_features(small_stack):
    ex, _, _ = small_stack
    base = ex.pair_batches()
    over = ex.pair_batches({0: ("color=red",)}, {0: ("size=m",)})
    assert over.query_attrs[0] == ["color=red"] and over.cand_attrs[0] == ["size=m"]
    assert (over.Xq[0] != base.Xq[0]).any()
    assert (over.Xq[1:] == base.Xq[1:]).all() and (over.Xc == base.Xc).all()


def test_greedy_attributes_none_policy(small_stack):
    ex, _, _ = small_stack
    assert ex.greedy_attributes(None, [0, 1]) == {}
