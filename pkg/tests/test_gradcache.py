import numpy as np
import pytest
from hypothesis import given, strategies as st

from afmrl.agcl import AgclConfig, contrastive_loss
from afmrl.corpus import ConfigError
from afmrl.embednet import Encoder
from afmrl.gradcache import (
    ActivationMeter,
    ChunkPlan,
    PairBatches,
    StaleCacheError,
    TrainConfig,
    accumulate_pass,
    cache_pass,
    full_batch_gradients,
    train_large_batch,
)


def setup(n, seed=0, d_in=6):
    rng = np.random.default_rng(seed)
    enc = Encoder.create(d_in, 5, 4, seed)
    enc.params["b1"] = rng.normal(size=5)
    return enc, rng.normal(size=(n, d_in)), rng.normal(size=(n, d_in))


def loss_fn(S):
    return contrastive_loss(S, AgclConfig(temperature=0.1), "infonce")


def rel_diff(a, b):
    return max(np.max(np.abs(a[k] - b[k])) / max(np.max(np.abs(b[k])), 1e-300) for k in a)


def test_chunk_bounds():
    assert ChunkPlan(10, 4).bounds == [(0, 4), (4, 8), (8, 10)]
    with pytest.raises(ConfigError):
        ChunkPlan(4, 0)


def test_single_chunk_embeddings_equal_direct():
    enc, Xq, Xc = setup(8)
    Eq, Ec, _, _ = cache_pass(enc, Xq, Xc, loss_fn, ChunkPlan(8, 8))
    np.testing.assert_array_equal(Eq, enc.encode(Xq))
    np.testing.assert_array_equal(Ec, enc.encode(Xc))


def test_zero_loss_gradient_gives_zero_cache():
    from afmrl.agcl import LossResult
    enc, Xq, Xc = setup(6)
    zero = lambda S: LossResult(0.0, np.zeros_like(S))
    plan = ChunkPlan(6, 2)
    _, _, cached, _ = cache_pass(enc, Xq, Xc, zero, plan)
    assert not cached.query.any() and not cached.candidate.any()
    assert all(not g.any() for g in accumulate_pass(enc, Xq, Xc, cached, plan).values())


def test_cached_grads_match_full_batch():
    enc, Xq, Xc = setup(8)
    Eq, Ec, cached, res = cache_pass(enc, Xq, Xc, loss_fn, ChunkPlan(8, 3))
    ref = loss_fn(enc.encode(Xq) @ enc.encode(Xc).T)
    np.testing.assert_allclose(cached.query, ref.grad_S @ enc.encode(Xc), atol=1e-12)
    np.testing.assert_allclose(cached.candidate, ref.grad_S.T @ enc.encode(Xq), atol=1e-12)


@pytest.mark.parametrize("c", [1, 3, 4, 8, 32])
def test_two_pass_equals_full_batch(c):
    enc, Xq, Xc = setup(32, seed=c)
    plan = ChunkPlan(32, c)
    _, _, cached, _ = cache_pass(enc, Xq, Xc, loss_fn, plan)
    _, full = full_batch_gradients(enc, Xq, Xc, loss_fn)
    assert rel_diff(accumulate_pass(enc, Xq, Xc, cached, plan), full) < 1e-9


def test_chunk_order_does_not_change_result():
    enc, Xq, Xc = setup(12, seed=1)
    plan = ChunkPlan(12, 3)
    _, _, cached, _ = cache_pass(enc, Xq, Xc, loss_fn, plan)
    a = accumulate_pass(enc, Xq, Xc, cached, plan)
    b = accumulate_pass(enc, Xq, Xc, cached, plan, order=[3, 1, 0, 2])
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    with pytest.raises(ValueError):
        accumulate_pass(enc, Xq, Xc, cached, plan, order=[0, 0, 1, 2])


def test_stale_cache_rejected():
    enc, Xq, Xc = setup(4)
    plan = ChunkPlan(4, 2)
    _, _, cached, _ = cache_pass(enc, Xq, Xc, loss_fn, plan)
    enc.set_params(enc.copy().params)
    with pytest.raises(StaleCacheError):
        accumulate_pass(enc, Xq, Xc, cached, plan)


@given(st.integers(2, 20), st.integers(1, 20))
def test_peak_activation_bounded_by_chunk(n, c):
    enc, Xq, Xc = setup(n)
    plan = ChunkPlan(n, c)
    meter = ActivationMeter()
    _, _, cached, _ = cache_pass(enc, Xq, Xc, loss_fn, plan, meter)
    accumulate_pass(enc, Xq, Xc, cached, plan, meter=meter)
    assert meter.peak <= 2 * min(c, n) and meter.live == 0


def test_train_config_validation():
    for bad in (dict(batch_size=1), dict(chunk_size=0), dict(steps=-1), dict(lr=0), dict(mode="x")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def _stream(n=64, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(8, 6))
    g = np.arange(n) % 8
    Xq = centers[g] + 0.3 * rng.normal(size=(n, 6))
    Xc = centers[g] + 0.3 * rng.normal(size=(n, 6))
    attrs = [[f"g={i}"] for i in g]
    return PairBatches(Xq, Xc, attrs, attrs, seed=seed), centers


def test_zero_steps_leave_params():
    enc = Encoder.create(6, 5, 4, 0)
    before = enc.checksum()
    stream, _ = _stream()
    log = train_large_batch(enc, stream, TrainConfig(steps=0), AgclConfig())
    assert enc.checksum() == before and len(log) == 1


def test_training_is_deterministic():
    def run():
        enc = Encoder.create(6, 16, 8, 0)
        stream, _ = _stream()
        cfg = TrainConfig(batch_size=16, chunk_size=4, steps=30, lr=1e-2, mode="agcl")
        return train_large_batch(enc, stream, cfg, AgclConfig(temperature=0.1)), enc
    log_a, enc_a = run()
    log_b, enc_b = run()
    assert [repr((r.step, r.loss)) for r in log_a] == [repr((r.step, r.loss)) for r in log_b]
    assert enc_a.checksum() == enc_b.checksum()


def test_training_improves_probe_on_universe():
    from afmrl.corpus import UniverseConfig
    from afmrl.pipeline import Experiment, ExperimentConfig

    cfg = ExperimentConfig(
        universe=UniverseConfig(n_categories=4, families_per_category=3, groups_per_family=3, products_per_group=10),
        train=TrainConfig(batch_size=64, chunk_size=16, steps=200),
    ).with_seed(1)
    _, log = Experiment(cfg).train_encoder("agcl")
    assert log[-1].probe_recall_at_1 > log[0].probe_recall_at_1


def test_batches_cycle_through_all_pairs():
    stream, _ = _stream(n=10)
    idx = stream.next_indices(10)
    assert sorted(idx) == list(range(10))
