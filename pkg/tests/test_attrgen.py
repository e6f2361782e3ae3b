import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afmrl import attrgen
from afmrl.attrgen import (
    ANS_CLOSE,
    ANS_OPEN,
    STOP,
    THINK_CLOSE,
    THINK_OPEN,
    GenVocab,
    Policy,
    SftConfig,
    answer_length,
    init_policy,
    load_policy,
    logprob_backward,
    parse_answer,
    sample,
    save_policy,
    sequence_logprob,
    sft_train,
    snapshot_reference,
    think_length,
    token_logprobs,
)
from afmrl.corpus import ConfigError
from afmrl.rar import policy_kl

from oracles import central_diff, max_rel_err

VOCAB = GenVocab.build(["color=red", "color=blue", "size=m"])


def random_policy(vocab=VOCAB, d_in=4, d_ctx=6, max_len=8, seed=0):
    pol = init_policy(vocab, d_in, d_ctx, max_len, seed)
    rng = np.random.default_rng(seed + 1)
    pol.params["Wo"] = rng.normal(size=pol.params["Wo"].shape)
    pol.params["bo"] = rng.normal(size=pol.params["bo"].shape)
    return pol


def test_vocab_rules():
    with pytest.raises(ConfigError):
        GenVocab(("a=1", "a=1", STOP))
    with pytest.raises(ConfigError):
        GenVocab(("a=1",))
    with pytest.raises(KeyError):
        VOCAB.index("nope")
    assert VOCAB.decode(VOCAB.encode([STOP, "size=m"])) == [STOP, "size=m"]
    assert VOCAB.is_attribute("size=m") and not VOCAB.is_attribute(STOP)
    assert VOCAB.is_filler("<note>") and not VOCAB.is_filler(THINK_OPEN)


def test_greedy_is_deterministic():
    pol = random_policy()
    x = np.ones(4)
    a = sample(pol, x, np.random.default_rng(0), greedy=True)
    b = sample(pol, x, np.random.default_rng(99), greedy=True)
    assert a == b


@given(st.integers(0, 10_000))
def test_recorded_logprobs_match_rescoring(seed):
    pol = random_policy(seed=seed % 50)
    x = np.random.default_rng(seed).normal(size=4)
    s = sample(pol, x, np.random.default_rng(seed))
    assert len(s.tokens) <= pol.max_len
    np.testing.assert_allclose(sequence_logprob(pol, x, s.tokens), s.logprobs, atol=1e-12)


def test_batched_logprobs_match_single():
    pol = random_policy()
    rng = np.random.default_rng(3)
    X = rng.normal(size=(3, 4))
    seqs = [sample(pol, x, rng).tokens for x in X]
    flat = token_logprobs(pol, X, seqs)
    single = np.concatenate([sequence_logprob(pol, x, s) for x, s in zip(X, seqs)])
    np.testing.assert_allclose(flat, single, atol=1e-14)


def test_single_token_vocab_logprob_zero():
    pol = init_policy(GenVocab((STOP,)), 3, 4, 4, seed=0)
    assert sequence_logprob(pol, np.ones(3), [0]).tolist() == [0.0]


def test_first_token_frequencies_match_softmax():
    vocab = GenVocab((STOP, "a=1", "a=2", "a=3"))
    pol = init_policy(vocab, 2, 3, 4, seed=0)
    logits = np.array([1.5, 0.2, -0.4, 0.9])
    pol.params["bo"] = logits
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    n = 100_000
    rng = np.random.default_rng(0)
    firsts = np.array([sample(pol, np.zeros(2), rng).tokens[0] for _ in range(n)])
    counts = np.bincount(firsts, minlength=4)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 3 * sigma + 1)


def test_logprob_grad_finite_difference():
    vocab = GenVocab((STOP, "a=1"))
    pol = random_policy(vocab, d_in=1, d_ctx=1, max_len=4, seed=2)
    assert sum(v.size for v in pol.params.values()) <= 20
    x = np.array([[0.7]])
    seqs = [[1, 1, 0]]
    coef = np.array([0.3, -1.2, 0.8])

    def f(params):
        saved = pol.params
        pol.params = params
        out = float(coef @ token_logprobs(pol, x, seqs))
        pol.params = saved
        return out

    fd = central_diff(f, {k: v.copy() for k, v in pol.params.items()})
    assert max_rel_err(logprob_backward(pol, x, seqs, coef), fd) < 1e-5


def test_out_of_range_tokens_and_lengths():
    pol = random_policy(max_len=4)
    with pytest.raises(KeyError):
        token_logprobs(pol, np.ones((1, 4)), [[len(VOCAB)]])
    with pytest.raises(ConfigError):
        token_logprobs(pol, np.ones((1, 4)), [[0] * 5])
    with pytest.raises(ConfigError):
        Policy(VOCAB, pol.params, max_len=3)


@pytest.mark.parametrize("tokens, expected", [
    ([ANS_OPEN, "color=red", ANS_CLOSE, STOP], (("color=red",), True)),
    ([ANS_OPEN, ANS_CLOSE, STOP], ((), False)),
    ([ANS_OPEN, "color=red", "color=red", ANS_CLOSE, STOP], ((), False)),
    ([THINK_OPEN, "<note>", THINK_CLOSE, ANS_OPEN, "size=m", "color=red", ANS_CLOSE, STOP],
     (("size=m", "color=red"), True)),
    ([THINK_OPEN, THINK_CLOSE, ANS_OPEN, "size=m", ANS_CLOSE, STOP], (("size=m",), True)),
    ([THINK_OPEN, "<note>", ANS_OPEN, "size=m", ANS_CLOSE, STOP], ((), False)),
    ([ANS_OPEN, "size=m", ANS_CLOSE], ((), False)),
    ([ANS_OPEN, "size=m", ANS_CLOSE, STOP, STOP], ((), False)),
    (["size=m", ANS_CLOSE, STOP], ((), False)),
    ([], ((), False)),
    ([ANS_OPEN, "<note>", ANS_CLOSE, STOP], ((), False)),
])
def test_parse_answer(tokens, expected):
    assert parse_answer(tokens, VOCAB) == expected


@given(st.lists(st.sampled_from(VOCAB.tokens), max_size=10))
def test_parse_never_raises_and_valid_means_unique(tokens):
    attrs, valid = parse_answer(tokens, VOCAB)
    assert valid == bool(attrs)
    assert len(set(attrs)) == len(attrs)


def test_lengths():
    toks = [THINK_OPEN, "<note>", "<differ>", THINK_CLOSE, ANS_OPEN, "size=m", "color=red", ANS_CLOSE, STOP]
    assert think_length(toks) == 2 and answer_length(toks) == 2
    assert think_length([ANS_OPEN]) == 0 and answer_length([STOP]) == 0


def test_sft_zero_examples_unchanged():
    pol = random_policy()
    out, losses = sft_train(pol, np.ones((0, 4)), [], SftConfig(n_examples=0))
    assert losses == []
    for k in pol.params:
        np.testing.assert_array_equal(out.params[k], pol.params[k])


def test_sft_initial_loss_is_log_vocab():
    pol = init_policy(VOCAB, 4, 6, 8, seed=0)
    target = VOCAB.encode([ANS_OPEN, "size=m", ANS_CLOSE, STOP])
    _, losses = sft_train(pol, np.ones((1, 4)), [target], SftConfig(n_examples=1, steps=1, batch_size=1))
    assert losses[0] == pytest.approx(math.log(len(VOCAB)), abs=1e-12)


def test_sft_learns_oracle_first_attribute():
    from afmrl.corpus import UniverseConfig
    from afmrl.pipeline import Experiment, ExperimentConfig, first_attribute_accuracy

    cfg = ExperimentConfig(universe=UniverseConfig(n_categories=3, families_per_category=3,
                                                   groups_per_family=4, products_per_group=10)).with_seed(2)
    ex = Experiment(cfg)
    pol, losses = ex.train_sft()
    assert losses[-1] < 0.2 * losses[0]
    assert first_attribute_accuracy(ex, pol, ex.split["train"]) >= 0.8


def test_reference_is_frozen_and_kl_zero():
    pol = random_policy()
    ref = snapshot_reference(pol)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 4))
    seqs = [sample(pol, x, rng).tokens for x in X]
    assert policy_kl(pol, ref, X, seqs) == 0.0
    before = token_logprobs(ref, X, seqs)
    trained, _ = sft_train(pol, X, seqs, SftConfig(n_examples=4, steps=5, batch_size=4))
    np.testing.assert_array_equal(token_logprobs(ref, X, seqs), before)
    with pytest.raises(ValueError):
        ref.params["Wo"][0, 0] = 1.0
    assert policy_kl(trained, ref, X, seqs) > 0


def test_policy_round_trip(tmp_path):
    pol = random_policy()
    save_policy(snapshot_reference(pol), tmp_path / "p.json")
    back = load_policy(tmp_path / "p.json")
    assert back.vocab == pol.vocab and back.max_len == pol.max_len
    for k in pol.params:
        np.testing.assert_array_equal(back.params[k], pol.params[k])


def test_samples_jsonl(tmp_path):
    pol = random_policy()
    samples = attrgen.generate_attributes(pol, np.ones((2, 4)), greedy=False, seed=1)
    attrgen.samples_to_jsonl(samples, [5, 6], VOCAB, tmp_path / "s.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert [r["query_id"] for r in rows] == [5, 6]
    assert rows[0]["logprob_sum"] == pytest.approx(samples[0].logprob_sum)
