"""Autoregressive attribute generator and its SFT distillation from the oracle.

Sequences follow ``[<think> filler* </think>] <answer> attr+ </answer> <stop>``.
The policy conditions on the query feature vector through a linear context
``c = Wc x + bc``; at step t the hidden state is
``h_t = tanh(c + E[prev_t] + P[t])`` and logits are ``Wo h_t + bo``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ConfigError, ProductUniverse, distinguishing_keys, oracle_attributes
from .embednet import AdamState, adam_step, load_arrays, save_arrays

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANS_OPEN = "<answer>"
ANS_CLOSE = "</answer>"
STOP = "<stop>"
STRUCTURAL = (THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, STOP)
FILLERS = ("<compare>", "<differ>", "<note>")

POLICY_PARAMS = ("Wc", "bc", "E", "P", "Wo", "bo")


@dataclass(frozen=True)
class GenVocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if STOP not in self.tokens:
            raise ConfigError("vocabulary must contain the stop token")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, attribute_tokens: Sequence[str], fillers: Sequence[str] = FILLERS) -> "GenVocab":
        return cls(tuple(STRUCTURAL) + tuple(fillers) + tuple(attribute_tokens))

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def is_attribute(self, token: str) -> bool:
        return "=" in token and token in self._index

    def is_filler(self, token: str) -> bool:
        return token in self._index and token not in STRUCTURAL and "=" not in token


@dataclass
class Policy:
    vocab: GenVocab
    params: dict[str, np.ndarray]
    max_len: int = 16
    version: int = 0

    def __post_init__(self):
        if self.max_len < 4:
            raise ConfigError("max_len must be >= 4")

    @property
    def start_index(self) -> int:
        # extra embedding row used as the "previous token" at step 0
        return len(self.vocab)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.params = params
        self.version += 1


def init_policy(vocab: GenVocab, d_in: int, d_ctx: int = 48, max_len: int = 16, seed: int = 0) -> Policy:
    """Random conditioning/embedding weights, zero output layer (uniform start)."""
    rng = np.random.default_rng(seed)
    V = len(vocab)
    params = {
        "Wc": rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_ctx, d_in)),
        "bc": np.zeros(d_ctx),
        "E": rng.normal(0.0, 0.5, (V + 1, d_ctx)),
        "P": rng.normal(0.0, 0.5, (max_len, d_ctx)),
        "Wo": np.zeros((V, d_ctx)),
        "bo": np.zeros(V),
    }
    return Policy(vocab, params, max_len)


@dataclass
class GenSample:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    valid: bool
    attributes: tuple[str, ...]
    think_len: int = 0

    @property
    def logprob_sum(self) -> float:
        return float(sum(self.logprobs))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample(
    policy: Policy,
    x: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
    temperature: float = 1.0,
) -> GenSample:
    """Draw one sequence until <stop> or max_len; logprobs are at temperature 1."""
    p = policy.params
    ctx = p["Wc"] @ x + p["bc"]
    stop = policy.vocab.index(STOP)
    prev = policy.start_index
    toks: list[int] = []
    lps: list[float] = []
    for t in range(policy.max_len):
        h = np.tanh(ctx + p["E"][prev] + p["P"][t])
        logp = _log_softmax(p["Wo"] @ h + p["bo"])
        if greedy:
            tok = int(np.argmax(logp))
        else:
            z = logp / temperature
            probs = np.exp(z - z.max())
            probs /= probs.sum()
            tok = int(rng.choice(len(probs), p=probs))
        toks.append(tok)
        lps.append(float(logp[tok]))
        prev = tok
        if tok == stop:
            break
    attrs, valid = parse_answer(policy.vocab.decode(toks), policy.vocab)
    return GenSample(tuple(toks), tuple(lps), valid, attrs, think_length(policy.vocab.decode(toks)))


def _flatten(policy: Policy, seqs: Sequence[Sequence[int]]):
    rows, prev, pos, tok = [], [], [], []
    for i, s in enumerate(seqs):
        if len(s) > policy.max_len:
            raise ConfigError(f"sequence of length {len(s)} exceeds max_len {policy.max_len}")
        last = policy.start_index
        for t, k in enumerate(s):
            if not 0 <= k < len(policy.vocab):
                raise KeyError(f"token id {k} not in vocabulary")
            rows.append(i)
            prev.append(last)
            pos.append(t)
            tok.append(k)
            last = k
    return (np.array(rows, dtype=np.int64), np.array(prev, dtype=np.int64),
            np.array(pos, dtype=np.int64), np.array(tok, dtype=np.int64))


def _forward(policy: Policy, X: np.ndarray, flat):
    rows, prev, pos, tok = flat
    p = policy.params
    C = X @ p["Wc"].T + p["bc"]
    H = np.tanh(C[rows] + p["E"][prev] + p["P"][pos])
    logp_all = _log_softmax(H @ p["Wo"].T + p["bo"])
    return H, logp_all


def token_logprobs(policy: Policy, X: np.ndarray, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Teacher-forced log pi(token_t | prefix, query), flattened in sequence order.

    ``X`` holds one query feature row per sequence.
    """
    flat = _flatten(policy, seqs)
    if len(flat[0]) == 0:
        return np.zeros(0)
    _, logp_all = _forward(policy, np.atleast_2d(X), flat)
    return logp_all[np.arange(len(flat[3])), flat[3]]


def sequence_logprob(policy: Policy, x: np.ndarray, sequence: Sequence[int]) -> np.ndarray:
    return token_logprobs(policy, np.atleast_2d(x), [list(sequence)])


def logprob_backward(
    policy: Policy,
    X: np.ndarray,
    seqs: Sequence[Sequence[int]],
    coef: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of ``sum_t coef[t] * logprob[t]`` w.r.t. the policy parameters."""
    flat = _flatten(policy, seqs)
    rows, prev, pos, tok = flat
    X = np.atleast_2d(X)
    p = policy.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    if len(tok) == 0:
        return grads
    H, logp_all = _forward(policy, X, flat)
    coef = np.asarray(coef, dtype=np.float64)
    dZ = -np.exp(logp_all) * coef[:, None]
    dZ[np.arange(len(tok)), tok] += coef
    grads["Wo"] = dZ.T @ H
    grads["bo"] = dZ.sum(axis=0)
    dA = (dZ @ p["Wo"]) * (1.0 - H * H)
    dC = np.zeros((X.shape[0], dA.shape[1]))
    np.add.at(dC, rows, dA)
    grads["Wc"] = dC.T @ X
    grads["bc"] = dC.sum(axis=0)
    np.add.at(grads["E"], prev, dA)
    np.add.at(grads["P"], pos, dA)
    return grads


def parse_answer(tokens: Sequence[str], vocab: GenVocab | None = None) -> tuple[tuple[str, ...], bool]:
    """Validate the output grammar; returns (attributes, valid). Never raises."""
    toks = list(tokens)
    i = 0
    if toks[i:i + 1] == [THINK_OPEN]:
        i += 1
        while i < len(toks) and _is_filler(toks[i], vocab):
            i += 1
        if toks[i:i + 1] != [THINK_CLOSE]:
            return (), False
        i += 1
    if toks[i:i + 1] != [ANS_OPEN]:
        return (), False
    i += 1
    attrs = []
    while i < len(toks) and _is_attr(toks[i], vocab):
        attrs.append(toks[i])
        i += 1
    if toks[i:] != [ANS_CLOSE, STOP]:
        return (), False
    if not attrs or len(set(attrs)) != len(attrs):
        return (), False
    return tuple(attrs), True


def _is_attr(tok: str, vocab: GenVocab | None) -> bool:
    return vocab.is_attribute(tok) if vocab is not None else ("=" in tok and tok not in STRUCTURAL)


def _is_filler(tok: str, vocab: GenVocab | None) -> bool:
    return vocab.is_filler(tok) if vocab is not None else tok in FILLERS


def think_length(tokens: Sequence[str]) -> int:
    if not tokens or tokens[0] != THINK_OPEN:
        return 0
    n = 0
    for t in tokens[1:]:
        if t == THINK_CLOSE:
            break
        n += 1
    return n


def answer_length(tokens: Sequence[str]) -> int:
    try:
        start = tokens.index(ANS_OPEN) + 1
    except ValueError:
        return 0
    end = tokens.index(ANS_CLOSE) if ANS_CLOSE in tokens[start:] else len(tokens)
    return max(0, end - start)


def oracle_sequence(universe: ProductUniverse, product_id: int) -> list[str]:
    """Grammar-wrapped oracle output: one think filler per distinguishing key."""
    n_think = len(distinguishing_keys(universe, product_id))
    think = [FILLERS[i % len(FILLERS)] for i in range(n_think)]
    return ([THINK_OPEN] + think + [THINK_CLOSE, ANS_OPEN]
            + oracle_attributes(universe, product_id) + [ANS_CLOSE, STOP])


@dataclass(frozen=True)
class SftConfig:
    n_examples: int = 2000
    steps: int = 400
    batch_size: int = 64
    lr: float = 1e-2
    seed: int = 0


def sft_train(
    policy: Policy,
    features: np.ndarray,
    targets: Sequence[Sequence[int]],
    config: SftConfig,
) -> tuple[Policy, list[float]]:
    """Teacher-forced cross-entropy on oracle sequences. Returns (new policy, losses)."""
    n = min(config.n_examples, len(targets))
    trained = clone_policy(policy)
    if n == 0 or config.steps == 0:
        return trained, []
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    losses = []
    order: list[int] = []
    for _ in range(config.steps):
        idx = []
        while len(idx) < min(config.batch_size, n):
            if not order:
                order = list(rng.permutation(n))
            idx.append(int(order.pop()))
        seqs = [targets[i] for i in idx]
        X = features[idx]
        lp = token_logprobs(trained, X, seqs)
        losses.append(float(-lp.mean()))
        grads = logprob_backward(trained, X, seqs, -np.ones(len(lp)) / len(lp))
        trained.set_params(adam_step(trained.params, grads, state))
    return trained, losses


def clone_policy(policy: Policy) -> Policy:
    return Policy(policy.vocab, {k: v.copy() for k, v in policy.params.items()},
                  policy.max_len, policy.version)


def snapshot_reference(policy: Policy) -> Policy:
    """Deep, read-only copy used as the KL anchor."""
    ref = clone_policy(policy)
    for arr in ref.params.values():
        arr.setflags(write=False)
    return ref


def save_policy(policy: Policy, path: str | Path) -> None:
    save_arrays(path, policy.params, {"vocab": list(policy.vocab.tokens), "max_len": policy.max_len})


def load_policy(path: str | Path) -> Policy:
    arrays, meta = load_arrays(path)
    return Policy(GenVocab(tuple(meta["vocab"])), arrays, int(meta["max_len"]))


def generate_attributes(policy: Policy, X: np.ndarray, greedy: bool = True, seed: int = 0) -> list[GenSample]:
    rng = np.random.default_rng(seed)
    return [sample(policy, x, rng, greedy=greedy) for x in np.atleast_2d(X)]


def samples_to_jsonl(samples: Sequence[GenSample], query_ids: Sequence[int], vocab: GenVocab, path) -> None:
    with open(path, "w") as f:
        for qid, s in zip(query_ids, samples):
            f.write(json.dumps({"query_id": qid, "tokens": vocab.decode(s.tokens),
                                "valid": int(s.valid), "logprob_sum": s.logprob_sum}) + "\n")
