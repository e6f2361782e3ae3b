"""Two-pass gradient caching for large contrastive batches.

Pass 1 embeds every chunk without keeping activations, computes the loss on
the full similarity matrix and caches dL/d(embedding) for every sample. Pass 2
re-embeds chunk by chunk and backpropagates the cached gradients, summing the
chunk contributions in ascending chunk order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import embednet
from .agcl import AgclConfig, batch_bm25, contrastive_loss, LossResult
from .corpus import ConfigError
from .embednet import AdamState, Encoder, adam_step


class StaleCacheError(RuntimeError):
    """Encoder parameters changed between the cache and accumulate passes."""


@dataclass(frozen=True)
class ChunkPlan:
    effective_batch: int
    chunk_size: int

    def __post_init__(self):
        if self.chunk_size < 1 or self.effective_batch < 1:
            raise ConfigError("chunk_size and effective_batch must be >= 1")

    @property
    def bounds(self) -> list[tuple[int, int]]:
        n, c = self.effective_batch, self.chunk_size
        return [(s, min(s + c, n)) for s in range(0, n, c)]


@dataclass
class ActivationMeter:
    """Counts rows of hidden activations alive at once."""

    live: int = 0
    peak: int = 0

    def hold(self, rows: int) -> None:
        self.live += rows
        self.peak = max(self.peak, self.live)

    def release(self, rows: int) -> None:
        self.live -= rows


@dataclass
class CachedGrads:
    query: np.ndarray
    candidate: np.ndarray
    version: int


def _chunked_encode(encoder: Encoder, X: np.ndarray, plan: ChunkPlan, meter: ActivationMeter | None) -> np.ndarray:
    out = []
    for s, e in plan.bounds:
        if meter:
            meter.hold(e - s)
        out.append(encoder.encode(X[s:e]))
        if meter:
            meter.release(e - s)
    return np.concatenate(out)


LossFn = Callable[[np.ndarray], LossResult]


def cache_pass(
    encoder: Encoder,
    Xq: np.ndarray,
    Xc: np.ndarray,
    loss_fn: LossFn,
    plan: ChunkPlan,
    meter: ActivationMeter | None = None,
) -> tuple[np.ndarray, np.ndarray, CachedGrads, LossResult]:
    Eq = _chunked_encode(encoder, Xq, plan, meter)
    Ec = _chunked_encode(encoder, Xc, plan, meter)
    res = loss_fn(Eq @ Ec.T)
    cached = CachedGrads(res.grad_S @ Ec, res.grad_S.T @ Eq, encoder.version)
    return Eq, Ec, cached, res


def accumulate_pass(
    encoder: Encoder,
    Xq: np.ndarray,
    Xc: np.ndarray,
    cached: CachedGrads,
    plan: ChunkPlan,
    order: Sequence[int] | None = None,
    meter: ActivationMeter | None = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients from cached embedding gradients.

    ``order`` only changes the processing order; contributions are still
    reduced in ascending chunk index.
    """
    if cached.version != encoder.version:
        raise StaleCacheError(
            f"cache built at parameter version {cached.version}, encoder is at {encoder.version}"
        )
    bounds = plan.bounds
    order = list(range(len(bounds))) if order is None else list(order)
    if sorted(order) != list(range(len(bounds))):
        raise ValueError("order must be a permutation of chunk indices")
    parts: dict[int, dict[str, np.ndarray]] = {}
    for ci in order:
        s, e = bounds[ci]
        if meter:
            meter.hold(2 * (e - s))
        gq = embednet.encode_backward(encoder.params, Xq[s:e], cached.query[s:e])
        gc = embednet.encode_backward(encoder.params, Xc[s:e], cached.candidate[s:e])
        if meter:
            meter.release(2 * (e - s))
        parts[ci] = {k: gq[k] + gc[k] for k in gq}
    total = {k: np.zeros_like(v) for k, v in encoder.params.items()}
    for ci in range(len(bounds)):
        for k in total:
            total[k] += parts[ci][k]
    return total


def full_batch_gradients(encoder: Encoder, Xq: np.ndarray, Xc: np.ndarray, loss_fn: LossFn):
    """Reference path: one forward/backward over the whole batch."""
    Eq = encoder.encode(Xq)
    Ec = encoder.encode(Xc)
    res = loss_fn(Eq @ Ec.T)
    gq = embednet.encode_backward(encoder.params, Xq, res.grad_S @ Ec)
    gc = embednet.encode_backward(encoder.params, Xc, res.grad_S.T @ Eq)
    return res.loss, {k: gq[k] + gc[k] for k in gq}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    chunk_size: int = 16
    steps: int = 300
    lr: float = 2e-3
    mode: str = "agcl"
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.mode not in ("infonce", "agcl"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class PairBatches:
    """Pre-featurised training pairs served as shuffled fixed-size batches."""

    Xq: np.ndarray
    Xc: np.ndarray
    query_attrs: list[list[str]]
    cand_attrs: list[list[str]]
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _order: list[int] = field(init=False, repr=False, default_factory=list)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def __len__(self):
        return self.Xq.shape[0]

    def next_indices(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self._rng.permutation(len(self)))
            out.append(int(self._order.pop()))
        return out

    def batches(self, n: int) -> Iterator[tuple]:
        while True:
            idx = self.next_indices(n)
            yield (self.Xq[idx], self.Xc[idx],
                   [self.query_attrs[i] for i in idx], [self.cand_attrs[i] for i in idx])


@dataclass
class TrainLogRow:
    step: int
    loss: float
    probe_recall_at_1: float
    wall_ms: float


def train_large_batch(
    encoder: Encoder,
    stream: PairBatches,
    config: TrainConfig,
    agcl_config: AgclConfig,
    probe: Callable[[Encoder], float] | None = None,
) -> list[TrainLogRow]:
    """Adam training with gradient caching; row 0 is the untrained probe."""
    config.validate()
    agcl_config.validate()
    plan = ChunkPlan(config.batch_size, config.chunk_size)
    state = AdamState(lr=config.lr)
    log = [TrainLogRow(0, float("nan"), probe(encoder) if probe else float("nan"), 0.0)]
    batches = stream.batches(config.batch_size)
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        Xq, Xc, qa, ca = next(batches)
        B = batch_bm25(qa, ca, agcl_config) if config.mode == "agcl" else None
        loss_fn = lambda S: contrastive_loss(S, agcl_config, config.mode, B)
        _, _, cached, res = cache_pass(encoder, Xq, Xc, loss_fn, plan)
        grads = accumulate_pass(encoder, Xq, Xc, cached, plan)
        encoder.set_params(adam_step(encoder.params, grads, state))
        wall = (time.perf_counter() - t0) * 1000.0
        log.append(TrainLogRow(step, res.loss, probe(encoder) if probe else float("nan"), wall))
    return log
