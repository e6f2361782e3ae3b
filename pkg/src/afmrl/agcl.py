"""InfoNCE and the attribute-guided contrastive loss, with gradients w.r.t. S.

Both losses are one-directional (query rows against candidate columns) and
averaged over rows. ``S[i, i]`` is the positive of query ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import embednet
from .corpus import ConfigError
from .textscore import build_index, bm25_matrix


@dataclass(frozen=True)
class AgclConfig:
    temperature: float = 0.02
    margin: float = 0.4
    k1: float = 1.2
    b: float = 0.75
    # also apply the loss in the candidate -> query direction
    symmetric: bool = False

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossResult:
    loss: float
    grad_S: np.ndarray
    row_losses: np.ndarray | None = None


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


def infonce(S: np.ndarray, tau: float) -> LossResult:
    _check_tau(tau)
    n = S.shape[0]
    logits = S / tau
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    rows = lse - np.diag(logits)
    P = np.exp(logits - lse[:, None])
    grad = (P - np.eye(n)) / (tau * n)
    return LossResult(float(rows.mean()), grad, rows)


def importance_weights(B: np.ndarray) -> np.ndarray:
    return np.exp(1.0 + np.tanh(B))


def false_negative_mask(S: np.ndarray, delta: float) -> np.ndarray:
    M = (S > np.diag(S)[:, None] + delta).astype(np.int8)
    np.fill_diagonal(M, 0)
    return M


def agcl_loss(S: np.ndarray, W: np.ndarray, M: np.ndarray, tau: float) -> LossResult:
    """Weighted, masked InfoNCE; masked entries receive exactly zero gradient."""
    _check_tau(tau)
    n = S.shape[0]
    active = M == 0
    np.fill_diagonal(active, True)
    logits = np.where(active, S / tau + np.log(W), -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    expd = np.where(active, np.exp(logits), 0.0)
    lse = np.log(expd.sum(axis=1))
    rows = lse - np.diag(logits)
    P = expd / expd.sum(axis=1, keepdims=True)
    grad = (P - np.eye(n)) / (tau * n)
    grad[~active] = 0.0
    # a row with no valid negatives puts all mass on the positive
    lonely = active.sum(axis=1) == 1
    rows[lonely] = 0.0
    grad[lonely] = 0.0
    return LossResult(float(rows.mean()), grad, rows)


def contrastive_loss(S: np.ndarray, config: AgclConfig, mode: str, B: np.ndarray | None = None) -> LossResult:
    """Loss + grad_S for a similarity block under ``mode`` in {infonce, agcl}."""
    if mode == "infonce":
        res = infonce(S, config.temperature)
        if config.symmetric:
            back = infonce(S.T, config.temperature)
            res = LossResult((res.loss + back.loss) / 2, (res.grad_S + back.grad_S.T) / 2)
        return res
    if mode == "agcl":
        if B is None:
            raise ConfigError("agcl mode needs a BM25 matrix")
        W = importance_weights(B)
        res = agcl_loss(S, W, false_negative_mask(S, config.margin), config.temperature)
        if config.symmetric:
            back = agcl_loss(S.T, W.T, false_negative_mask(S.T, config.margin), config.temperature)
            res = LossResult((res.loss + back.loss) / 2, (res.grad_S + back.grad_S.T) / 2)
        return res
    raise ConfigError(f"unknown contrastive mode {mode!r}")


def batch_bm25(query_attrs: Sequence[Sequence[str]], cand_attrs: Sequence[Sequence[str]], config: AgclConfig) -> np.ndarray:
    index = build_index(cand_attrs, config.k1, config.b)
    return bm25_matrix(index, query_attrs, cand_attrs)


def batch_contrastive_step(
    params: dict[str, np.ndarray],
    Xq: np.ndarray,
    Xc: np.ndarray,
    config: AgclConfig,
    mode: str,
    query_attrs: Sequence[Sequence[str]] | None = None,
    cand_attrs: Sequence[Sequence[str]] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Full-batch loss and parameter gradients for one contrastive step."""
    config.validate()
    if Xq.shape[0] < 2:
        raise ConfigError("contrastive batch needs at least 2 pairs")
    Eq = embednet.encode(params, Xq)
    Ec = embednet.encode(params, Xc)
    S = Eq @ Ec.T
    B = batch_bm25(query_attrs, cand_attrs, config) if mode == "agcl" else None
    res = contrastive_loss(S, config, mode, B)
    gq = res.grad_S @ Ec
    gc = res.grad_S.T @ Eq
    grads_q = embednet.encode_backward(params, Xq, gq)
    grads_c = embednet.encode_backward(params, Xc, gc)
    return res.loss, {k: grads_q[k] + grads_c[k] for k in grads_q}
