"""The representation model: features -> unit-norm embeddings, with exact backprop.

Architecture: ``h = tanh(W1 x + b1)``, ``e = W2 h + b2``, ``f(x) = e / |e|``.
Inputs concatenate a signed-hashed bag of text tokens, the image vector and a
one-hot task instruction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import INSTRUCTIONS, ConfigError, Product

PARAM_NAMES = ("W1", "b1", "W2", "b2")

# which blocks each side of a task sees
QUERY_MODALITY = {"i2t": "image", "t2i": "text", "product": "both"}
TARGET_MODALITY = {"i2t": "text", "t2i": "image", "product": "both"}


class DegenerateEmbeddingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    d_text: int = 128
    d_img: int = 16
    hash_seed: int = 0

    @property
    def d_in(self) -> int:
        return self.d_text + self.d_img + len(INSTRUCTIONS)


@lru_cache(maxsize=65536)
def token_hash(token: str, d_text: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode(), digest_size=8, salt=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % d_text, (1.0 if (h >> 63) & 1 else -1.0)


def hashed_bag(tokens: Iterable[str], d_text: int, seed: int) -> np.ndarray:
    v = np.zeros(d_text)
    for t in tokens:
        idx, sign = token_hash(t, d_text, seed)
        v[idx] += sign
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def featurize(
    product: Product,
    instruction: str,
    extra_attribute_tokens: Sequence[str] = (),
    *,
    config: FeatureConfig,
    modality: str | None = None,
) -> np.ndarray:
    """Feature vector for one product view.

    ``modality`` defaults to the query side of ``instruction``. Extra attribute
    tokens always enter the text block, even for an image-only view.
    """
    if instruction not in INSTRUCTIONS:
        raise ConfigError(f"unknown instruction {instruction!r}")
    modality = modality or QUERY_MODALITY[instruction]
    if modality not in ("text", "image", "both"):
        raise ConfigError(f"unknown modality {modality!r}")
    tokens: list[str] = list(product.text_tokens) if modality != "image" else []
    tokens += list(extra_attribute_tokens)
    text = hashed_bag(tokens, config.d_text, config.hash_seed)
    if modality == "text":
        img = np.zeros(config.d_img)
    else:
        img = np.asarray(product.image_vec, dtype=np.float64)
        if img.shape != (config.d_img,):
            raise ConfigError(f"image_vec has dim {img.shape}, expected {config.d_img}")
    instr = np.zeros(len(INSTRUCTIONS))
    instr[INSTRUCTIONS.index(instruction)] = 1.0
    return np.concatenate([text, img, instr])


def featurize_many(products, instruction, *, config, modality=None, extras=None) -> np.ndarray:
    extras = extras if extras is not None else [()] * len(products)
    return np.stack([
        featurize(p, instruction, ex, config=config, modality=modality)
        for p, ex in zip(products, extras)
    ])


def init_params(d_in: int, d_hidden: int, d_embed: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_hidden, d_in)),
        "b1": np.zeros(d_hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(d_hidden), (d_embed, d_hidden)),
        "b2": np.zeros(d_embed),
    }


def encode(params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Embed a single feature vector or a batch of row vectors."""
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    H = np.tanh(X2 @ params["W1"].T + params["b1"])
    E = H @ params["W2"].T + params["b2"]
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError("embedding norm below 1e-12")
    Y = E / norms[:, None]
    return Y[0] if single else Y


def encode_backward(params: dict[str, np.ndarray], X: np.ndarray, grad_Y: np.ndarray) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of ``encode`` w.r.t. the parameters (forward recomputed)."""
    X2 = np.atleast_2d(X)
    G = np.atleast_2d(grad_Y)
    H = np.tanh(X2 @ params["W1"].T + params["b1"])
    E = H @ params["W2"].T + params["b2"]
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    Y = E / norms
    # d(e/|e|) projects out the radial component
    dE = (G - Y * np.sum(Y * G, axis=1, keepdims=True)) / norms
    dH = dE @ params["W2"]
    dZ = dH * (1.0 - H * H)
    return {
        "W1": dZ.T @ X2,
        "b1": dZ.sum(axis=0),
        "W2": dE.T @ H,
        "b2": dE.sum(axis=0),
    }


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


@dataclass
class Encoder:
    """Mutable parameter holder with a version counter bumped on every update."""

    params: dict[str, np.ndarray]
    version: int = 0

    @classmethod
    def create(cls, d_in: int, d_hidden: int, d_embed: int, seed: int) -> "Encoder":
        return cls(init_params(d_in, d_hidden, d_embed, np.random.default_rng(seed)))

    def encode(self, X: np.ndarray) -> np.ndarray:
        return encode(self.params, X)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.params = params
        self.version += 1

    def copy(self) -> "Encoder":
        return Encoder({k: v.copy() for k, v in self.params.items()}, self.version)

    def checksum(self) -> str:
        return params_checksum(self.params)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and mutates ``state``."""
    if set(params) != set(grads):
        raise ValueError(f"gradient keys {sorted(grads)} do not match params {sorted(params)}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Named-array checkpoint as JSON; float repr keeps 64-bit values bit-exact."""
    payload = {
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": [float(x) for x in np.ravel(a)]}
            for name, a in sorted(arrays.items())
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, separators=(",", ":"))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as f:
        payload = json.load(f)
    arrays = {
        name: np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])
        for name, obj in payload["arrays"].items()
    }
    return arrays, payload.get("meta", {})


def save_encoder(encoder: Encoder, path: str | Path, meta: dict | None = None) -> None:
    save_arrays(path, encoder.params, dict(meta or {}, checksum=encoder.checksum()))


def load_encoder(path: str | Path) -> Encoder:
    arrays, meta = load_arrays(path)
    enc = Encoder(arrays)
    if "checksum" in meta and enc.checksum() != meta["checksum"]:
        raise ValueError(f"{path}: parameter checksum mismatch")
    return enc
