"""Miniature post-LN transformer encoder shared by every task head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .rng import STREAM_ENCODER_INIT, numpy_stream
from .tensor import (
    ShapeError,
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    getitem,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)
from .tokenizer import TokenSequence

MASK_FILL = -1e9
INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    vocab_size: int = 4000
    dropout_p: float = 0.1
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_len", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be at least 3, got {self.max_len}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1], got {self.dropout_p}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = float(v) if k in ("dropout_p", "layer_norm_eps") else int(v)
        return cls(**kw)


# Sizes only. The pretrained model families are not reproduced.
PRESETS: dict[str, EncoderConfig] = {
    "tiny": EncoderConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256, max_len=8, vocab_size=300, dropout_p=0.0),
    "desk": EncoderConfig(),
    "desk-long": EncoderConfig(max_len=128),
    "bert-mini": EncoderConfig(n_layers=4, d_model=256, n_heads=4, d_ff=1024, max_len=128, vocab_size=8000),
}


class EncoderParams:
    """The shared parameter set, keyed by dotted names."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = expected_shapes(config)
        if set(expected) != set(tensors):
            raise ShapeError("parameter names do not match the config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return sorted(self.tensors.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def expected_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}"] = (d, d)
        shapes[p + "attn_norm.gain"] = (d,)
        shapes[p + "attn_norm.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ffn_norm.gain"] = (d,)
        shapes[p + "ffn_norm.bias"] = (d,)
    return shapes


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std^2) redrawn until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    rng = numpy_stream(seed, STREAM_ENCODER_INIT)
    tensors = {}
    # Insertion order of expected_shapes fixes RNG consumption.
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2")):
            data = np.zeros(shape)
        else:
            data = truncated_normal(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderParams(config, tensors)


class TokenBatch(NamedTuple):
    ids: np.ndarray
    mask: np.ndarray


def as_batch(batch: Union[TokenBatch, Sequence[TokenSequence]]) -> TokenBatch:
    if isinstance(batch, TokenBatch):
        return batch
    ids = np.array([s.ids for s in batch], dtype=np.int64)
    mask = np.array([s.attention_mask for s in batch], dtype=np.int64)
    return TokenBatch(ids, mask)


class EncoderOutput(NamedTuple):
    hidden: Tensor
    attention: list[np.ndarray]


def encode_batch(
    params: EncoderParams,
    batch: Union[TokenBatch, Sequence[TokenSequence]],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_attention: bool = False,
):
    """Hidden states ``[batch, max_len, d_model]`` for a batch of token sequences.

    With ``return_attention`` the per-layer attention weights
    ``[batch, heads, query, key]`` are returned alongside as an
    :class:`EncoderOutput`.
    """
    cfg = params.config
    ids, mask = as_batch(batch)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_len or mask.shape != ids.shape:
        raise ShapeError(f"batch of shape {ids.shape} does not match max_len={cfg.max_len}")
    p = cfg.dropout_p
    B, L = ids.shape
    d, H, dh = cfg.d_model, cfg.n_heads, cfg.head_dim

    x = add(embedding(params["embeddings.token"], ids), params["embeddings.position"])
    x = dropout(x, p, rng, train_mode)

    key_bias = np.where(mask[:, None, None, :] > 0, 0.0, MASK_FILL)
    inv_sqrt = 1.0 / math.sqrt(dh)
    attn_maps = []
    for i in range(cfg.n_layers):
        pre = f"layer{i}."

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(matmul(x, params[pre + "attn.q"]))
        k = heads(matmul(x, params[pre + "attn.k"]))
        v = heads(matmul(x, params[pre + "attn.v"]))
        scores = add(scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv_sqrt), key_bias)
        weights = softmax(scores)
        if return_attention:
            attn_maps.append(weights.data.copy())
        ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
        attn_out = dropout(matmul(ctx, params[pre + "attn.o"]), p, rng, train_mode)
        x = layer_norm(add(x, attn_out), params[pre + "attn_norm.gain"], params[pre + "attn_norm.bias"], cfg.layer_norm_eps)

        hidden = gelu(add(matmul(x, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
        ff = add(matmul(hidden, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
        ff = dropout(ff, p, rng, train_mode)
        x = layer_norm(add(x, ff), params[pre + "ffn_norm.gain"], params[pre + "ffn_norm.bias"], cfg.layer_norm_eps)

    if return_attention:
        return EncoderOutput(x, attn_maps)
    return x


def pool_cls(hidden: Tensor) -> Tensor:
    """The final-layer vector at position 0 ([CLS]) of every sequence."""
    return getitem(hidden, (slice(None), 0, slice(None)))
