"""BERT-style transformer encoder: post-norm blocks, learned absolute
positions, a single segment id, an MLM head (decoder optionally tied to the
token embeddings) and an optional tanh-pooled classification head.

Every parameter tensor has a canonical dotted name; `parameter_shapes` is
the single source of truth that initialization, counting and checkpoint
serialization all share.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError, ShapeError
from .rng import SplitRng
from .tensor import Tensor

MASK_BIAS = -1e9  # stands in for -inf so float32 softmax stays NaN-free


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_size: int = 512
    max_positions: int = 512
    dropout_rate: float = 0.1
    num_labels: int = 0
    tie_mlm_decoder: bool = True
    gelu_form: str = "exact"

    def __post_init__(self):
        if min(self.vocab_size, self.hidden_size, self.num_layers, self.num_heads,
               self.ffn_size, self.max_positions) < 1:
            raise ConfigError("all size fields must be positive")
        if self.vocab_size <= 5:
            raise ConfigError("vocab_size must exceed the 5 special tokens")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_labels < 0:
            raise ConfigError("num_labels must be non-negative")
        if self.gelu_form not in ("exact", "tanh"):
            raise ConfigError(f"gelu_form must be 'exact' or 'tanh', got {self.gelu_form!r}")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def with_labels(self, num_labels: int) -> "ModelConfig":
        return ModelConfig(**{**self.as_dict(), "num_labels": num_labels})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape table, in serialization order."""
    h, f, v = config.hidden_size, config.ffn_size, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (v, h),
        "embeddings.position": (config.max_positions, h),
        "embeddings.segment": (1, h),
        "embeddings.norm.gain": (h,),
        "embeddings.norm.bias": (h,),
    }
    for i in range(config.num_layers):
        for proj in ("query", "key", "value", "output"):
            shapes[f"layer{i}.attn.{proj}.weight"] = (h, h)
            shapes[f"layer{i}.attn.{proj}.bias"] = (h,)
        shapes[f"layer{i}.attn.norm.gain"] = (h,)
        shapes[f"layer{i}.attn.norm.bias"] = (h,)
        shapes[f"layer{i}.ffn.inner.weight"] = (h, f)
        shapes[f"layer{i}.ffn.inner.bias"] = (f,)
        shapes[f"layer{i}.ffn.outer.weight"] = (f, h)
        shapes[f"layer{i}.ffn.outer.bias"] = (h,)
        shapes[f"layer{i}.ffn.norm.gain"] = (h,)
        shapes[f"layer{i}.ffn.norm.bias"] = (h,)
    shapes["mlm.transform.weight"] = (h, h)
    shapes["mlm.transform.bias"] = (h,)
    shapes["mlm.norm.gain"] = (h,)
    shapes["mlm.norm.bias"] = (h,)
    if not config.tie_mlm_decoder:
        shapes["mlm.decoder.weight"] = (h, v)
    shapes["mlm.decoder.bias"] = (v,)
    if config.num_labels > 0:
        shapes["pooler.weight"] = (h, h)
        shapes["pooler.bias"] = (h,)
        shapes["classifier.weight"] = (h, config.num_labels)
        shapes["classifier.bias"] = (config.num_labels,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def count_block_parameters(config: ModelConfig) -> int:
    """Parameters inside the transformer blocks only (the layerN.* tensors)."""
    return sum(
        int(np.prod(s)) for name, s in parameter_shapes(config).items() if name.startswith("layer")
    )


class EncoderParams:
    """Named parameter tensors whose shapes are fully determined by the config."""

    INIT_STD = 0.02

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ShapeError(f"parameter names do not match config: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, shape in expected.items():
            if tensors[name].data.shape != shape:
                raise ShapeError(f"{name}: shape {tensors[name].data.shape} != expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}  # canonical order

    @classmethod
    def init(cls, config: ModelConfig, rng: SplitRng, dtype=np.float32) -> "EncoderParams":
        g = rng.split("param-init")
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".bias") or name.endswith("norm.bias"):
                data = np.zeros(shape, dtype=dtype)
            elif name.endswith("norm.gain"):
                data = np.ones(shape, dtype=dtype)
            else:
                data = g.split(name).normal(0.0, cls.INIT_STD, size=shape).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
        )

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.tensors.items()},
        )

    def decoder_matrix(self) -> Tensor:
        """(H, V) matrix decoding hidden states to vocabulary logits."""
        if self.config.tie_mlm_decoder:
            return T.transpose(self.tensors["embeddings.token"], (1, 0))
        return self.tensors["mlm.decoder.weight"]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q, k, v: (..., n, d); mask: 0/1 over key positions, broadcastable against
    the (..., n_q, n_k) score matrix. Masked positions get a -1e9 score bias.
    """
    d = q.data.shape[-1]
    mask = np.asarray(mask)
    if not np.all(np.any(mask != 0, axis=-1)):
        raise NumericError("attention received a fully masked row")
    scores = T.matmul(q, T.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(d))
    bias = Tensor(((1.0 - mask) * MASK_BIAS).astype(q.data.dtype))
    probs = T.softmax(scores + bias, axis=-1)
    return T.matmul(probs, v)


def forward_encoder(
    ids: np.ndarray,
    attention_mask: np.ndarray,
    params: EncoderParams,
    train_mode: bool = False,
    rng: SplitRng | None = None,
) -> Tensor:
    """Run the full encoder stack: ids (B, L) -> hidden states (B, L, H)."""
    cfg = params.config
    ids = np.asarray(ids)
    attention_mask = np.asarray(attention_mask)
    if ids.ndim != 2 or attention_mask.shape != ids.shape:
        raise ShapeError(f"ids and attention_mask must both be (B, L), got {ids.shape} / {attention_mask.shape}")
    b, length = ids.shape
    if length > cfg.max_positions:
        raise InputError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise InputError(f"token ids out of range [0, {cfg.vocab_size})")
    if train_mode and cfg.dropout_rate > 0.0 and rng is None:
        raise ConfigError("train_mode with dropout requires an rng")

    def drop(x: Tensor, site: str) -> Tensor:
        if train_mode and cfg.dropout_rate > 0.0:
            return T.dropout(x, cfg.dropout_rate, rng.split("dropout", site))
        return x

    x = T.embedding(params["embeddings.token"], ids)
    x = x + T.take(params["embeddings.position"], slice(0, length))
    x = x + T.take(params["embeddings.segment"], 0)
    x = T.layer_norm(x, params["embeddings.norm.gain"], params["embeddings.norm.bias"])
    x = drop(x, "embeddings")

    key_mask = attention_mask[:, None, None, :]  # (B, 1, 1, L) over key positions
    nh, dh = cfg.num_heads, cfg.head_size

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, length, nh, dh)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        p = f"layer{i}"
        q = split_heads(_linear(x, params[f"{p}.attn.query.weight"], params[f"{p}.attn.query.bias"]))
        k = split_heads(_linear(x, params[f"{p}.attn.key.weight"], params[f"{p}.attn.key.bias"]))
        v = split_heads(_linear(x, params[f"{p}.attn.value.weight"], params[f"{p}.attn.value.bias"]))
        ctx = attention(q, k, v, key_mask)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, length, cfg.hidden_size))
        attn_out = drop(_linear(ctx, params[f"{p}.attn.output.weight"], params[f"{p}.attn.output.bias"]), f"{p}.attn")
        x = T.layer_norm(x + attn_out, params[f"{p}.attn.norm.gain"], params[f"{p}.attn.norm.bias"])

        inner = T.gelu(_linear(x, params[f"{p}.ffn.inner.weight"], params[f"{p}.ffn.inner.bias"]),
                       approximate=cfg.gelu_form == "tanh")
        ffn_out = drop(_linear(inner, params[f"{p}.ffn.outer.weight"], params[f"{p}.ffn.outer.bias"]), f"{p}.ffn")
        x = T.layer_norm(x + ffn_out, params[f"{p}.ffn.norm.gain"], params[f"{p}.ffn.norm.bias"])
    return x


def mlm_logits(hidden: Tensor, params: EncoderParams) -> Tensor:
    """MLM head: hidden (B, L, H) -> vocabulary logits (B, L, V)."""
    cfg = params.config
    x = T.gelu(_linear(hidden, params["mlm.transform.weight"], params["mlm.transform.bias"]),
               approximate=cfg.gelu_form == "tanh")
    x = T.layer_norm(x, params["mlm.norm.gain"], params["mlm.norm.bias"])
    return T.matmul(x, params.decoder_matrix()) + params["mlm.decoder.bias"]


def cls_logits(hidden: Tensor, params: EncoderParams, num_labels: int | None = None) -> Tensor:
    """Classification head over the position-0 vector: (B, L, H) -> (B, num_labels)."""
    cfg = params.config
    if cfg.num_labels == 0:
        raise ConfigError("model has no classifier head (num_labels == 0)")
    if num_labels is not None and num_labels != cfg.num_labels:
        raise ConfigError(f"requested {num_labels} labels but head has {cfg.num_labels}")
    first = T.take(hidden, (slice(None), 0, slice(None)))  # (B, H)
    pooled = T.tanh(_linear(first, params["pooler.weight"], params["pooler.bias"]))
    return _linear(pooled, params["classifier.weight"], params["classifier.bias"])
