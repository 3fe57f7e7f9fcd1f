"""Half-depth student construction and the triple-objective distillation
loop: temperature-softened KL against the teacher's token distribution,
the hard MLM cross-entropy, and a cosine alignment of final hidden states,
all restricted to the masked positions. The teacher runs inference-only and
is never touched by a gradient."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Sequence, TextIO

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, InputError, NumericError, SkipSample
from .model import EncoderParams, parameter_shapes
from .optim import AdamState, OptimizerHyper, adam_step
from .rng import SplitRng
from .tensor import Tensor
from .tokenizer import TokenSequence
from .training import (IGNORE_INDEX, _grads_or_zero, _log_epoch,
                       _lr_at, mask_tokens, stack_masked)


@dataclass
class DistillHyper:
    temperature: float = 2.0
    w_ce: float = 5.0    # soft-target KL term
    w_mlm: float = 2.0   # hard masked-token cross-entropy
    w_cos: float = 1.0   # hidden-state cosine alignment
    learning_rate: float = 5e-5
    epochs: int = 5
    batch_size: int = 16
    max_len: int = 512
    mask_rate: float = 0.15
    seed: int = 0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if min(self.w_ce, self.w_mlm, self.w_cos) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.w_ce == 0 and self.w_mlm == 0 and self.w_cos == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")


@dataclass
class LayerMap:
    """Teacher layer indices copied into the student, in order."""

    indices: list[int]

    def __post_init__(self):
        if not self.indices:
            raise ConfigError("layer map must name at least one layer")
        if any(i < 0 for i in self.indices):
            raise ConfigError("layer indices must be non-negative")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ConfigError(f"layer indices must be strictly increasing, got {self.indices}")

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def even_layers(cls, teacher_layers: int) -> "LayerMap":
        """The default map: every second teacher layer, starting at 0."""
        return cls(list(range(0, teacher_layers, 2)))


def init_student_from_teacher(teacher: Checkpoint, layer_map: LayerMap | None = None) -> Checkpoint:
    """Student = teacher config at len(layer_map) layers; embeddings, MLM head
    and the mapped layers are copied verbatim."""
    if layer_map is None:
        layer_map = LayerMap.even_layers(teacher.config.num_layers)
    if max(layer_map.indices) >= teacher.config.num_layers:
        raise ConfigError(
            f"layer map {layer_map.indices} out of range for a {teacher.config.num_layers}-layer teacher")
    student_config = replace(teacher.config, num_layers=len(layer_map))
    tensors: dict[str, Tensor] = {}
    for name in parameter_shapes(student_config):
        if name.startswith("layer"):
            layer_idx, _, rest = name.partition(".")
            source = f"layer{layer_map.indices[int(layer_idx[5:])]}.{rest}"
        else:
            source = name
        tensors[name] = Tensor(teacher.params[source].data.copy(), requires_grad=True)
    return Checkpoint(params=EncoderParams(student_config, tensors),
                      config=student_config, provenance="distill-init")


def _select_active(arr: np.ndarray, active_idx: np.ndarray, width: int) -> np.ndarray:
    return arr.reshape(-1, width)[active_idx]


def distill_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray,
    mlm_labels: np.ndarray,
    student_hidden: Tensor,
    teacher_hidden: Tensor | np.ndarray,
    hyper: DistillHyper,
) -> Tensor:
    """Weighted sum of the three objectives, each averaged over labeled positions.

    Teacher inputs are treated as constants; no gradient ever reaches them.
    """
    vocab = student_logits.data.shape[-1]
    hidden = student_hidden.data.shape[-1]
    labels = np.asarray(mlm_labels).reshape(-1)
    active = np.nonzero(labels != IGNORE_INDEX)[0]
    if active.size == 0:
        raise InputError("distill_loss needs at least one labeled position")
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t_hidden = teacher_hidden.data if isinstance(teacher_hidden, Tensor) else np.asarray(teacher_hidden)

    flat_student = T.reshape(student_logits, (-1, vocab))
    total = None

    if hyper.w_ce > 0:
        temp = hyper.temperature
        soft = _select_active(t_logits, active, vocab) / temp
        soft = soft - soft.max(axis=1, keepdims=True)
        p = np.exp(soft)
        p /= p.sum(axis=1, keepdims=True)
        log_p = np.log(p)
        log_q = T.log_softmax(T.take(flat_student, active) * (1.0 / temp), axis=-1)
        kl = (Tensor(p.astype(student_logits.data.dtype)) * (Tensor(log_p.astype(student_logits.data.dtype)) - log_q)).sum(axis=1).mean()
        total = kl * (hyper.w_ce * temp * temp)

    if hyper.w_mlm > 0:
        ce = T.cross_entropy(flat_student, labels, ignore_index=IGNORE_INDEX) * hyper.w_mlm
        total = ce if total is None else total + ce

    if hyper.w_cos > 0:
        s = T.take(T.reshape(student_hidden, (-1, hidden)), active)
        t_rows = _select_active(t_hidden, active, hidden).astype(student_hidden.data.dtype)
        t_norm = np.sqrt((t_rows * t_rows).sum(axis=1))
        s_norm = T.sqrt((s * s).sum(axis=1))
        if np.any(t_norm == 0.0) or np.any(s_norm.data == 0.0):
            raise NumericError("zero-norm hidden vector in the cosine alignment term")
        cos = (s * Tensor(t_rows)).sum(axis=1) / (s_norm * Tensor(t_norm.astype(student_hidden.data.dtype)))
        cos_term = (1.0 - cos).mean() * hyper.w_cos
        total = cos_term if total is None else total + cos_term

    return total


def distill(
    teacher: Checkpoint,
    corpus: Sequence[TokenSequence],
    hyper: DistillHyper,
    layer_map: LayerMap | None = None,
    log: TextIO | None = None,
) -> Checkpoint:
    """Initialize a student from the teacher and train it on masked batches."""
    if not corpus:
        raise InputError("distillation corpus is empty")
    if hyper.max_len > teacher.config.max_positions:
        raise ConfigError(f"max_len {hyper.max_len} exceeds max_positions {teacher.config.max_positions}")
    student = init_student_from_teacher(teacher, layer_map)
    params = student.params
    config = student.config

    rng = SplitRng(hyper.seed)
    opt_hyper = OptimizerHyper(learning_rate=hyper.learning_rate)
    state = AdamState.init(params.trainable())
    n = len(corpus)
    total_steps = math.ceil(n / hyper.batch_size) * hyper.epochs
    step = 0
    lr = hyper.learning_rate

    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        order = rng.split("shuffle", epoch).permutation(n)
        losses = []
        for b0 in range(0, n, hyper.batch_size):
            idx = order[b0:b0 + hyper.batch_size]
            mask_rng = rng.split("mask", epoch, b0)
            rows = []
            for i in idx:
                try:
                    rows.append(mask_tokens(corpus[i], hyper.mask_rate, mask_rng, config.vocab_size))
                except SkipSample:
                    continue
            if not rows:
                continue
            batch = stack_masked(rows)
            with T.no_grad():
                t_hidden = M.forward_encoder(batch.input_ids, batch.attention_mask, teacher.params)
                t_logits = M.mlm_logits(t_hidden, teacher.params)
            lr = _lr_at(step, total_steps, hyper.learning_rate, hyper.warmup_fraction)
            s_hidden = M.forward_encoder(batch.input_ids, batch.attention_mask, params,
                                         train_mode=True, rng=rng.split("dropout", epoch, b0))
            s_logits = M.mlm_logits(s_hidden, params)
            loss = distill_loss(s_logits, t_logits, batch.mlm_labels, s_hidden, t_hidden, hyper)
            params.zero_grad()
            T.backward(loss)
            adam_step(params.trainable(), _grads_or_zero(params), state, opt_hyper, lr_override=lr)
            losses.append(loss.item())
            step += 1
        _log_epoch(log, epoch, float(np.mean(losses)) if losses else float("nan"),
                   lr, time.perf_counter() - started, phase="distill")

    return Checkpoint(params=params, config=config, provenance="distilled")
