"""MLM pretraining with dynamic masking, the continued-pretraining step for
domain adaptation, and classification fine-tuning.

Both training loops are single-writer and fully deterministic given
(seed, corpus, hyper, init); every epoch appends one machine-parseable
log line `epoch=<k> split=train loss=<f> lr=<f> seconds=<f>`.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .data import LabeledPost, binarize
from .errors import ConfigError, InputError, SkipSample
from .model import EncoderParams, ModelConfig
from .optim import AdamState, OptimizerHyper, adam_step
from .rng import SplitRng
from .tokenizer import TokenSequence, Vocab, encode

IGNORE_INDEX = -100
N_SPECIALS = 5

MASK_FRACTION = 0.8       # selected positions replaced by [MASK]
RANDOM_FRACTION = 0.1     # ... replaced by a random non-special id
# remaining 10% keep their original token


@dataclass
class PretrainHyper:
    learning_rate: float = 5e-5
    batch_size: int = 8        # 16 is the documented default for the distilled model
    epochs: int = 5
    max_len: int = 512
    mask_rate: float = 0.15
    seed: int = 0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.batch_size < 1 or self.max_len < 3:
            raise ConfigError("batch_size must be >= 1 and max_len >= 3")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")


@dataclass
class FinetuneHyper:
    learning_rate: float = 5e-5
    epochs: int = 2
    max_len: int = 300         # 512 is the documented default for the distilled model
    batch_size: int = 8
    seed: int = 0
    warmup_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.max_len < 3:
            raise ConfigError("batch_size must be >= 1 and max_len >= 3")


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    mlm_labels: np.ndarray
    attention_mask: np.ndarray


def mask_tokens(seq: TokenSequence, rate: float, rng: SplitRng, vocab_size: int) -> MaskedBatch:
    """Corrupt one sequence for MLM.

    Selects round(rate * maskable), minimum 1, non-special positions without
    replacement; 80% become [MASK], 10% a random non-special id, 10% stay.
    Labels carry the original id at every selected position and IGNORE_INDEX
    elsewhere. Raises SkipSample when nothing is maskable.
    """
    ids = np.asarray(seq.ids)
    maskable = np.nonzero(ids >= N_SPECIALS)[0]
    if maskable.size == 0:
        raise SkipSample("sequence has no maskable (non-special) tokens")
    count = max(1, round(rate * maskable.size))
    chosen = rng.choice(maskable, size=count, replace=False)

    input_ids = ids.copy()
    labels = np.full_like(ids, IGNORE_INDEX)
    labels[chosen] = ids[chosen]
    rolls = rng.random(size=count)
    for pos, roll in zip(chosen, rolls):
        if roll < MASK_FRACTION:
            input_ids[pos] = 4  # [MASK]
        elif roll < MASK_FRACTION + RANDOM_FRACTION:
            input_ids[pos] = int(rng.integers(N_SPECIALS, vocab_size))
        # else: keep the original token
    return MaskedBatch(input_ids=input_ids, mlm_labels=labels,
                       attention_mask=np.asarray(seq.attention_mask).copy())


def stack_masked(batches: Sequence[MaskedBatch]) -> MaskedBatch:
    return MaskedBatch(
        input_ids=np.stack([b.input_ids for b in batches]),
        mlm_labels=np.stack([b.mlm_labels for b in batches]),
        attention_mask=np.stack([b.attention_mask for b in batches]),
    )


def encode_corpus(texts: Iterable[str], vocab: Vocab, max_len: int) -> list[TokenSequence]:
    return [encode(text, vocab, max_len) for text in texts]


def _lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    warmup = math.ceil(warmup_fraction * total_steps)
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr


def _log_epoch(log: TextIO | None, epoch: int, loss: float, lr: float, seconds: float, phase: str | None = None) -> None:
    line = f"epoch={epoch} split=train loss={loss:.6f} lr={lr:g} seconds={seconds:.3f}"
    if phase:
        line += f" phase={phase}"
    if log is not None:
        log.write(line + "\n")
        log.flush()


def parse_training_log(text: str) -> list[dict[str, str]]:
    """Parse the append-only epoch lines back into dicts."""
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rows.append(dict(part.split("=", 1) for part in line.split()))
    return rows


def _grads_or_zero(params: EncoderParams) -> list[np.ndarray]:
    return [t.grad.data if t.grad is not None else np.zeros_like(t.data) for t in params.trainable()]


def pretrain_mlm(
    corpus: Sequence[TokenSequence],
    hyper: PretrainHyper,
    config: ModelConfig | None = None,
    init: Checkpoint | None = None,
    log: TextIO | None = None,
) -> Checkpoint:
    """Train (or continue training) the encoder on masked-token prediction.

    With `init` the weights start from the given checkpoint and the result is
    tagged "domain-adapted"; otherwise weights are freshly seeded and the
    result is tagged "base".
    """
    if not corpus:
        raise InputError("pretraining corpus is empty")
    if init is not None:
        if config is not None and config != init.config:
            raise ConfigError("requested config does not match the init checkpoint's config")
        config = init.config
        params = init.params.copy()
    else:
        if config is None:
            raise ConfigError("either a config or an init checkpoint is required")
        params = EncoderParams.init(config, SplitRng(hyper.seed))
    if hyper.max_len > config.max_positions:
        raise ConfigError(f"max_len {hyper.max_len} exceeds max_positions {config.max_positions}")

    rng = SplitRng(hyper.seed)
    opt_hyper = OptimizerHyper(learning_rate=hyper.learning_rate)
    state = AdamState.init(params.trainable())
    n = len(corpus)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.epochs
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
            lr = _lr_at(step, total_steps, hyper.learning_rate, hyper.warmup_fraction)
            hidden = M.forward_encoder(batch.input_ids, batch.attention_mask, params,
                                       train_mode=True, rng=rng.split("dropout", epoch, b0))
            logits = M.mlm_logits(hidden, params)
            flat = T.reshape(logits, (-1, config.vocab_size))
            loss = T.cross_entropy(flat, batch.mlm_labels.reshape(-1), ignore_index=IGNORE_INDEX)
            params.zero_grad()
            T.backward(loss)
            adam_step(params.trainable(), _grads_or_zero(params), state, opt_hyper, lr_override=lr)
            losses.append(loss.item())
            step += 1
        _log_epoch(log, epoch, float(np.mean(losses)) if losses else float("nan"),
                   lr, time.perf_counter() - started)

    provenance = "domain-adapted" if init is not None else "base"
    return Checkpoint(params=params, config=config, provenance=provenance)


def _attach_fresh_head(init: Checkpoint, num_labels: int, seed: int) -> tuple[EncoderParams, ModelConfig]:
    """Copy the encoder and MLM tensors, drop any old head, initialize a new one."""
    config = init.config.with_labels(num_labels)
    head_rng = SplitRng(seed).split("head-init")
    tensors = {}
    for name, shape in M.parameter_shapes(config).items():
        if name in init.params and not name.startswith(("pooler.", "classifier.")):
            tensors[name] = T.Tensor(init.params[name].data.copy(), requires_grad=True)
        elif name.endswith(".bias"):
            tensors[name] = T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        else:
            data = head_rng.split(name).normal(0.0, EncoderParams.INIT_STD, size=shape)
            tensors[name] = T.Tensor(data.astype(np.float32), requires_grad=True)
    return EncoderParams(config, tensors), config


def finetune_classifier(
    init: Checkpoint,
    train_set: Sequence[LabeledPost],
    task: str,
    hyper: FinetuneHyper,
    vocab: Vocab,
    log: TextIO | None = None,
) -> Checkpoint:
    """Attach a fresh 2-label head and train all weights on the binarized task."""
    if not train_set:
        raise InputError("fine-tuning train set is empty")
    if hyper.max_len > init.config.max_positions:
        raise ConfigError(f"max_len {hyper.max_len} exceeds max_positions {init.config.max_positions}")
    if len(vocab) != init.config.vocab_size:
        raise ConfigError(f"vocabulary size {len(vocab)} != model vocab_size {init.config.vocab_size}")

    labels = np.array([binarize(p.score(task)) for p in train_set], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        warnings.warn(f"fine-tuning set for {task} contains a single class")

    params, config = _attach_fresh_head(init, num_labels=2, seed=hyper.seed)
    seqs = [encode(p.text, vocab, hyper.max_len) for p in train_set]
    ids = np.stack([s.ids for s in seqs])
    masks = np.stack([s.attention_mask for s in seqs])

    rng = SplitRng(hyper.seed)
    opt_hyper = OptimizerHyper(learning_rate=hyper.learning_rate)
    state = AdamState.init(params.trainable())
    n = len(train_set)
    total_steps = math.ceil(n / hyper.batch_size) * hyper.epochs
    step = 0
    lr = hyper.learning_rate

    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        order = rng.split("shuffle", epoch).permutation(n)
        losses = []
        for b0 in range(0, n, hyper.batch_size):
            idx = order[b0:b0 + hyper.batch_size]
            lr = _lr_at(step, total_steps, hyper.learning_rate, hyper.warmup_fraction)
            hidden = M.forward_encoder(ids[idx], masks[idx], params,
                                       train_mode=True, rng=rng.split("dropout", epoch, b0))
            logits = M.cls_logits(hidden, params)
            loss = T.cross_entropy(logits, labels[idx])
            params.zero_grad()
            T.backward(loss)
            adam_step(params.trainable(), _grads_or_zero(params), state, opt_hyper, lr_override=lr)
            losses.append(loss.item())
            step += 1
        _log_epoch(log, epoch, float(np.mean(losses)), lr, time.perf_counter() - started)

    return Checkpoint(params=params, config=config, provenance=f"fine-tuned:{task}")


def mlm_accuracy(ckpt: Checkpoint, corpus: Sequence[TokenSequence], mask_rate: float, seed: int,
                 batch_size: int = 16) -> float:
    """Top-1 accuracy at masked positions on a held-out encoded corpus."""
    rng = SplitRng(seed).split("mlm-eval")
    correct = 0
    total = 0
    rows = []
    for i, seq in enumerate(corpus):
        try:
            rows.append(mask_tokens(seq, mask_rate, rng.split(i), ckpt.config.vocab_size))
        except SkipSample:
            continue
    for b0 in range(0, len(rows), batch_size):
        batch = stack_masked(rows[b0:b0 + batch_size])
        with T.no_grad():
            hidden = M.forward_encoder(batch.input_ids, batch.attention_mask, ckpt.params)
            logits = M.mlm_logits(hidden, ckpt.params)
        preds = logits.data.argmax(axis=-1)
        active = batch.mlm_labels != IGNORE_INDEX
        correct += int((preds[active] == batch.mlm_labels[active]).sum())
        total += int(active.sum())
    if total == 0:
        raise InputError("no maskable tokens in the evaluation corpus")
    return correct / total
