"""Classification metrics (per-class precision/recall/F1, support-weighted
F1, accuracy), the two report layouts, and the teacher-vs-student inference
benchmark. All metric functions are pure; the benchmark pins the BLAS pool
to one thread so speed ratios are hardware-stable."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .data import TaskDataset, TASKS
from .errors import InputError, UsageError
from .tokenizer import Vocab, encode

FLOAT_BYTES = 4  # parameters are stored and served as float32


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class PRF1:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # a zero denominator was coerced to 0.0


@dataclass
class MetricsReport:
    task: str
    model: str
    per_class: dict[int, PRF1]
    supports: dict[int, int]
    weighted_f1: float
    accuracy: float


@dataclass
class BenchmarkResult:
    model: str
    latency_per_batch_s: float  # median over repetitions, warmups excluded
    throughput_posts_per_s: float
    parameter_bytes: int
    speedup_vs_reference: float | None = None
    rss_bytes: int | None = None  # noisy; recorded only on request


def confusion_matrix(preds: Sequence[int], golds: Sequence[int]) -> ConfusionMatrix:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape or preds.ndim != 1 or preds.size < 1:
        raise InputError(f"preds and golds must be equal-length 1-d with >= 1 entries, got {preds.shape} / {golds.shape}")
    if not (np.isin(preds, (0, 1)).all() and np.isin(golds, (0, 1)).all()):
        raise InputError("preds and golds must be binary 0/1")
    return ConfusionMatrix(
        tp=int(((preds == 1) & (golds == 1)).sum()),
        fp=int(((preds == 1) & (golds == 0)).sum()),
        tn=int(((preds == 0) & (golds == 0)).sum()),
        fn=int(((preds == 0) & (golds == 1)).sum()),
    )


def prf1(cm: ConfusionMatrix, positive_class: int = 1) -> PRF1:
    """Precision/recall/F1 treating `positive_class` as the positive label.

    Zero denominators yield 0.0 with the degenerate flag set, so reports stay total.
    """
    if positive_class == 1:
        tp, fp, fn = cm.tp, cm.fp, cm.fn
    elif positive_class == 0:
        tp, fp, fn = cm.tn, cm.fn, cm.fp
    else:
        raise InputError(f"positive_class must be 0 or 1, got {positive_class}")
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return PRF1(precision=precision, recall=recall, f1=f1, degenerate=degenerate)


def weighted_f1(f1_per_class: Sequence[float], supports: Sequence[int]) -> float:
    if len(f1_per_class) != len(supports):
        raise InputError("f1_per_class and supports must have equal length")
    total = sum(supports)
    if total <= 0:
        raise InputError("total support must be positive")
    return sum(f * s for f, s in zip(f1_per_class, supports)) / total


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape or preds.ndim != 1 or preds.size < 1:
        raise InputError(f"preds and golds must be equal-length 1-d with >= 1 entries, got {preds.shape} / {golds.shape}")
    return float((preds == golds).mean())


def metrics_report(preds: Sequence[int], golds: Sequence[int], task: str, model: str) -> MetricsReport:
    cm = confusion_matrix(preds, golds)
    per_class = {0: prf1(cm, 0), 1: prf1(cm, 1)}
    supports = {0: cm.tn + cm.fp, 1: cm.tp + cm.fn}
    return MetricsReport(
        task=task,
        model=model,
        per_class=per_class,
        supports=supports,
        weighted_f1=weighted_f1([per_class[0].f1, per_class[1].f1], [supports[0], supports[1]]),
        accuracy=accuracy(preds, golds),
    )


# ---------------------------------------------------------------------------
# model inference
# ---------------------------------------------------------------------------

def predict_labels(ckpt: Checkpoint, vocab: Vocab, texts: Sequence[str], max_len: int,
                   batch_size: int = 16) -> np.ndarray:
    """Argmax class per text using the checkpoint's classifier head."""
    seqs = [encode(t, vocab, max_len) for t in texts]
    preds = []
    for b0 in range(0, len(seqs), batch_size):
        chunk = seqs[b0:b0 + batch_size]
        ids = np.stack([s.ids for s in chunk])
        masks = np.stack([s.attention_mask for s in chunk])
        with T.no_grad():
            hidden = M.forward_encoder(ids, masks, ckpt.params)
            logits = M.cls_logits(hidden, ckpt.params)
        preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate_checkpoint(ckpt: Checkpoint, vocab: Vocab, dataset: TaskDataset, max_len: int,
                        model_name: str, batch_size: int = 16) -> MetricsReport:
    texts = [t for t, _ in dataset.examples]
    golds = np.array([y for _, y in dataset.examples])
    preds = predict_labels(ckpt, vocab, texts, max_len, batch_size)
    return metrics_report(preds, golds, task=dataset.task, model=model_name)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def render_report(reports: Sequence[MetricsReport], style: str) -> str:
    """Markdown tables: `table1` is the per-class metric layout for one binary
    task (rows = models); `table2` is accuracy x100 across the three tasks."""
    if not reports:
        raise UsageError("render_report needs at least one report")
    if style == "table1":
        tasks = {r.task for r in reports}
        if len(tasks) != 1:
            raise UsageError(f"table1 renders a single task, got {sorted(tasks)}")
        task = reports[0].task
        lines = [
            f"| Model | Negative Recall | Negative Precision | Negative F1 "
            f"| Positive Recall | Positive Precision | Positive F1 | Weighted F1 |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in reports:
            neg, pos = r.per_class[0], r.per_class[1]
            cells = [f"{v:.3f}" for v in
                     (neg.recall, neg.precision, neg.f1, pos.recall, pos.precision, pos.f1, r.weighted_f1)]
            lines.append("| " + " | ".join([r.model] + cells) + " |")
        return f"Per-class metrics for {task} prediction\n\n" + "\n".join(lines) + "\n"

    if style == "table2":
        by_model: dict[str, dict[str, MetricsReport]] = {}
        for r in reports:
            by_model.setdefault(r.model, {})[r.task] = r
        lines = [
            "| Model | Confusion | Sentiment | Urgency |",
            "|---|---|---|---|",
        ]
        for model, by_task in by_model.items():
            missing = set(TASKS) - set(by_task)
            if missing:
                raise UsageError(f"table2 needs all three tasks for {model}, missing {sorted(missing)}")
            cells = [f"{by_task[t].accuracy * 100:.2f}" for t in ("confusion", "sentiment", "urgency")]
            lines.append("| " + " | ".join([model] + cells) + " |")
        return "Accuracy on the three tasks\n\n" + "\n".join(lines) + "\n"

    raise UsageError(f"unknown report style {style!r}, expected table1 or table2")


def kv_report(reports: Sequence[MetricsReport]) -> str:
    """Machine-readable twin: flat key=value lines per model/task block."""
    lines = []
    for r in reports:
        prefix = f"{r.model}.{r.task}"
        lines.append(f"{prefix}.accuracy={r.accuracy:.6f}")
        lines.append(f"{prefix}.weighted_f1={r.weighted_f1:.6f}")
        for cls in (0, 1):
            m = r.per_class[cls]
            lines.append(f"{prefix}.class{cls}.recall={m.recall:.6f}")
            lines.append(f"{prefix}.class{cls}.precision={m.precision:.6f}")
            lines.append(f"{prefix}.class{cls}.f1={m.f1:.6f}")
            lines.append(f"{prefix}.class{cls}.support={r.supports[cls]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# inference benchmark
# ---------------------------------------------------------------------------

def _synthetic_batch(config: M.ModelConfig, batch_size: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = (np.arange(batch_size * seq_len) % (config.vocab_size - 5) + 5).reshape(batch_size, seq_len)
    ids[:, 0] = 2  # [CLS]
    ids[:, -1] = 3  # [SEP]
    return ids, np.ones((batch_size, seq_len), dtype=np.int64)


def _time_forward(ckpt: Checkpoint, ids: np.ndarray, mask: np.ndarray,
                  repetitions: int, warmup: int) -> float:
    use_cls = ckpt.config.num_labels > 0
    times = []
    for rep in range(warmup + repetitions):
        start = time.perf_counter()
        with T.no_grad():
            hidden = M.forward_encoder(ids, mask, ckpt.params)
            if use_cls:
                M.cls_logits(hidden, ckpt.params)
        elapsed = time.perf_counter() - start
        if rep >= warmup:
            times.append(elapsed)
    return statistics.median(times)


def benchmark_inference(
    ckpt: Checkpoint,
    batch_size: int = 8,
    seq_len: int = 64,
    repetitions: int = 20,
    reference: Checkpoint | None = None,
    model_name: str = "model",
    reference_name: str = "reference",
    warmup: int = 3,
    log_rss: bool = False,
) -> list[BenchmarkResult]:
    """Median single-threaded forward latency; the reference, when given, is
    measured under identical batch shape and its latency defines the speedup."""
    if repetitions < 5:
        raise InputError(f"repetitions must be >= 5, got {repetitions}")
    if seq_len > ckpt.config.max_positions or (reference and seq_len > reference.config.max_positions):
        raise InputError(f"seq_len {seq_len} exceeds a model's max_positions")
    ids, mask = _synthetic_batch(ckpt.config, batch_size, seq_len)
    with threadpool_limits(limits=1):
        latency = _time_forward(ckpt, ids, mask, repetitions, warmup)
        ref_latency = None
        if reference is not None:
            ref_ids, ref_mask = _synthetic_batch(reference.config, batch_size, seq_len)
            ref_latency = _time_forward(reference, ref_ids, ref_mask, repetitions, warmup)

    rss = None
    if log_rss:
        import psutil

        rss = psutil.Process().memory_info().rss
    results = [BenchmarkResult(
        model=model_name,
        latency_per_batch_s=latency,
        throughput_posts_per_s=batch_size / latency,
        parameter_bytes=FLOAT_BYTES * M.count_parameters(ckpt.config),
        speedup_vs_reference=(ref_latency / latency) if ref_latency is not None else None,
        rss_bytes=rss,
    )]
    if reference is not None:
        results.append(BenchmarkResult(
            model=reference_name,
            latency_per_batch_s=ref_latency,
            throughput_posts_per_s=batch_size / ref_latency,
            parameter_bytes=FLOAT_BYTES * M.count_parameters(reference.config),
            speedup_vs_reference=1.0,
            rss_bytes=rss,
        ))
    return results


def render_benchmark(results: Sequence[BenchmarkResult]) -> str:
    lines = [
        "| Model | Latency/batch (s) | Posts/s | Parameter bytes | Speedup |",
        "|---|---|---|---|---|",
    ]
    for r in results:
        speedup = f"{r.speedup_vs_reference:.2f}" if r.speedup_vs_reference is not None else "-"
        lines.append(f"| {r.model} | {r.latency_per_batch_s:.4f} | {r.throughput_posts_per_s:.1f} "
                     f"| {r.parameter_bytes} | {speedup} |")
    return "\n".join(lines) + "\n"
