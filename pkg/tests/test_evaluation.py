import itertools
from pathlib import Path

import numpy as np
import pytest

from edlm import evaluation as E
from edlm.checkpoint import Checkpoint
from edlm.errors import InputError, UsageError
from edlm.model import EncoderParams, ModelConfig, count_parameters
from edlm.rng import SplitRng

GOLDEN = Path(__file__).parent / "golden"


def brute_force_metrics(preds, golds):
    """Direct-enumeration oracle: counts by explicit loop, metrics by definition."""
    tp = fp = tn = fn = 0
    for p, g in zip(preds, golds):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1

    def pr(tp_, fp_, fn_):
        precision = tp_ / (tp_ + fp_) if tp_ + fp_ else 0.0
        recall = tp_ / (tp_ + fn_) if tp_ + fn_ else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    p1, r1, f1_1 = pr(tp, fp, fn)
    p0, r0, f1_0 = pr(tn, fn, fp)
    s0, s1 = tn + fp, tp + fn
    wf1 = (f1_0 * s0 + f1_1 * s1) / (s0 + s1)
    acc = (tp + tn) / (tp + fp + tn + fn)
    return dict(tp=tp, fp=fp, tn=tn, fn=fn, p0=p0, r0=r0, f1_0=f1_0,
                p1=p1, r1=r1, f1_1=f1_1, wf1=wf1, acc=acc)


def reference_report(model="distilled-student", task="urgency"):
    # The published per-class metrics this package's report layouts follow.
    return E.MetricsReport(
        task=task,
        model=model,
        per_class={
            0: E.PRF1(precision=0.954, recall=0.949, f1=0.952),
            1: E.PRF1(precision=0.819, recall=0.835, f1=0.827),
        },
        supports={0: 784, 1: 216},
        weighted_f1=0.925,
        accuracy=0.9243,
    )


class TestConfusionMatrix:
    def test_perfect_positive(self):
        cm = E.confusion_matrix([1, 1, 1], [1, 1, 1])
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (3, 0, 0, 0)

    def test_hand_enumerated(self):
        cm = E.confusion_matrix([1, 0, 0, 0], [1, 1, 0, 0])
        assert (cm.tp, cm.fn, cm.tn, cm.fp) == (1, 1, 2, 0)

    def test_total_miss(self):
        cm = E.confusion_matrix([0] * 5, [1] * 5)
        assert cm.fn == 5 and cm.total == 5

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            E.confusion_matrix([1, 0], [1])

    def test_non_binary_rejected(self):
        with pytest.raises(InputError):
            E.confusion_matrix([1, 2], [1, 0])


class TestPrf1:
    def test_hand_computation(self):
        cm = E.ConfusionMatrix(tp=1, fp=0, tn=0, fn=1)
        m = E.prf1(cm, positive_class=1)
        assert m.precision == 1.0
        assert m.recall == 0.5
        assert m.f1 == pytest.approx(2 / 3, abs=1e-4)

    def test_degenerate_flagged(self):
        cm = E.ConfusionMatrix(tp=0, fp=0, tn=3, fn=2)
        m = E.prf1(cm, positive_class=1)
        assert m.precision == 0.0 and m.degenerate

    def test_perfect(self):
        cm = E.ConfusionMatrix(tp=4, fp=0, tn=6, fn=0)
        for cls in (0, 1):
            m = E.prf1(cm, cls)
            assert m.precision == m.recall == m.f1 == 1.0


class TestWeightedF1:
    def test_weighted_mean(self):
        assert E.weighted_f1([0.8, 0.6], [3, 1]) == pytest.approx(0.75)

    def test_equal_supports_is_plain_mean(self):
        assert E.weighted_f1([0.4, 0.8], [7, 7]) == pytest.approx(0.6)

    def test_published_support_ratio(self):
        # Supports in ratio ~0.784 : 0.216 reproduce the published weighted F1.
        assert E.weighted_f1([0.952, 0.827], [784, 216]) == pytest.approx(0.925, abs=5e-4)

    def test_zero_support_rejected(self):
        with pytest.raises(InputError):
            E.weighted_f1([0.5], [0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(InputError):
            E.weighted_f1([0.5, 0.7], [3])

    def test_invalid_positive_class(self):
        with pytest.raises(InputError):
            E.prf1(E.ConfusionMatrix(1, 1, 1, 1), positive_class=2)


class TestAccuracy:
    def test_identical(self):
        assert E.accuracy([1, 0, 1], [1, 0, 1]) == 1.0

    def test_complementary(self):
        assert E.accuracy([1, 0], [0, 1]) == 0.0

    def test_83_of_100_formats_as_table2_cell(self):
        preds = [1] * 83 + [0] * 17
        golds = [1] * 100
        acc = E.accuracy(preds, golds)
        assert acc == 0.83
        assert f"{acc * 100:.2f}" == "83.00"


class TestBruteForceEquivalence:
    def test_exhaustive_short_vectors(self):
        for n in range(1, 5):
            for preds in itertools.product((0, 1), repeat=n):
                for golds in itertools.product((0, 1), repeat=n):
                    ref = brute_force_metrics(preds, golds)
                    cm = E.confusion_matrix(list(preds), list(golds))
                    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (ref["tp"], ref["fp"], ref["tn"], ref["fn"])
                    m1 = E.prf1(cm, 1)
                    m0 = E.prf1(cm, 0)
                    assert m1.precision == ref["p1"] and m1.recall == ref["r1"] and m1.f1 == ref["f1_1"]
                    assert m0.precision == ref["p0"] and m0.recall == ref["r0"] and m0.f1 == ref["f1_0"]
                    assert E.accuracy(list(preds), list(golds)) == ref["acc"]
                    if sum(cm.total for cm in [cm]) and (cm.tn + cm.fp) and (cm.tp + cm.fn):
                        wf1 = E.weighted_f1([m0.f1, m1.f1], [cm.tn + cm.fp, cm.tp + cm.fn])
                        assert wf1 == pytest.approx(ref["wf1"], abs=1e-12)

    def test_random_length_100(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            preds = rng.integers(0, 2, size=100)
            golds = rng.integers(0, 2, size=100)
            ref = brute_force_metrics(preds.tolist(), golds.tolist())
            report = E.metrics_report(preds, golds, task="urgency", model="m")
            assert report.accuracy == ref["acc"]
            assert report.per_class[1].f1 == ref["f1_1"]
            assert report.weighted_f1 == pytest.approx(ref["wf1"], abs=1e-12)


class TestRenderReport:
    def test_table1_published_row(self):
        text = E.render_report([reference_report()], style="table1")
        row = [line for line in text.splitlines() if line.startswith("| distilled-student")][0]
        cells = [c.strip() for c in row.strip("|").split("|")]
        assert " ".join(cells[1:]) == "0.949 0.954 0.952 0.835 0.819 0.827 0.925"

    def test_table1_matches_golden_file(self):
        text = E.render_report([reference_report()], style="table1")
        assert text == (GOLDEN / "table1.md").read_text()

    def test_table2_published_row(self):
        reports = []
        for task, acc in [("confusion", 0.8301), ("sentiment", 0.8967), ("urgency", 0.9243)]:
            r = reference_report(task=task)
            r.accuracy = acc
            reports.append(r)
        text = E.render_report(reports, style="table2")
        row = [line for line in text.splitlines() if line.startswith("| distilled-student")][0]
        cells = [c.strip() for c in row.strip("|").split("|")]
        assert " ".join(cells[1:]) == "83.01 89.67 92.43"
        assert text == (GOLDEN / "table2.md").read_text()

    def test_render_is_pure(self):
        a = E.render_report([reference_report()], style="table1")
        b = E.render_report([reference_report()], style="table1")
        assert a == b

    def test_empty_reports_rejected(self):
        with pytest.raises(UsageError):
            E.render_report([], style="table1")

    def test_mixed_tasks_rejected_for_table1(self):
        with pytest.raises(UsageError):
            E.render_report([reference_report(task="urgency"), reference_report(task="sentiment")], "table1")

    def test_table2_requires_all_tasks(self):
        with pytest.raises(UsageError):
            E.render_report([reference_report(task="urgency")], "table2")

    def test_unknown_style(self):
        with pytest.raises(UsageError):
            E.render_report([reference_report()], "table3")


class TestKvReport:
    def test_flat_key_value_lines(self):
        text = E.kv_report([reference_report()])
        assert "distilled-student.urgency.accuracy=0.924300" in text
        assert "distilled-student.urgency.class1.f1=0.827000" in text
        assert "distilled-student.urgency.class0.support=784" in text


class TestBenchmark:
    def _ckpt(self, layers):
        cfg = ModelConfig(vocab_size=50, hidden_size=32, num_layers=layers, num_heads=2,
                          ffn_size=64, max_positions=64, dropout_rate=0.0)
        return Checkpoint(EncoderParams.init(cfg, SplitRng(0)), cfg, "base")

    def test_self_comparison_within_noise_band(self):
        ckpt = self._ckpt(2)
        results = E.benchmark_inference(ckpt, batch_size=4, seq_len=32, repetitions=20, reference=ckpt)
        assert 0.9 <= results[0].speedup_vs_reference <= 1.1

    def test_parameter_bytes_accounting(self):
        ckpt = self._ckpt(2)
        results = E.benchmark_inference(ckpt, batch_size=2, seq_len=16, repetitions=5)
        assert results[0].parameter_bytes == 4 * count_parameters(ckpt.config)

    def test_repetitions_floor(self):
        with pytest.raises(InputError):
            E.benchmark_inference(self._ckpt(1), repetitions=4)

    def test_render_benchmark(self):
        ckpt = self._ckpt(1)
        results = E.benchmark_inference(ckpt, batch_size=2, seq_len=16, repetitions=5)
        text = E.render_benchmark(results)
        assert "Latency/batch" in text and "| model |" in text

    def test_optional_rss_logging(self):
        ckpt = self._ckpt(1)
        off = E.benchmark_inference(ckpt, batch_size=2, seq_len=16, repetitions=5)
        assert off[0].rss_bytes is None
        on = E.benchmark_inference(ckpt, batch_size=2, seq_len=16, repetitions=5, log_rss=True)
        assert on[0].rss_bytes > 0
