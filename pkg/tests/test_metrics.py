import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_metrics
from vig_landcover.errors import DataError
from vig_landcover.metrics import (
    aggregate,
    confusion_counts,
    decide_labels,
    metric_report,
    parse_kv,
    per_class_extremes,
)


def random_instance(seed):
    """At most 20 samples and 6 classes; even seeds multiclass, odd seeds multilabel."""
    r = np.random.default_rng(seed)
    n, c = int(r.integers(1, 21)), int(r.integers(1, 7))
    if seed % 2 == 0:
        truth = r.integers(0, c, size=n)
        # bias predictions toward the truth so scores are spread over (0, 1)
        pred = np.where(r.random(n) < 0.6, truth, r.integers(0, c, size=n))
        return "multiclass", c, pred, truth, [{int(p)} for p in pred], [{int(t)} for t in truth]
    truth = r.random((n, c)) < 0.4
    pred = np.where(r.random((n, c)) < 0.7, truth, r.random((n, c)) < 0.4)
    sets = lambda m: [set(np.flatnonzero(row).tolist()) for row in m]  # noqa: E731
    return "multilabel", c, pred, truth, sets(pred), sets(truth)


def check_against_oracle(seeds):
    for seed in seeds:
        task, c, pred, truth, pred_sets, true_sets = random_instance(seed)
        counts = confusion_counts(pred, truth, c, task=task)
        want = brute_force_metrics(pred_sets, true_sets, c, task)
        for mode in ("micro", "macro"):
            got = aggregate(counts, mode)
            assert got == want[mode], (seed, mode, got, want[mode])
        assert per_class_extremes(counts) == want["extremes"], seed
    return len(seeds)


class TestDecide:
    def test_strict_threshold(self):
        assert decide_labels(np.array([[0.7, 0.5, 0.2]]), "multilabel").tolist() == [[True, False, False]]

    def test_empty_set(self):
        assert not decide_labels(np.array([[0.1, 0.3]]), "multilabel").any()

    def test_argmax_tie(self):
        assert decide_labels(np.array([[0.4, 0.4, 0.2]]), "multiclass").tolist() == [0]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200)
    def test_threshold_monotone(self, probs, t1, t2):
        lo, hi = sorted((t1, t2))
        p = np.array([probs])
        assert not np.any(decide_labels(p, "multilabel", hi) & ~decide_labels(p, "multilabel", lo))


class TestCounts:
    def test_perfect(self):
        c = confusion_counts([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert not c.fp.any() and not c.fn.any()

    def test_hand_enumerated(self):
        c = confusion_counts(np.array([[0, 0, 1, 1]]), np.array([[0, 1, 1, 0]]), 4)
        assert c.tp.tolist() == [0, 0, 1, 0]
        assert c.fn.tolist() == [0, 1, 0, 0]
        assert c.fp.tolist() == [0, 0, 0, 1]
        assert c.tn.tolist() == [1, 0, 0, 0]

    def test_empty_prediction(self):
        c = confusion_counts(np.array([[0, 0]]), np.array([[1, 0]]), 2)
        assert c.fn[0] == 1

    def test_totals(self, rng):
        pred, truth = rng.integers(0, 5, 30), rng.integers(0, 5, 30)
        c = confusion_counts(pred, truth, 5)
        assert np.all(c.tp + c.fp + c.fn + c.tn == 30)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            confusion_counts([0, 3], [0, 1], 3)
        with pytest.raises(DataError):
            confusion_counts(np.array([[0, 2]]), np.array([[0, 1]]), 2)

    def test_merge_associative(self, rng):
        a = confusion_counts(rng.integers(0, 4, 10), rng.integers(0, 4, 10), 4)
        b = confusion_counts(rng.integers(0, 4, 7), rng.integers(0, 4, 7), 4)
        m = a.merge(b)
        assert m.num_samples == 17 and np.all(m.tp == a.tp + b.tp)


class TestAggregate:
    def test_pooled_two_thirds(self):
        # pooled tp=2, fp=1, fn=1
        c = confusion_counts(np.array([[1, 1], [1, 0]]), np.array([[1, 0], [1, 1]]), 2)
        got = aggregate(c, "micro")
        assert got["precision"] == got["recall"] == got["f1"] == pytest.approx(2 / 3, abs=1e-15)

    def test_all_correct(self):
        c = confusion_counts([0, 1, 2], [0, 1, 2], 3)
        for mode in ("micro", "macro"):
            assert aggregate(c, mode) == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "accuracy": 1.0}

    def test_ten_sample_toy_against_enumeration(self):
        # class 0 predicted perfectly (F1 1.0); class 1 has tp=1, fp=1, fn=1 (F1 0.5); supports 6 vs 2
        truth = np.array([[1, 0]] * 6 + [[0, 1]] * 2 + [[0, 0]] * 2)
        pred = np.array([[1, 0]] * 6 + [[0, 1], [0, 0], [0, 1], [0, 0]])
        c = confusion_counts(pred, truth, 2)
        sets = lambda m: [set(np.flatnonzero(r).tolist()) for r in m]  # noqa: E731
        want = brute_force_metrics(sets(pred), sets(truth), 2, "multilabel")
        assert aggregate(c, "macro") == want["macro"] and aggregate(c, "micro") == want["micro"]
        assert aggregate(c, "macro")["f1"] == 0.75
        assert aggregate(c, "micro")["f1"] != 0.75

    def test_f1_one_and_half(self):
        # per-class F1 {1.0, 0.5}: class 1 has tp=1, fp=1, fn=1
        truth = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [0, 0]])
        pred = np.array([[1, 0], [1, 0], [0, 1], [0, 0], [0, 1]])
        c = confusion_counts(pred, truth, 2)
        ext = per_class_extremes(c)
        assert ext["max_f1"] == 1.0 and ext["min_f1"] == 0.5
        assert aggregate(c, "macro")["f1"] == 0.75
        assert aggregate(c, "micro")["f1"] == 0.75     # pooled tp=3, fp=1, fn=1

    def test_zero_over_zero(self):
        c = confusion_counts([0, 0], [0, 0], 2)
        ext = per_class_extremes(c)
        assert ext["min_precision"] == 0.0 and ext["min_recall"] == 0.0

    def test_single_class_extremes(self):
        c = confusion_counts([0, 0, 0], [0, 0, 0], 1)
        ext = per_class_extremes(c)
        assert ext["max_f1"] == ext["min_f1"] == 1.0

    def test_unknown_mode(self):
        with pytest.raises(DataError):
            aggregate(confusion_counts([0], [0], 1), "weighted")


class TestOracle:
    def test_random_instances(self):
        assert check_against_oracle(range(100)) == 100

    @pytest.mark.parametrize("seed", range(0, 100, 2))
    def test_multiclass_identity(self, seed):
        task, c, pred, truth, _, _ = random_instance(seed)
        got = aggregate(confusion_counts(pred, truth, c, task=task), "micro")
        assert got["precision"] == got["recall"] == got["f1"] == got["accuracy"]
        assert got["accuracy"] == np.mean(pred == truth)

    @pytest.mark.parametrize("seed", range(40))
    def test_extremes_bracket_macro(self, seed):
        task, c, pred, truth, _, _ = random_instance(seed)
        counts = confusion_counts(pred, truth, c, task=task)
        macro, ext = aggregate(counts, "macro"), per_class_extremes(counts)
        for key in ("precision", "recall", "f1"):
            assert 0 <= ext[f"min_{key}"] <= macro[key] + 1e-15 <= ext[f"max_{key}"] + 2e-15 <= 1 + 2e-15


class TestReport:
    def test_default_modes(self):
        assert metric_report(confusion_counts([0, 1], [0, 1], 2, task="multiclass")).mode == "macro"
        assert metric_report(confusion_counts(np.eye(2), np.eye(2), 2, task="multilabel")).mode == "micro"

    def test_kv_round_trip(self, rng):
        counts = confusion_counts(rng.integers(0, 3, 20), rng.integers(0, 3, 20), 3)
        report = metric_report(counts)
        values = parse_kv(report.to_kv())
        assert set(values) == {"F1", "Precision", "Recall", "Accuracy", "MaxF1", "MinF1",
                               "MaxPrec", "MinPrec", "MaxRec", "MinRec"}
        assert values["F1"] == pytest.approx(report.values["f1"], abs=1e-6)

    def test_text_table(self, rng):
        counts = confusion_counts(rng.integers(0, 3, 20), rng.integers(0, 3, 20), 3)
        text = metric_report(counts).to_text()
        assert "MaxF1" in text and "macro averaging" in text
        assert len(text.strip().splitlines()) == 5 + 3   # title, columns, values, blank, class header
