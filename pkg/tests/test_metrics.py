import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosdistill import metrics
from mosdistill.errors import LengthMismatch
from mosdistill.metrics import ConfusionMatrix, accumulate, iou

class_ids = st.lists(st.integers(0, 3), min_size=0, max_size=40)


class TestAccumulate:
    def test_perfect_predictions(self):
        cm = accumulate(ConfusionMatrix(), [3, 3, 1], [3, 3, 1])
        assert cm.counts[3, 3] == 2
        assert cm.counts[1, 1] == 1
        assert cm.total() == 3

    def test_unlabeled_truth_skipped(self):
        cm = accumulate(ConfusionMatrix(), [1, 2, 3], [0, 0, 3])
        assert cm.total() == 1
        assert cm.counts[3, 3] == 1

    def test_custom_ignore(self):
        cm = accumulate(ConfusionMatrix(), [1, 2], [1, 2], ignore=frozenset({1, 2}))
        assert cm.total() == 0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            accumulate(ConfusionMatrix(), [1, 2], [1])

    @given(class_ids, class_ids, class_ids, class_ids)
    @settings(max_examples=40, deadline=None)
    def test_additive_over_concatenation(self, p1, t1, p2, t2):
        n1, n2 = min(len(p1), len(t1)), min(len(p2), len(t2))
        p1, t1, p2, t2 = p1[:n1], t1[:n1], p2[:n2], t2[:n2]
        split = accumulate(accumulate(ConfusionMatrix(), p1, t1), p2, t2)
        joined = accumulate(ConfusionMatrix(), p1 + p2, t1 + t2)
        np.testing.assert_array_equal(split.counts, joined.counts)

    @given(class_ids, class_ids, st.randoms(use_true_random=False))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariant(self, preds, truth, rnd):
        n = min(len(preds), len(truth))
        pairs = list(zip(preds[:n], truth[:n]))
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        a = accumulate(ConfusionMatrix(), [p for p, _ in pairs], [t for _, t in pairs])
        b = accumulate(
            ConfusionMatrix(), [p for p, _ in shuffled], [t for _, t in shuffled]
        )
        np.testing.assert_array_equal(a.counts, b.counts)


class TestIou:
    def test_perfect(self):
        cm = accumulate(ConfusionMatrix(), [1, 2, 3], [1, 2, 3])
        for c in (1, 2, 3):
            assert iou(cm, c) == 1.0

    def test_formula(self):
        cm = ConfusionMatrix()
        cm.counts[3, 3] = 1  # TP
        cm.counts[1, 3] = 1  # FP
        cm.counts[3, 1] = 2  # FN
        assert iou(cm, 3) == pytest.approx(0.25)

    def test_all_wrong(self):
        cm = accumulate(ConfusionMatrix(), [1, 1], [3, 3])
        assert iou(cm, 3) == 0.0

    def test_absent_class_convention(self):
        cm = accumulate(ConfusionMatrix(), [1], [1])
        assert iou(cm, 3) == 1.0

    def test_monotone_in_tp(self):
        cm = ConfusionMatrix()
        cm.counts[3, 3] = 1
        cm.counts[1, 3] = 2
        cm.counts[3, 2] = 2
        lo = iou(cm, 3)
        cm.counts[3, 3] += 5
        assert iou(cm, 3) > lo

    @given(class_ids, class_ids)
    @settings(max_examples=40, deadline=None)
    def test_bounds(self, preds, truth):
        n = min(len(preds), len(truth))
        cm = accumulate(ConfusionMatrix(), preds[:n], truth[:n])
        for c in range(4):
            assert 0.0 <= iou(cm, c) <= 1.0

    def test_merge(self):
        a = accumulate(ConfusionMatrix(), [3], [3])
        b = accumulate(ConfusionMatrix(), [3], [1])
        a.merge(b)
        assert a.counts[1, 3] == 1 and a.counts[3, 3] == 1


class TestReport:
    def test_write_read_round_trip(self, tmp_path):
        cell = accumulate(ConfusionMatrix(), [1, 2, 3], [1, 2, 3])
        point = accumulate(ConfusionMatrix(), [1, 3, 3], [1, 2, 3])
        report = metrics.metrics_report(cell, point)
        path = tmp_path / "metrics.txt"
        metrics.write_metrics(report, path)
        back = metrics.read_metrics(path)
        assert set(back) == set(report)
        assert float(back["moving_iou"]) == pytest.approx(report["moving_iou"])
        assert back["cell_cm_moving"] == report["cell_cm_moving"]

    def test_headline_is_point_level(self):
        cell = accumulate(ConfusionMatrix(), [3], [3])
        point = accumulate(ConfusionMatrix(), [1, 3], [3, 3])
        report = metrics.metrics_report(cell, point)
        assert report["moving_iou"] == pytest.approx(0.5)
        assert report["cell_iou_moving"] == pytest.approx(1.0)
