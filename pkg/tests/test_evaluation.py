import json

import numpy as np
import pytest

from nodule_align.evaluation import (
    EvaluationError,
    FoldMetrics,
    aggregate_folds,
    confusion_matrix,
    format_mean_std,
    load_report,
    per_class_metrics,
    render_table,
    save_report,
)

from oracles import confusion_matrix_loop


class TestConfusionMatrix:
    def test_perfect_predictions_diagonal(self):
        labels = [0, 1, 2, 0, 1, 2]
        cm = confusion_matrix(labels, labels, 3)
        assert np.all(cm == np.diag([2, 2, 2]))

    def test_single_column_for_constant_predictions(self):
        cm = confusion_matrix([1] * 6, [0, 1, 2, 0, 1, 2], 3)
        assert cm[:, 0].sum() == 0 and cm[:, 2].sum() == 0
        assert cm[:, 1].sum() == 6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 3, size=50)
        labels = rng.integers(0, 3, size=50)
        np.testing.assert_array_equal(
            confusion_matrix(preds, labels, 3),
            confusion_matrix_loop(preds, labels, 3),
        )

    def test_sums_to_n(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 2, size=30)
        labels = rng.integers(0, 2, size=30)
        assert confusion_matrix(preds, labels, 2).sum() == 30

    def test_empty_errors(self):
        with pytest.raises(EvaluationError):
            confusion_matrix([], [], 2)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 3, size=40)
        labels = rng.integers(0, 3, size=40)
        perm = rng.permutation(40)
        np.testing.assert_array_equal(
            confusion_matrix(preds, labels, 3),
            confusion_matrix(preds[perm], labels[perm], 3),
        )


class TestPerClassMetrics:
    def test_perfect(self):
        m = per_class_metrics(np.diag([5, 5]))
        assert m.accuracy == 100.0
        assert m.recall == [100.0, 100.0]
        assert m.f1 == [100.0, 100.0]

    def test_hand_checked_case(self):
        # cm=[[3,1],[2,4]]: recall0=3/4, recall1=4/6; prec0=3/5, prec1=4/5
        m = per_class_metrics(np.array([[3, 1], [2, 4]]))
        assert m.accuracy == pytest.approx(70.0)
        assert m.recall[0] == pytest.approx(75.0)
        assert m.recall[1] == pytest.approx(100 * 4 / 6)
        f1_0 = 2 * (3 / 5) * (3 / 4) / (3 / 5 + 3 / 4)
        assert m.f1[0] == pytest.approx(100 * f1_0)

    def test_three_class_shape(self):
        m = per_class_metrics(np.diag([4, 3, 2]))
        assert len(m.recall) == 3 and len(m.f1) == 3

    def test_undefined_flagged_not_zeroed(self):
        # class 1 never predicted and never true
        m = per_class_metrics(np.array([[5, 0], [0, 0]]))
        assert m.recall[1] is None
        assert m.f1[1] is None
        assert any("recall[1]" in u for u in m.undefined)

    def test_accuracy_is_support_weighted_recall(self):
        rng = np.random.default_rng(3)
        cm = rng.integers(1, 10, size=(3, 3))
        m = per_class_metrics(cm)
        weighted = sum(r * s for r, s in zip(m.recall, m.support)) / sum(m.support)
        assert m.accuracy == pytest.approx(weighted)


class TestAggregation:
    def make_fold(self, acc):
        return FoldMetrics(accuracy=acc, recall=[acc, acc], f1=[acc, acc], support=[5, 5])

    def test_identical_folds_zero_std(self):
        report = aggregate_folds([self.make_fold(60.0)] * 5, "LIDC-C")
        assert report.std["accuracy"] == 0.0

    def test_mean_std_oracle(self):
        values = [60, 61, 59, 60, 60]
        report = aggregate_folds([self.make_fold(v) for v in values], "LIDC-C")
        assert report.mean["accuracy"] == pytest.approx(60.0)
        assert report.std["accuracy"] == pytest.approx(float(np.std(values)))

    def test_format(self):
        assert format_mean_std(60.94, 0.42) == "60.9±0.4"

    def test_wrong_fold_count(self):
        with pytest.raises(EvaluationError, match="5 fold"):
            aggregate_folds([self.make_fold(60.0)] * 3, "LIDC-C")
        aggregate_folds([self.make_fold(60.0)] * 3, "LIDC-C", allow_partial=True)

    def test_report_round_trip(self, tmp_path):
        report = aggregate_folds([self.make_fold(v) for v in (58, 59, 60, 61, 62)], "LIDC-A")
        path = tmp_path / "report.json"
        save_report(report, path)
        loaded = load_report(path)
        assert loaded.as_dict() == report.as_dict()

    def test_render_table(self):
        report = aggregate_folds([self.make_fold(60.0)] * 5, "LIDC-C")
        text = render_table(report, ["benign", "malignant"])
        assert "60.0±0.0" in text
        assert "benign" in text and "malignant" in text
