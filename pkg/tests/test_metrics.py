import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daffnet.metrics import (
    MetricError,
    ablation_table,
    attribute_report,
    auc_ovr,
    binary_auc,
    classification_report,
    confusion,
    hamming_loss,
    jaccard_similarity,
    subset_accuracy,
    weighted_metrics,
)
from daffnet.schema import AttributeSchema


# brute-force oracles -----------------------------------------------------------
def pair_count_auc(pos, scores):
    p = [s for s, y in zip(scores, pos) if y]
    n = [s for s, y in zip(scores, pos) if not y]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in p for b in n)
    return wins / (len(p) * len(n))


def loop_confusion(t, p, k):
    cm = [[0] * k for _ in range(k)]
    for a, b in zip(t, p):
        cm[a][b] += 1
    return np.array(cm)


def set_jaccard(t, p):
    total = Fraction(0)
    for a, b in zip(t, p):
        sa = {(j, v) for j, v in enumerate(a)}
        sb = {(j, v) for j, v in enumerate(b)}
        total += Fraction(len(sa & sb), len(sa | sb))
    return total / len(t)


def oracle_weighted(t, p, k):
    out = {}
    n = len(t)
    for name in ("precision", "recall"):
        acc = Fraction(0)
        for c in range(k):
            tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
            den = sum(1 for b in p if b == c) if name == "precision" else sum(1 for a in t if a == c)
            support = sum(1 for a in t if a == c)
            acc += (Fraction(tp, den) if den else 0) * Fraction(support, n)
        out[name] = acc
    return out


class TestConfusion:
    def test_perfect_is_diagonal(self):
        np.testing.assert_array_equal(confusion([0, 1, 2, 1], [0, 1, 2, 1], 3), np.diag([1, 2, 1]))

    def test_swap_is_antidiagonal(self):
        np.testing.assert_array_equal(confusion([0, 1], [1, 0], 2), [[0, 1], [1, 0]])

    def test_matches_pair_counting(self, rng):
        t, p = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
        np.testing.assert_array_equal(confusion(t, p, 4), loop_confusion(t, p, 4))

    def test_out_of_range(self):
        with pytest.raises(MetricError, match="outside"):
            confusion([0, 3], [0, 1], 3)


class TestWeightedMetrics:
    def test_hand_example(self):
        wm = weighted_metrics([[5, 0], [1, 4]])
        np.testing.assert_allclose(wm["per_class"]["precision"], [5 / 6, 1.0])
        np.testing.assert_allclose(wm["per_class"]["recall"], [1.0, 0.8])
        assert wm["weighted"]["precision"] == float(Fraction(11, 12))

    def test_diagonal_is_perfect(self):
        wm = weighted_metrics(np.diag([3, 4, 5]))
        for key in ("precision", "recall", "f1", "specificity"):
            assert wm["weighted"][key] == 1.0
        assert wm["accuracy"] == 1.0

    def test_matches_oracle(self, rng):
        t, p = rng.integers(0, 4, 37), rng.integers(0, 4, 37)
        wm = weighted_metrics(confusion(t, p, 4))
        ref = oracle_weighted(list(t), list(p), 4)
        assert wm["weighted"]["precision"] == float(ref["precision"])
        assert wm["weighted"]["recall"] == float(ref["recall"])

    def test_zero_predicted_positives(self):
        wm = weighted_metrics([[2, 0], [3, 0]])
        assert wm["per_class"]["precision"][1] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=50))
    def test_weighted_accuracy_is_trace_over_total(self, pairs):
        t, p = zip(*pairs)
        wm = weighted_metrics(confusion(t, p, 4))
        assert wm["weighted"]["recall"] == float(Fraction(sum(a == b for a, b in pairs), len(pairs)))
        assert wm["weighted"]["recall"] == wm["accuracy"]


class TestMultiLabel:
    def test_examples(self):
        t = np.zeros((3, 11), dtype=int)
        p = t.copy()
        assert subset_accuracy(t, p) == 1.0 and hamming_loss(t, p) == 0.0 and jaccard_similarity(t, p) == 1.0
        p[1, 4] = 1
        assert subset_accuracy(t, p) == pytest.approx(2 / 3)
        assert hamming_loss(t, p) == pytest.approx(1 / 33)
        assert jaccard_similarity(t[:1], np.r_[[[1] + [0] * 10]]) == pytest.approx(10 / 12)
        assert hamming_loss(t, t + 1) == 1.0 and jaccard_similarity(t, t + 1) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            subset_accuracy(np.zeros((2, 3)), np.zeros((2, 4)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 11), st.integers(0, 2**32 - 1))
    def test_properties(self, m, q, seed):
        r = np.random.default_rng(seed)
        t = r.integers(0, 3, (m, q))
        p = np.where(r.random((m, q)) < 0.7, t, r.integers(0, 3, (m, q)))
        sacc, hl, js = subset_accuracy(t, p), hamming_loss(t, p), jaccard_similarity(t, p)
        assert 1 - sacc <= hl * q + 1e-12
        assert js >= sacc - 1e-12
        assert (hl == 0) == (sacc == 1) == (js == 1)
        perm = r.permutation(m)
        assert (sacc, hl, js) == (subset_accuracy(t[perm], p[perm]), hamming_loss(t[perm], p[perm]),
                                  jaccard_similarity(t[perm], p[perm]))


class TestAuc:
    def test_separated(self):
        assert binary_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_all_tied(self):
        assert binary_auc([0, 1, 0, 1, 1], [0.3] * 5) == 0.5

    def test_matches_pair_counting(self, rng):
        pos = rng.random(30) < 0.4
        scores = rng.integers(0, 6, 30) / 5.0
        assert binary_auc(pos, scores) == pytest.approx(pair_count_auc(pos, scores), abs=1e-12)

    def test_absent_class_excluded_with_warning(self, rng):
        t = np.array([0, 0, 1, 1, 1])
        probs = rng.dirichlet(np.ones(3), 5)
        with pytest.warns(RuntimeWarning, match="undefined"):
            out = auc_ovr(t, probs, 3)
        assert np.isnan(out["per_class"][2])
        expected = (out["per_class"][0] * 2 + out["per_class"][1] * 3) / 5
        assert out["weighted"] == pytest.approx(expected)


class TestReports:
    def test_attribute_report_layout(self):
        schema = AttributeSchema.default()
        t = np.array([[0] * 11, [1] * 11, [0, 1, 2, 0, 1, 0, 1, 2, 2, 3, 1]])
        probs = [np.eye(p)[t[:, m]] for m, p in enumerate(schema.sizes)]
        rep = attribute_report(t, t, schema, probs)
        assert [name for name, _ in rep.rows] == [schema.display_name(n) for n in schema.names]
        assert rep.rows[0][0] == "Cell size" and rep.rows[-1][0] == "Granularity"
        assert all(v == 1.0 for _, row in rep.rows for v in row.values())
        assert rep.summary == {"SAcc": 1.0, "HL": 0.0, "JS": 1.0}
        json.loads(rep.dumps())
        assert "Granularity" in rep.to_text()

    def test_overall_is_unweighted_mean(self, rng):
        schema = AttributeSchema.default()
        t = np.stack([rng.integers(0, p, 40) for p in schema.sizes], axis=1)
        p = np.where(rng.random(t.shape) < 0.8, t, 0)
        rep = attribute_report(t, p, schema)
        for col in ("Prec", "Rec", "F1", "Acc"):
            assert rep.overall[col] == pytest.approx(np.mean([r[col] for _, r in rep.rows]))

    def test_missing_attribute(self):
        schema = AttributeSchema.default()
        with pytest.raises(MetricError):
            attribute_report(np.zeros((2, 10), int), np.zeros((2, 10), int), schema)

    def test_classification_report(self, rng):
        names = ["basophil", "eosinophil", "lymphocyte", "monocyte", "neutrophil"]
        t = np.repeat(np.arange(5), 4)
        probs = rng.dirichlet(np.ones(5), 20)
        rep = classification_report(t, probs, names)
        doc = rep.to_json()
        assert [r["name"] for r in doc["rows"]] == names
        for r in doc["rows"]:
            assert {"Prec", "Rec", "F1", "Acc", "AUC"} <= set(r)
        assert {"Prec", "Rec", "F1", "Acc", "AUC"} <= set(doc["overall"])
        assert rep.confusion_csv().splitlines()[0] == "true\\pred," + ",".join(names)
        table = ablation_table([("Baseline", rep)])
        assert table.rows[0][1]["Acc"] == rep.overall["Acc"]
