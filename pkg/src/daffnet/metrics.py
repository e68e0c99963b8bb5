"""Classification and multi-label attribute metrics, plus report rendering.

Ratio metrics are accumulated as exact fractions and converted to float once,
so support-weighted averages are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np


class MetricError(ValueError):
    pass


def _labels(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind not in "iu":
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise MetricError(f"{name} must be integer labels")
        arr = arr.astype(np.int64)
    return arr


def confusion(y_true, y_pred, k: int) -> np.ndarray:
    """counts[t, p] = number of samples with true label t predicted as p."""
    t = _labels(y_true, "y_true").ravel()
    p = _labels(y_pred, "y_pred").ravel()
    if t.shape != p.shape:
        raise MetricError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        bad = arr[(arr < 0) | (arr >= k)]
        if bad.size:
            raise MetricError(f"{name} label {int(bad[0])} outside [0, {k})")
    return np.bincount(t * k + p, minlength=k * k).reshape(k, k).astype(np.int64)


def _ratio(num: int, den: int) -> Fraction:
    # zero denominators report 0 (sklearn's zero_division=0)
    return Fraction(int(num), int(den)) if den else Fraction(0)


def per_class_fractions(cm: np.ndarray) -> dict:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise MetricError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    if (cm < 0).any():
        raise MetricError("confusion matrix has negative counts")
    total = int(cm.sum())
    out = {"precision": [], "recall": [], "f1": [], "specificity": [], "accuracy": [], "support": []}
    for i in range(cm.shape[0]):
        tp = int(cm[i, i])
        fn = int(cm[i].sum()) - tp
        fp = int(cm[:, i].sum()) - tp
        tn = total - tp - fn - fp
        prec = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        out["precision"].append(prec)
        out["recall"].append(rec)
        out["f1"].append(f1)
        out["specificity"].append(_ratio(tn, tn + fp))
        # class-wise accuracy is the share of that class predicted correctly
        out["accuracy"].append(rec)
        out["support"].append(tp + fn)
    return out


def weighted_average(values: Sequence, supports: Sequence[int]):
    total = sum(supports)
    if total == 0:
        return Fraction(0)
    return sum(Fraction(v) * s for v, s in zip(values, supports)) / total


def weighted_metrics(cm) -> dict:
    """Per-class and support-weighted precision/recall/F1/specificity, and accuracy."""
    cm = np.asarray(cm, dtype=np.int64)
    frac = per_class_fractions(cm)
    total = int(cm.sum())
    if total == 0:
        raise MetricError("confusion matrix is empty")
    sup = frac["support"]
    result = {"per_class": {k: [float(v) for v in frac[k]] for k in
                            ("precision", "recall", "f1", "specificity", "accuracy")},
              "support": list(sup)}
    result["weighted"] = {k: float(weighted_average(frac[k], sup)) for k in
                          ("precision", "recall", "f1", "specificity")}
    result["accuracy"] = float(Fraction(int(np.trace(cm)), total))
    result["weighted"]["accuracy"] = result["accuracy"]
    return result


# multi-label ---------------------------------------------------------------
def _pairs(y_true, y_pred) -> tuple:
    t = _labels(y_true, "y_true")
    p = _labels(y_pred, "y_pred")
    if t.ndim != 2 or p.ndim != 2:
        raise MetricError("multi-label arrays must be [samples, attributes]")
    if t.shape != p.shape:
        raise MetricError(f"true/predicted attribute vectors differ in shape: {t.shape} vs {p.shape}")
    if t.shape[0] < 1 or t.shape[1] < 1:
        raise MetricError("need at least one sample and one attribute")
    return t, p


def subset_accuracy(y_true, y_pred) -> float:
    t, p = _pairs(y_true, y_pred)
    return float(Fraction(int(np.all(t == p, axis=1).sum()), t.shape[0]))


def hamming_loss(y_true, y_pred) -> float:
    t, p = _pairs(y_true, y_pred)
    return float(Fraction(int((t != p).sum()), t.size))


def jaccard_similarity(y_true, y_pred) -> float:
    """Mean IoU of the (attribute, category) label sets; c correct of q gives c/(2q - c)."""
    t, p = _pairs(y_true, y_pred)
    q = t.shape[1]
    correct = (t == p).sum(axis=1)
    total = sum(Fraction(int(c), 2 * q - int(c)) for c in correct)
    return float(total / t.shape[0])


# AUC -----------------------------------------------------------------------
def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC; nan when either side is empty."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = midranks(np.asarray(scores, dtype=np.float64))
    u = r[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(y_true, probs, k: int) -> dict:
    """One-vs-rest AUC per class and its support-weighted average."""
    t = _labels(y_true, "y_true").ravel()
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(t), k):
        raise MetricError(f"probability rows must be [{len(t)}, {k}], got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise MetricError("probability rows must be finite")
    per_class = []
    support = []
    for c in range(k):
        pos = t == c
        per_class.append(binary_auc(pos, probs[:, c]))
        support.append(int(pos.sum()))
    defined = [i for i in range(k) if not np.isnan(per_class[i])]
    undefined = [i for i in range(k) if i not in defined]
    if undefined:
        warnings.warn(f"AUC undefined for classes {undefined} (absent from truths or no negatives); "
                      "excluded from the weighted average", RuntimeWarning, stacklevel=2)
    wsum = sum(support[i] for i in defined)
    weighted = (sum(per_class[i] * support[i] for i in defined) / wsum) if wsum else float("nan")
    return {"per_class": per_class, "support": support, "weighted": float(weighted)}


# reports -------------------------------------------------------------------
def _pct(v) -> str:
    return "   -   " if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:6.2f}%"


def _nan_to_none(v):
    if isinstance(v, float) and np.isnan(v):
        return None
    return v


@dataclass
class EvalReport:
    """Rows of named metrics plus optional summary values and confusion matrices."""

    title: str
    columns: list
    rows: list  # [(label, {column: value})]
    overall: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)  # name -> (labels, matrix)

    def to_json(self) -> dict:
        def clean(d):
            return {k: _nan_to_none(v) for k, v in d.items()}

        return {
            "title": self.title,
            "columns": list(self.columns),
            "rows": [{"name": name, **clean(vals)} for name, vals in self.rows],
            "overall": clean(self.overall),
            "summary": clean(self.summary),
            "confusion": {k: {"labels": list(lbl), "counts": np.asarray(m).tolist()}
                          for k, (lbl, m) in self.confusion.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        width = max([len(n) for n, _ in self.rows] + [len("Overall"), 10])
        head = f"{'':<{width}}  " + "  ".join(f"{c:>7}" for c in self.columns)
        lines = [self.title, head]
        for name, vals in self.rows:
            lines.append(f"{name:<{width}}  " + "  ".join(_pct(vals.get(c)) for c in self.columns))
        if self.overall:
            lines.append(f"{'Overall':<{width}}  " +
                         "  ".join(_pct(self.overall.get(c)) for c in self.columns))
        for k, v in self.summary.items():
            lines.append(f"{k}: {_pct(v)}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self, name: Optional[str] = None) -> str:
        names = [name] if name else list(self.confusion)
        out = []
        for n in names:
            labels, m = self.confusion[n]
            if len(names) > 1:
                out.append(f"# {n}")
            out.append("true\\pred," + ",".join(labels))
            for lbl, row in zip(labels, np.asarray(m)):
                out.append(lbl + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(out) + "\n"


def classification_report(y_true, probs, class_names: Sequence[str],
                          title: str = "DAFFNet test results") -> EvalReport:
    """Per-class Prec/Rec/F1/Acc/AUC with weighted totals and the confusion matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    k = len(class_names)
    y_pred = np.argmax(probs, axis=1)
    cm = confusion(y_true, y_pred, k)
    wm = weighted_metrics(cm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        auc = auc_ovr(y_true, probs, k)
    cols = ["Prec", "Rec", "F1", "Spec", "Acc", "AUC"]
    rows = []
    for i, name in enumerate(class_names):
        rows.append((name, {
            "Prec": wm["per_class"]["precision"][i], "Rec": wm["per_class"]["recall"][i],
            "F1": wm["per_class"]["f1"][i], "Spec": wm["per_class"]["specificity"][i],
            "Acc": wm["per_class"]["accuracy"][i], "AUC": auc["per_class"][i],
            "Support": wm["support"][i],
        }))
    overall = {"Prec": wm["weighted"]["precision"], "Rec": wm["weighted"]["recall"],
               "F1": wm["weighted"]["f1"], "Spec": wm["weighted"]["specificity"],
               "Acc": wm["accuracy"], "AUC": auc["weighted"]}
    return EvalReport(title, cols, rows, overall, {}, {"classes": (list(class_names), cm)})


def attribute_report(y_true, y_pred, schema, probs: Optional[Sequence] = None,
                     title: str = "MAP test results per morphological attribute") -> EvalReport:
    """Per-attribute report: one row per attribute, unweighted overall mean, SAcc/HL/JS."""
    t, p = _pairs(y_true, y_pred)
    names = schema.names
    if t.shape[1] != len(names):
        raise MetricError(f"expected {len(names)} attributes, got {t.shape[1]}")
    if probs is not None and len(probs) != len(names):
        raise MetricError(f"missing probabilities: {len(probs)} of {len(names)} attributes")
    cols = ["Prec", "Rec", "F1", "Spec", "Acc", "AUC"]
    rows, matrices = [], {}
    for m, (name, cats) in enumerate(schema.attributes):
        cm = confusion(t[:, m], p[:, m], len(cats))
        wm = weighted_metrics(cm)
        auc = float("nan")
        if probs is not None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                auc = auc_ovr(t[:, m], probs[m], len(cats))["weighted"]
        rows.append((schema.display_name(name), {
            "Prec": wm["weighted"]["precision"], "Rec": wm["weighted"]["recall"],
            "F1": wm["weighted"]["f1"], "Spec": wm["weighted"]["specificity"],
            "Acc": wm["accuracy"], "AUC": auc,
        }))
        matrices[name] = (list(cats), cm)
    overall = {}
    for c in cols:
        vals = [r[c] for _, r in rows]
        overall[c] = float("nan") if any(np.isnan(v) for v in vals) else float(np.mean(vals))
    summary = {"SAcc": subset_accuracy(t, p), "HL": hamming_loss(t, p), "JS": jaccard_similarity(t, p)}
    return EvalReport(title, cols, rows, overall, summary, matrices)


def ablation_table(results: Sequence[tuple], title: str = "Ablation results") -> EvalReport:
    """One row per model variant from (name, classification EvalReport) pairs."""
    cols = ["Prec", "Rec", "F1", "Acc", "AUC"]
    rows = [(name, {c: rep.overall[c] for c in cols}) for name, rep in results]
    return EvalReport(title, cols, rows)
