"""Confusion matrices, per-class precision/recall/F1, one-vs-rest ROC and AUC."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import CLASSES, predict_proba

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


def _indices(labels, classes):
    lookup = {c: i for i, c in enumerate(classes)}
    out = []
    for y in labels:
        if isinstance(y, (int, np.integer)):
            if not 0 <= y < len(classes):
                raise MetricsError(f"label index {y} outside 0..{len(classes) - 1}")
            out.append(int(y))
        elif y in lookup:
            out.append(lookup[y])
        else:
            raise MetricsError(f"label {y!r} not in class set {classes}")
    return np.asarray(out, dtype=int)


def confusion(y_true, y_pred, classes=CLASSES):
    """Counts with rows = true class, columns = predicted class."""
    if len(y_true) != len(y_pred):
        raise MetricsError(f"{len(y_true)} true labels vs {len(y_pred)} predictions")
    if len(y_true) == 0:
        raise MetricsError("cannot build a confusion matrix from zero samples")
    t, p = _indices(y_true, classes), _indices(y_pred, classes)
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    degenerate: list = field(default_factory=list)  # (class index, "no predicted positives" | "no true positives")

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())

    @property
    def macro_f1(self):
        return float(self.f1.mean())

    def weighted(self, values):
        total = self.support.sum()
        return float((values * self.support).sum() / total) if total else 0.0


def class_metrics(cm):
    """One-vs-rest precision, recall and F1 per class; overall accuracy = trace / total.

    A zero denominator yields 0 and records the class in ``degenerate``.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    degenerate = []
    precision = np.zeros(len(cm))
    recall = np.zeros(len(cm))
    for k in range(len(cm)):
        if pred_pos[k] > 0:
            precision[k] = tp[k] / pred_pos[k]
        else:
            degenerate.append((k, "no predicted positives"))
        if true_pos[k] > 0:
            recall[k] = tp[k] / true_pos[k]
        else:
            degenerate.append((k, "no true positives"))
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    total = cm.sum()
    return ClassMetrics(precision, recall, f1, true_pos.astype(int), float(tp.sum() / total) if total else 0.0, degenerate)


def binary_accuracy(cm):
    """Per-class (TP + TN) / total; reported only on request since it inflates with class count."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return (tp + tn) / total


def roc_curve(scores, positive):
    """Exact ROC: thresholds are the distinct scores plus +inf and -inf sentinels.

    Returns (fpr, tpr, thresholds) ordered by decreasing threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tps / n_pos if n_pos else np.zeros(len(tps)), 1.0 if n_pos else 0.0]
    fpr = np.r_[0.0, fps / n_neg if n_neg else np.zeros(len(fps)), 1.0 if n_neg else 0.0]
    thresholds = np.r_[np.inf, s[distinct], -np.inf]
    return fpr, tpr, thresholds


def auc_trapezoid(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def roc_auc(scores, y_true, classes=CLASSES):
    """One-vs-rest AUC per class plus the macro mean over classes where it is defined.

    Returns (per_class list with None for undefined classes, macro AUC or None, curves dict).
    """
    scores = np.asarray(scores, dtype=np.float64)
    t = _indices(y_true, classes)
    per_class, curves = [], {}
    for k, name in enumerate(classes):
        pos = t == k
        if pos.all() or not pos.any():
            log.warning("AUC for class %s undefined (single-class input); excluded from macro", name)
            per_class.append(None)
            continue
        fpr, tpr, thr = roc_curve(scores[:, k], pos)
        per_class.append(auc_trapezoid(fpr, tpr))
        curves[name] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return per_class, macro, curves


def metrics_report(y_true, probs, classes=CLASSES):
    """Per-class and averaged report dict from true labels and predicted probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = probs.argmax(axis=1)
    cm = confusion(y_true, pred, classes)
    m = class_metrics(cm)
    aucs, macro_auc, curves = roc_auc(probs, y_true, classes)
    per_class = {}
    for k, name in enumerate(classes):
        per_class[name] = {
            "precision": float(m.precision[k]),
            "recall": float(m.recall[k]),
            "f1": float(m.f1[k]),
            "support": int(m.support[k]),
            "auc": aucs[k],
        }
    return {
        "classes": list(classes),
        "per_class": per_class,
        "accuracy": m.accuracy,
        "macro": {
            "precision": m.macro_precision,
            "recall": m.macro_recall,
            "f1": m.macro_f1,
            "auc": macro_auc,
            "support": int(m.support.sum()),
        },
        "weighted": {
            "precision": m.weighted(m.precision),
            "recall": m.weighted(m.recall),
            "f1": m.weighted(m.f1),
            "support": int(m.support.sum()),
        },
        "degenerate": [{"class": classes[k], "reason": r} for k, r in m.degenerate],
        "confusion": cm.tolist(),
        "roc": curves,
    }


def evaluate(params, config, mel, hand, labels, clip_ids=None, batch_size=16):
    """Eval-mode inference over one partition; returns the metrics report dict.

    ``labels`` are class names or indices; per-sample predictions are
    included keyed by ``clip_ids`` when given.
    """
    if len(labels) == 0:
        raise MetricsError("cannot evaluate an empty partition")
    probs = predict_proba(
        params, config,
        mel if config.uses_deep else None,
        hand if config.uses_hand else None,
        batch_size,
    )
    report = metrics_report(labels, probs, CLASSES)
    if clip_ids is not None:
        report["predictions"] = [
            {"clip_id": cid, "predicted": CLASSES[int(p.argmax())], "probs": [float(v) for v in p]}
            for cid, p in zip(clip_ids, probs)
        ]
    return report
