"""Segmentation metrics: binary confusion rates, per-class scores and
BraTS-style region scores.

Rates are fractions in [0, 1]; :class:`MetricsReport` scales them to
percentages.  A rate whose denominator is zero is ``None`` (serialised as
JSON ``null`` and printed as ``undefined``), never a silent 0 or 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from mcnet.errors import DatasetError, ShapeError

BINARY_KEYS = ("accuracy", "precision", "f_measure", "sensitivity", "specificity", "dice", "dice_tp")
REGION_KEYS = ("dice_star", "sens_star", "spec_star")
BRATS_REGIONS = ("ET", "WT", "TC")
CHAOS_CLASS_NAMES = ("liver", "kidney_l", "kidney_r", "spleen")
BRATS_NOTE = ("region names follow the original definitions: ET = labels {2,3} "
              "(all tumour structures except edema), TC = label {3} (enhancing core only), "
              "which inverts the usual BraTS ET/TC naming")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    def swapped(self) -> "ConfusionCounts":
        """Counts with positive and negative classes exchanged."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion_counts(pred, truth, positive_class=1) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    p = pred == positive_class
    t = truth == positive_class
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num, den):
    return None if den == 0 else num / den


def binary_metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, F-measure, sensitivity, specificity and Dice.

    ``dice`` is the true-negative form 2TN / (2TN + FN + FP) as originally
    published; ``dice_tp`` is the conventional 2TP / (2TP + FN + FP).
    """
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None:
        f = None
    else:
        f = _ratio(2 * precision * recall, precision + recall)
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "precision": precision,
        "f_measure": f,
        "sensitivity": recall,
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "dice": _ratio(2 * c.tn, 2 * c.tn + c.fn + c.fp),
        "dice_tp": _ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp),
    }


def region_metrics(m, n):
    """(Dice*, Sens*, Spec*) of predicted mask ``m`` against truth ``n``."""
    m = np.asarray(m).astype(bool)
    n = np.asarray(n).astype(bool)
    if m.shape != n.shape:
        raise ShapeError(f"mask shapes {m.shape} and {n.shape} differ")
    both = np.count_nonzero(m & n)
    m1, n1 = np.count_nonzero(m), np.count_nonzero(n)
    neither = np.count_nonzero(~m & ~n)
    n0 = n.size - n1
    dice = _ratio(both, (m1 + n1) / 2)
    return dice, _ratio(both, n1), _ratio(neither, n0)


def region_metrics_from_counts(c: ConfusionCounts):
    """Same quantities as :func:`region_metrics`, from pooled counts."""
    return (_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
            _ratio(c.tp, c.tp + c.fn),
            _ratio(c.tn, c.tn + c.fp))


def brats_regions(labels) -> dict:
    labels = np.asarray(labels)
    bad = np.setdiff1d(np.unique(labels), [0, 1, 2, 3])
    if bad.size:
        raise ShapeError(f"BraTS labels must be in {{0,1,2,3}}, found {bad.tolist()}")
    return {
        "WT": np.isin(labels, (1, 2, 3)),
        "ET": np.isin(labels, (2, 3)),
        "TC": labels == 3,
    }


@dataclass
class MetricsReport:
    task: str
    metrics: dict = field(default_factory=dict)  # percentages or None
    breakdown: dict = field(default_factory=dict)  # group -> {metric: percentage or None}
    counts: dict = field(default_factory=dict)  # group -> ConfusionCounts dict
    n_images: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"task": self.task, "n_images": self.n_images, "metrics": self.metrics,
                "breakdown": self.breakdown, "counts": self.counts, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["task"], d["metrics"], d["breakdown"], d["counts"], d["n_images"], d["notes"])

    def to_text(self) -> str:
        cols = list(self.metrics)
        cells = [_fmt(self.metrics[k]) for k in cols]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        lines = [f"task: {self.task} ({self.n_images} images)",
                 "  ".join(c.rjust(w) for c, w in zip(cols, widths)),
                 "  ".join(v.rjust(w) for v, w in zip(cells, widths))]
        if self.breakdown:
            keys = list(next(iter(self.breakdown.values())))
            gw = max(len(g) for g in self.breakdown)
            kw = [max(len(k), 9) for k in keys]
            lines.append("")
            lines.append(" " * gw + "  " + "  ".join(k.rjust(w) for k, w in zip(keys, kw)))
            for g, vals in self.breakdown.items():
                lines.append(g.ljust(gw) + "  " + "  ".join(_fmt(vals[k]).rjust(w)
                                                            for k, w in zip(keys, kw)))
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "undefined" if v is None else f"{v:.2f}"


def _pct(v):
    return None if v is None else 100.0 * v


def binary_report(counts: ConfusionCounts, n_images=0) -> MetricsReport:
    rates = binary_metrics(counts)
    return MetricsReport("binary", {k: _pct(rates[k]) for k in BINARY_KEYS},
                         counts={"foreground": counts.to_dict()}, n_images=n_images)


def chaos_report(class_counts: dict, n_images=0, class_names=None) -> MetricsReport:
    """Per-class accuracy and overlap plus pooled Sen*/Spec*/Dice*.

    ``class_counts`` maps foreground label -> one-vs-rest ConfusionCounts.
    """
    names = class_names or _class_names(len(class_counts) + 1)
    metrics, breakdown, counts = {}, {}, {}
    pooled = ConfusionCounts()
    for label, c in sorted(class_counts.items()):
        name = names[label - 1]
        pooled = pooled + c
        dice, sens, spec = region_metrics_from_counts(c)
        acc = binary_metrics(c)["accuracy"]
        metrics[f"{name}_accuracy"] = _pct(acc)
        breakdown[name] = {"accuracy": _pct(acc), "dice_star": _pct(dice),
                           "sens_star": _pct(sens), "spec_star": _pct(spec)}
        counts[name] = c.to_dict()
    dice, sens, spec = region_metrics_from_counts(pooled)
    metrics.update({"sens_star": _pct(sens), "spec_star": _pct(spec), "dice_star": _pct(dice)})
    counts["pooled"] = pooled.to_dict()
    notes = ["per-class columns report one-vs-rest accuracy; the breakdown also gives the "
             "per-class Dice*/Sens*/Spec*; overall scores pool counts over classes"]
    return MetricsReport("chaos", metrics, breakdown, counts, n_images, notes)


def brats_report(region_counts: dict, n_images=0) -> MetricsReport:
    metrics, breakdown, counts = {}, {}, {}
    scores = {r: region_metrics_from_counts(region_counts[r]) for r in BRATS_REGIONS}
    for i, key in enumerate(REGION_KEYS):
        for r in BRATS_REGIONS:
            metrics[f"{key}_{r.lower()}"] = _pct(scores[r][i])
    for r in BRATS_REGIONS:
        breakdown[r] = {k: _pct(v) for k, v in zip(REGION_KEYS, scores[r])}
        counts[r] = region_counts[r].to_dict()
    return MetricsReport("brats", metrics, breakdown, counts, n_images, [BRATS_NOTE])


def _class_names(n_classes):
    if n_classes == 5:
        return CHAOS_CLASS_NAMES
    return tuple(f"class_{k}" for k in range(1, n_classes))


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """(N, K, H, W) probabilities -> (N, H, W) labels.  One channel means a
    sigmoid output, thresholded at 0.5 (>= 0.5 is foreground)."""
    probs = np.asarray(probs)
    if probs.shape[1] == 1:
        return (probs[:, 0] >= 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def accumulate(task: str, pred_labels, truth_labels, n_classes: int, acc=None) -> dict:
    """Add one batch of label maps to the running pooled counts for ``task``."""
    acc = {} if acc is None else acc
    if task == "binary":
        c = confusion_counts(pred_labels > 0, truth_labels > 0, True)
        acc["foreground"] = acc.get("foreground", ConfusionCounts()) + c
    elif task == "chaos":
        for k in range(1, n_classes):
            acc[k] = acc.get(k, ConfusionCounts()) + confusion_counts(pred_labels, truth_labels, k)
    elif task == "brats":
        pr, tr = brats_regions(pred_labels), brats_regions(truth_labels)
        for r in BRATS_REGIONS:
            acc[r] = acc.get(r, ConfusionCounts()) + confusion_counts(pr[r], tr[r], True)
    else:
        raise ValueError(f"unknown task {task!r}")
    return acc


def report_from_counts(task: str, acc: dict, n_images: int) -> MetricsReport:
    if task == "binary":
        return binary_report(acc["foreground"], n_images)
    if task == "chaos":
        return chaos_report(acc, n_images)
    return brats_report(acc, n_images)


def evaluate_predictions(task: str, pred_labels, truth_labels, n_classes: int) -> MetricsReport:
    pred_labels = np.asarray(pred_labels)
    acc = accumulate(task, pred_labels, np.asarray(truth_labels), n_classes)
    return report_from_counts(task, acc, len(pred_labels))


def evaluate_dataset(model, samples, task: str, batch_size=4) -> MetricsReport:
    """Run ``model`` in eval mode over ``samples`` and micro-average (pool the
    confusion counts of every image before computing rates)."""
    from mcnet.data.dataset import batch_iterator

    if not samples:
        raise DatasetError("cannot evaluate an empty dataset")
    n_classes = max(2, model.config.n_classes)
    acc: dict = {}
    for batch in batch_iterator(samples, batch_size, shuffle=False):
        probs = model.forward(batch.images, mode="eval").data
        acc = accumulate(task, labels_from_probs(probs), batch.masks, n_classes, acc)
    return report_from_counts(task, acc, len(samples))
