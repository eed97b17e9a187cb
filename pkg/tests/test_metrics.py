"""Confusion counts, rate metrics, region metrics and reports."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcnet.errors import DatasetError, ShapeError
from mcnet.metrics import (
    BINARY_KEYS,
    ConfusionCounts,
    MetricsReport,
    binary_metrics,
    brats_regions,
    confusion_counts,
    evaluate_dataset,
    evaluate_predictions,
    region_metrics,
    region_metrics_from_counts,
)
from mcnet.data import Sample


def tally(pred, truth, positive=1):
    tp = fp = tn = fn = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        p, t = p == positive, t == positive
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def region_oracle(m, n):
    cells = list(zip(np.ravel(m).astype(bool), np.ravel(n).astype(bool)))
    m1 = {i for i, (a, _) in enumerate(cells) if a}
    n1 = {i for i, (_, b) in enumerate(cells) if b}
    m0 = set(range(len(cells))) - m1
    n0 = set(range(len(cells))) - n1
    dice = len(m1 & n1) / ((len(m1) + len(n1)) / 2) if (m1 or n1) else None
    sens = len(m1 & n1) / len(n1) if n1 else None
    spec = len(m0 & n0) / len(n0) if n0 else None
    return dice, sens, spec


masks16 = arrays(np.int64, (16, 16), elements=st.integers(0, 1))


# --- confusion counts -----------------------------------------------------


def test_identical_masks(rng):
    m = rng.integers(0, 2, (8, 8))
    c = confusion_counts(m, m)
    assert c.fp == c.fn == 0


def test_complement_masks(rng):
    m = rng.integers(0, 2, (8, 8))
    c = confusion_counts(1 - m, m)
    assert c.tp == c.tn == 0


def test_random_8x8_matches_tally(rng):
    for _ in range(20):
        p, t = rng.integers(0, 3, (2, 8, 8))
        for cls in range(3):
            c = confusion_counts(p, t, cls)
            assert (c.tp, c.fp, c.tn, c.fn) == tally(p, t, cls)
            assert c.total == 64


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeError):
        confusion_counts(np.zeros((4, 4)), np.zeros((4, 5)))


# --- binary metrics -------------------------------------------------------


def test_precision_example():
    assert binary_metrics(ConfusionCounts(tp=3, fp=1))["precision"] == 0.75


def test_dice_tn_form_example():
    assert binary_metrics(ConfusionCounts(tn=4, fn=1, fp=1))["dice"] == pytest.approx(0.8)


def test_perfect_classifier():
    r = binary_metrics(ConfusionCounts(tp=5, tn=5))
    assert r["accuracy"] == r["f_measure"] == r["specificity"] == 1.0


def test_undefined_metrics_are_none():
    r = binary_metrics(ConfusionCounts(tn=10))
    assert r["precision"] is None and r["sensitivity"] is None and r["f_measure"] is None
    assert r["dice_tp"] is None
    assert r["accuracy"] == 1.0 and r["specificity"] == 1.0


def _oracle_rates(tp, fp, tn, fn):
    div = lambda a, b: None if b == 0 else a / b
    p, r = div(tp, tp + fp), div(tp, tp + fn)
    return {
        "precision": p,
        "sensitivity": r,
        "f_measure": None if p is None or r is None or p + r == 0 else 2 * p * r / (p + r),
        "accuracy": div(tp + tn, tp + fp + tn + fn),
        "specificity": div(tn, tn + fp),
        "dice": div(2 * tn, 2 * tn + fn + fp),
        "dice_tp": div(2 * tp, 2 * tp + fn + fp),
    }


def _close(a, b, tol=1e-12):
    return (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= tol)


@given(masks16, masks16)
def test_binary_metrics_match_oracle(p, t):
    got = binary_metrics(confusion_counts(p, t))
    want = _oracle_rates(*tally(p, t))
    for k in want:
        assert _close(got[k], want[k]), k


@given(masks16, masks16)
def test_rates_bounded_and_accuracy_relabel_invariant(p, t):
    c = confusion_counts(p, t)
    r = binary_metrics(c)
    assert all(v is None or 0.0 <= v <= 1.0 for v in r.values())
    swapped = binary_metrics(confusion_counts(1 - p, 1 - t))
    assert swapped == binary_metrics(c.swapped())
    assert _close(r["accuracy"], swapped["accuracy"])
    assert _close(r["sensitivity"], swapped["specificity"])
    assert _close(r["specificity"], swapped["sensitivity"])


# --- region metrics -------------------------------------------------------


def test_self_agreement():
    m = np.zeros((8, 8), dtype=int)
    m[2:5, 3:7] = 1
    assert region_metrics(m, m) == (1.0, 1.0, 1.0)


def test_disjoint_regions():
    m = np.zeros((8, 8), dtype=int)
    n = np.zeros((8, 8), dtype=int)
    m[:2] = 1
    n[5:] = 1
    dice, sens, _ = region_metrics(m, n)
    assert dice == 0 and sens == 0


def test_region_undefined_when_truth_empty_or_full():
    empty, full = np.zeros((4, 4)), np.ones((4, 4))
    assert region_metrics(empty, empty)[1] is None
    assert region_metrics(full, full)[2] is None


@given(masks16, masks16)
def test_region_metrics_match_set_oracle(m, n):
    got = region_metrics(m, n)
    want = region_oracle(m, n)
    for a, b in zip(got, want):
        assert _close(a, b)
    assert got == region_metrics_from_counts(confusion_counts(m, n))


@given(masks16, masks16)
def test_dice_star_symmetric_and_sens_matches(m, n):
    assert _close(region_metrics(m, n)[0], region_metrics(n, m)[0])
    assert _close(region_metrics(m, n)[1], binary_metrics(confusion_counts(m, n))["sensitivity"])
    # the conventional TP-form Dice coincides with Dice*
    assert _close(region_metrics(m, n)[0], binary_metrics(confusion_counts(m, n))["dice_tp"])


def test_region_shape_mismatch():
    with pytest.raises(ShapeError):
        region_metrics(np.zeros((3, 3)), np.zeros((3, 4)))


# --- BraTS regions --------------------------------------------------------


def test_brats_all_zero():
    r = brats_regions(np.zeros((4, 4), dtype=int))
    assert not any(r[k].any() for k in ("WT", "ET", "TC"))


def test_brats_label3_everywhere():
    lab = np.zeros((3, 3), dtype=int)
    lab[1, 1] = 3
    r = brats_regions(lab)
    assert r["WT"][1, 1] and r["ET"][1, 1] and r["TC"][1, 1]


def test_brats_edema_in_wt_only():
    lab = np.zeros((3, 3), dtype=int)
    lab[0, 2] = 1
    r = brats_regions(lab)
    assert r["WT"][0, 2] and not r["ET"][0, 2] and not r["TC"][0, 2]


def test_brats_rejects_out_of_range():
    with pytest.raises(ShapeError):
        brats_regions(np.array([[0, 4]]))


@given(arrays(np.int64, (8, 8), elements=st.integers(0, 3)))
def test_brats_containment_chain(lab):
    r = brats_regions(lab)
    assert np.all(r["TC"] <= r["ET"]) and np.all(r["ET"] <= r["WT"])


# --- reports --------------------------------------------------------------


def test_micro_average_equals_concatenation(rng):
    p = rng.integers(0, 2, (2, 8, 8))
    t = rng.integers(0, 2, (2, 8, 8))
    pooled = evaluate_predictions("binary", p, t, 2)
    joined = evaluate_predictions("binary", np.concatenate(p, 1)[None], np.concatenate(t, 1)[None], 2)
    assert pooled.metrics == joined.metrics


def test_one_image_dataset_equals_single_image_metrics(rng):
    p, t = rng.integers(0, 2, (2, 8, 8))
    report = evaluate_predictions("binary", p[None], t[None], 2)
    single = binary_metrics(confusion_counts(p, t))
    for k in BINARY_KEYS:
        assert _close(report.metrics[k], None if single[k] is None else 100 * single[k])


def test_report_json_schema_and_percentages(rng):
    p = rng.integers(0, 5, (2, 8, 8))
    t = rng.integers(0, 5, (2, 8, 8))
    report = evaluate_predictions("chaos", p, t, 5)
    data = json.loads(report.to_json())
    assert set(data) == {"task", "n_images", "metrics", "breakdown", "counts", "notes"}
    assert list(data["breakdown"]) == ["liver", "kidney_l", "kidney_r", "spleen"]
    assert list(data["metrics"])[:4] == [f"{o}_accuracy" for o in data["breakdown"]]
    for v in data["metrics"].values():
        assert v is None or 0 <= v <= 100
    assert MetricsReport.from_json(report.to_json()).to_dict() == report.to_dict()


def test_brats_report_column_order(rng):
    t = rng.integers(0, 4, (1, 8, 8))
    report = evaluate_predictions("brats", t, t, 4)
    assert list(report.metrics) == [f"{m}_{r}" for m in ("dice_star", "sens_star", "spec_star")
                                    for r in ("et", "wt", "tc")]
    assert all(v == 100.0 for v in report.metrics.values())
    assert any("naming" in n for n in report.notes)
    header = report.to_text().splitlines()[1].split()
    assert header[:3] == ["dice_star_et", "dice_star_wt", "dice_star_tc"]


def test_undefined_printed_and_null(rng):
    t = np.zeros((1, 4, 4), dtype=int)
    report = evaluate_predictions("binary", t, t, 2)
    assert report.metrics["precision"] is None
    assert "undefined" in report.to_text()
    assert json.loads(report.to_json())["metrics"]["precision"] is None


class _Oracle:
    """Stand-in model whose eval forward returns stored probabilities."""

    def __init__(self, probs, n_classes):
        from mcnet.model import ModelConfig
        self.config = ModelConfig.uniform(2, 6, input_size=8, n_classes=n_classes)
        self.probs = probs
        self.i = 0

    def forward(self, images, mode="eval"):
        from mcnet.engine import Tensor
        out = self.probs[self.i:self.i + len(images)]
        self.i += len(images)
        return Tensor(out)


def _samples(masks):
    return [Sample(np.zeros((1,) + m.shape, np.float32), m, f"s{i}") for i, m in enumerate(masks)]


def test_evaluate_dataset_perfect_model(rng):
    masks = rng.integers(0, 2, (3, 8, 8))
    report = evaluate_dataset(_Oracle(masks[:, None].astype(float), 1), _samples(masks), "binary")
    assert all(v == 100.0 for v in report.metrics.values() if v is not None)


def test_evaluate_dataset_background_predictor(rng):
    masks = rng.integers(0, 2, (3, 8, 8))
    report = evaluate_dataset(_Oracle(np.zeros((3, 1, 8, 8)), 1), _samples(masks), "binary")
    assert report.metrics["sensitivity"] == 0


def test_evaluate_dataset_multiclass_argmax(rng):
    masks = rng.integers(0, 5, (2, 8, 8))
    probs = np.eye(5)[masks].transpose(0, 3, 1, 2)
    report = evaluate_dataset(_Oracle(probs, 5), _samples(masks), "chaos")
    assert report.metrics["dice_star"] == 100.0


def test_evaluate_dataset_empty():
    with pytest.raises(DatasetError):
        evaluate_dataset(_Oracle(np.zeros((0, 1, 8, 8)), 1), [], "binary")
