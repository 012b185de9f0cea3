import json
from fractions import Fraction

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slsdeep.metrics import (
    METRIC_NAMES, REPORT_SCHEMA, ConfusionCounts, binarize, confusion, evaluate_dataset, metrics_from_counts,
)
from slsdeep.tensor import Tensor


def test_confusion_examples():
    ones = np.ones((2, 2), dtype=np.uint8)
    assert confusion(ones, ones) == ConfusionCounts(4, 0, 0, 0)
    pred, gt = np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]])
    c = confusion(pred, gt)
    assert c == ConfusionCounts(tp=1, fp=1, tn=2, fn=0)
    s = confusion(gt, pred)
    assert (s.tp, s.tn, s.fp, s.fn) == (c.tp, c.tn, c.fn, c.fp)


def test_confusion_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        confusion(np.array([[0.0, 0.6]]), np.array([[0, 1]]))
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_metrics_hand_example():
    m = metrics_from_counts(ConfusionCounts(tp=1, fp=1, tn=2, fn=0))
    assert m.acc == 0.75 and m.sen == 1.0 and m.jac == 0.5
    assert m.spe == pytest.approx(2 / 3, abs=1e-15) and m.dic == pytest.approx(2 / 3, abs=1e-15)


def test_metrics_perfect_and_degenerate():
    gt = np.array([[1, 0], [0, 1]])
    m = metrics_from_counts(confusion(gt, gt))
    assert (m.acc, m.dic, m.jac, m.sen, m.spe) == (1.0,) * 5
    empty = metrics_from_counts(ConfusionCounts(0, 0, 4, 0))
    assert (empty.acc, empty.dic, empty.jac, empty.sen, empty.spe) == (1.0,) * 5
    with pytest.raises(ValueError):
        metrics_from_counts(ConfusionCounts(0, 0, 0, 0))


def pixel_loop(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def exact_scores(tp, fp, tn, fn):
    frac = lambda a, b: Fraction(1) if b == 0 else Fraction(a, b)  # noqa: E731
    return dict(acc=frac(tp + tn, tp + fp + tn + fn), dic=frac(2 * tp, 2 * tp + fp + fn), jac=frac(tp, tp + fp + fn),
                sen=frac(tp, tp + fn), spe=frac(tn, tn + fp))


def test_hundred_pairs_against_pixel_oracle():
    rng = np.random.default_rng(0)
    for k in range(100):
        shape = tuple(rng.integers(1, 20, size=2))
        density = rng.random()
        pred = (rng.random(shape) < density).astype(np.uint8)
        gt = (rng.random(shape) < rng.random()).astype(np.uint8)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.tn, c.fn) == pixel_loop(pred, gt)
        m = metrics_from_counts(c)
        for name, value in exact_scores(c.tp, c.fp, c.tn, c.fn).items():
            assert abs(getattr(m, name) - float(value)) <= 1e-12
        # Dice-Jaccard identity, exactly in rationals, and jac <= dic <= 1.
        jac, dic = exact_scores(c.tp, c.fp, c.tn, c.fn)["jac"], exact_scores(c.tp, c.fp, c.tn, c.fn)["dic"]
        assert dic == 2 * jac / (1 + jac)
        assert abs(m.dic - 2 * m.jac / (1 + m.jac)) <= 1e-12
        assert m.jac <= m.dic <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_scores_in_unit_interval(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = metrics_from_counts(ConfusionCounts(tp, fp, tn, fn))
    assert all(0.0 <= v <= 1.0 for v in m.scores().values())
    assert m.jac <= m.dic


def test_binarize_threshold_convention():
    p = np.array([0.0, 0.49999, 0.5, 0.7, 1.0]).reshape(1, 1, 1, 5)
    np.testing.assert_array_equal(binarize(p)[0, 0, 0], [0, 0, 1, 1, 1])
    assert not binarize(np.zeros((1, 1, 3, 3))).any()
    rng = np.random.default_rng(1)
    q = rng.random((3, 1, 7, 7))
    np.testing.assert_array_equal(binarize(q) == 1, q >= 0.5)
    two = np.concatenate([1 - q, q], axis=1)
    np.testing.assert_array_equal(binarize(Tensor(two)), binarize(q))
    for bad in (np.array([1.5]), np.array([-0.1]), np.array([np.nan])):
        with pytest.raises(ValueError):
            binarize(bad)


def test_evaluate_dataset_aggregation():
    full = np.ones((2, 2), dtype=np.uint8)
    half = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    single = evaluate_dataset([(half, full)])
    assert single.scores() == single.per_image[0].scores()
    rep = evaluate_dataset([(full, full), (half, full)])
    assert rep.acc == 0.75
    pooled = evaluate_dataset([(full, full), (half, full)], aggregation="pixel_pooled")
    assert pooled.acc == 6 / 8 and pooled.jac == 6 / 8 and pooled.counts == ConfusionCounts(6, 0, 0, 2)
    with pytest.raises(ValueError):
        evaluate_dataset([])
    with pytest.raises(ValueError):
        evaluate_dataset([(full, full)], aggregation="median")


def test_evaluate_dataset_brute_force_and_permutation():
    rng = np.random.default_rng(2)
    pairs = [((rng.random((9, 9)) < 0.5).astype(np.uint8), (rng.random((9, 9)) < 0.3).astype(np.uint8))
             for _ in range(8)]
    rep = evaluate_dataset(pairs)
    for name in ("acc", "dic", "jac", "sen", "spe"):
        exact = sum(exact_scores(*pixel_loop(p, g))[name] for p, g in pairs) / len(pairs)
        assert abs(getattr(rep, name) - float(exact)) <= 1e-12
    order = rng.permutation(8)
    shuffled = evaluate_dataset([pairs[i] for i in order])
    assert shuffled.scores() == rep.scores()
    assert shuffled.counts == rep.counts


def test_report_json_schema():
    rng = np.random.default_rng(3)
    pairs = [((rng.random((5, 5)) < 0.5).astype(np.uint8), (rng.random((5, 5)) < 0.5).astype(np.uint8))
             for _ in range(3)]
    doc = json.loads(json.dumps(evaluate_dataset(pairs, names=["a", "b", "c"]).to_json()))
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert set(doc["aggregate"]) == set(METRIC_NAMES) == {"ACC", "DIC", "JAC", "SEN", "SPE"}
    assert [r["image"] for r in doc["per_image"]] == ["a", "b", "c"]
    doc["aggregate"]["JAC"] = 1.5
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, REPORT_SCHEMA)
