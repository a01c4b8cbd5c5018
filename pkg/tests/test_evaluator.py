import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvseg.evaluator import (
    ConfusionMatrix,
    ViewScore,
    accumulate,
    average_miou,
    format_table,
    miou,
    write_scores_csv,
)
from mvseg.scene_io import IGNORE_LABEL

from oracles import confusion_loop


def cm_of(gt, pred, L=2):
    return accumulate(ConfusionMatrix(L), np.asarray(gt), np.asarray(pred))


def test_all_zero_four_pixels():
    cm = cm_of(np.zeros((2, 2), int), np.zeros((2, 2), int))
    assert cm.counts.tolist() == [[4, 0], [0, 0]]


def test_all_ignore_leaves_counts():
    cm = cm_of(np.full((2, 2), IGNORE_LABEL), np.zeros((2, 2), int))
    assert cm.total == 0 and cm.ignored == 4


def test_hand_case_seven_twelfths():
    cm = cm_of([[0, 0], [1, 1]], [[0, 1], [1, 1]])
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    m, ious = miou(cm)
    np.testing.assert_allclose(ious, [1 / 2, 2 / 3])
    assert m == pytest.approx(7 / 12, abs=1e-12)


def test_perfect_and_disjoint():
    assert miou(cm_of([0, 1, 1], [0, 1, 1]))[0] == 1.0
    assert miou(cm_of([0, 1, 1], [1, 0, 0]))[0] == 0.0


def test_absent_class_excluded_or_zero():
    cm = cm_of([0, 0, 1], [0, 0, 1], L=3)
    m, ious = miou(cm)
    assert m == 1.0 and np.isnan(ious[2])
    assert miou(cm, absent="zero")[0] == pytest.approx(2 / 3)


def test_errors():
    with pytest.raises(ValueError):
        miou(ConfusionMatrix(2))
    with pytest.raises(ValueError):
        cm_of([0, 1], [0, 1, 1])
    with pytest.raises(ValueError):
        cm_of([0, 2], [0, 1])


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, (30, 30))
    gt[rng.random(gt.shape) < 0.1] = IGNORE_LABEL
    pred = rng.integers(0, 4, (30, 30))
    assert np.array_equal(cm_of(gt, pred, 4).counts, confusion_loop(gt, pred, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_class_permutation_invariance(seed, L):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, L, 200), rng.integers(0, L, 200)
    perm = rng.permutation(L)
    a = miou(cm_of(gt, pred, L))[0]
    b = miou(cm_of(perm[gt], perm[pred], L))[0]
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_partition_and_merge_invariance(seed, parts):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 3, 300), rng.integers(0, 3, 300)
    whole = cm_of(gt, pred, 3)
    order = rng.permutation(300)
    merged = ConfusionMatrix(3)
    for chunk in np.array_split(order, parts):
        merged = merged.merge(cm_of(gt[chunk], pred[chunk], 3))
    assert np.array_equal(merged.counts, whole.counts)
    sequential = ConfusionMatrix(3)
    for chunk in np.array_split(order, parts):
        sequential = accumulate(sequential, gt[chunk], pred[chunk])
    assert np.array_equal(sequential.counts, whole.counts)


def test_average_miou():
    assert average_miou([0.6229, 0.7994, 0.6193]) == pytest.approx(0.6805, abs=1e-4)
    with pytest.raises(ValueError):
        average_miou([])


def test_csv_and_table(tmp_path):
    cm = cm_of([[0, 0], [1, 1]], [[0, 1], [1, 1]])
    m, ious = miou(cm)
    path = tmp_path / "scores.csv"
    write_scores_csv(path, [ViewScore("001", m, ious, 4)], cm, ("ground", "sphere"))
    lines = path.read_text().splitlines()
    assert lines[0] == "view,pixels,miou,iou_ground,iou_sphere"
    assert lines[1] == "001,4,0.583333,0.500000,0.666667"
    assert lines[2].startswith("ALL,4,0.583333")
    assert "0.5833" in format_table([ViewScore("001", m, ious, 4)], cm)
