import math

import numpy as np
import pytest
import torch

from exceptions import ShapeError
from metrics import ConfusionMatrix, accumulate, iou, relative_generalization
from models import IGNORE_INDEX


def _brute_force_miou(pairs, num_classes):
    per_class = []
    for c in range(num_classes):
        inter = union = 0
        for pred, gt in pairs:
            for p, g in zip(pred.ravel(), gt.ravel()):
                if g == IGNORE_INDEX:
                    continue
                inter += int(p == c and g == c)
                union += int(p == c or g == c)
        if union:
            per_class.append(inter / union)
    return sum(per_class) / len(per_class)


def test_two_by_two_counts():
    cm = accumulate(ConfusionMatrix(2), np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    per_class, miou = iou(cm)
    assert per_class.tolist() == pytest.approx([0.5, 2 / 3])
    assert miou == pytest.approx((0.5 + 2 / 3) / 2)


def test_perfect_prediction():
    labels = np.array([[0, 1, 2], [2, 1, 0]])
    cm = ConfusionMatrix(3).update(labels, labels)
    assert np.array_equal(cm.counts, np.diag(np.diag(cm.counts)))
    per_class, miou = cm.iou()
    assert per_class.tolist() == [1.0, 1.0, 1.0]
    assert miou == 1.0


def test_all_background_prediction():
    gt = np.array([[0, 0], [1, 1]])
    per_class, miou = ConfusionMatrix(2).update(np.zeros_like(gt), gt).iou()
    assert per_class.tolist() == [0.5, 0.0]
    assert miou == 0.25


def test_single_miss_example():
    cm = ConfusionMatrix(2).update(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 0]]))
    per_class, miou = cm.iou()
    assert per_class.tolist() == pytest.approx([1 / 3, 1 / 3])
    assert miou == pytest.approx(1 / 3)
    assert cm.pixel_accuracy() == 0.5


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    cm, pairs = ConfusionMatrix(4), []
    for _ in range(200):
        pred = rng.integers(0, 4, size=(8, 8))
        gt = rng.integers(0, 4, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE_INDEX
        cm.update(pred, gt)
        pairs.append((pred, gt))
    assert cm.iou()[1] == pytest.approx(_brute_force_miou(pairs, 4), abs=1e-12)


def test_absent_classes_are_excluded():
    cm = ConfusionMatrix(3).update(np.array([0, 1, 1]), np.array([0, 1, 0]))
    per_class, miou = cm.iou()
    assert math.isnan(per_class[2])
    assert miou == pytest.approx((0.5 + 0.5) / 2)


def test_ignored_pixels_leave_the_matrix_unchanged():
    cm = ConfusionMatrix(3).update(np.array([0, 1]), np.array([0, 1]))
    before = cm.counts.copy()
    cm.update(np.array([2, 2, 0]), np.full(3, IGNORE_INDEX))
    assert np.array_equal(cm.counts, before)


def test_accumulate_and_merge_are_pure():
    a = ConfusionMatrix(2)
    b = a.accumulate(torch.tensor([0, 1]), torch.tensor([0, 1]))
    assert a.total == 0 and b.total == 2
    merged = b.merge(b)
    assert merged.counts.tolist() == [[2, 0], [0, 2]]
    with pytest.raises(ShapeError):
        b.merge(ConfusionMatrix(3))


def test_invalid_inputs():
    cm = ConfusionMatrix(2)
    with pytest.raises(ShapeError):
        cm.update(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        cm.update(np.array([0]), np.array([2]))
    with pytest.raises(ValueError):
        cm.update(np.array([5]), np.array([0]))
    with pytest.raises(ValueError):
        cm.iou()
    with pytest.raises(ValueError):
        cm.pixel_accuracy()


@pytest.mark.parametrize(
    "gen, oracle, expected",
    [(38.9, 79.2, 49.1), (45.6, 76.4, 59.7), (46.0, 79.9, 57.6), (42.7, 76.8, 55.6), (39.0, 70.0, 55.7), (49.2, 74.7, 65.9)],
)
def test_relative_generalization(gen, oracle, expected):
    assert relative_generalization(gen, oracle) == expected


def test_relative_generalization_is_scale_invariant():
    for scale in (0.01, 1.0, 100.0):
        assert relative_generalization(46.0 * scale, 79.9 * scale) == pytest.approx(57.6, abs=0.1)


@pytest.mark.parametrize("oracle", [0.0, -5.0])
def test_relative_generalization_needs_a_positive_oracle(oracle):
    with pytest.raises(ValueError):
        relative_generalization(40.0, oracle)


def test_relative_generalization_identity():
    assert relative_generalization(63.3, 63.3) == 100.0
