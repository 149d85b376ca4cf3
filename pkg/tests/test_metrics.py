import math

import numpy as np
import pytest

from kembench.exceptions import ContractError, DimensionError
from kembench.models import TaskScore
from kembench.utils.metric_utils import accuracy, delta_m, miou, rmse


class TestMiou:
    def test_hand_counted_grid(self):
        truth = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        assert miou(pred, truth, 2) == pytest.approx(7.0 / 12.0, abs=1e-9)

    def test_perfect_prediction(self):
        labels = np.array([[0, 2], [1, 1]])
        assert miou(labels, labels, 3) == 1.0

    def test_disjoint_single_class_maps(self):
        assert miou(np.ones((3, 3)), np.zeros((3, 3)), 2) == 0.0

    def test_absent_classes_are_excluded(self):
        labels = np.array([0, 0, 1])
        assert miou(labels, labels, 5) == 1.0

    def test_invariant_to_pixel_order(self, rng):
        truth = rng.integers(0, 4, size=50)
        pred = rng.integers(0, 4, size=50)
        order = rng.permutation(50)
        assert miou(pred[order], truth[order], 4) == pytest.approx(miou(pred, truth, 4), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            miou(np.array([0, 3]), np.array([0, 1]), 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            miou(np.zeros(3), np.zeros(4), 2)


class TestRmse:
    def test_equal_sequences(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_constant_offset(self):
        truth = [0.3, -1.0, 4.0]
        assert rmse([t - 0.25 for t in truth], truth) == pytest.approx(0.25, abs=1e-9)

    def test_hand_computed(self):
        assert rmse([1.0, 2.0], [0.0, 0.0]) == pytest.approx(math.sqrt(2.5), abs=1e-9)

    def test_empty(self):
        with pytest.raises(ContractError):
            rmse([], [])


class TestDeltaM:
    def test_equal_scores(self):
        scores = [TaskScore(value=0.7), TaskScore(value=0.4, lower_is_better=True)]
        assert delta_m(scores, scores) == 0.0

    def test_lower_is_better_improvement(self):
        mtl = [TaskScore(value=0.9, lower_is_better=True)]
        stl = [TaskScore(value=1.0, lower_is_better=True)]
        assert delta_m(mtl, stl) == pytest.approx(0.10, abs=1e-9)

    def test_mixed_directions(self):
        mtl = [TaskScore(value=50.0), TaskScore(value=0.48, lower_is_better=True)]
        stl = [TaskScore(value=49.0), TaskScore(value=0.50, lower_is_better=True)]
        assert delta_m(mtl, stl) == pytest.approx((1.0 / 49.0 + 0.02 / 0.50) / 2.0, abs=1e-9)
        assert delta_m(mtl, stl) == pytest.approx(0.0302, abs=1e-4)

    def test_improving_one_task_raises_the_score(self):
        stl = [TaskScore(value=0.5), TaskScore(value=2.0, lower_is_better=True)]
        base = delta_m([TaskScore(value=0.5), TaskScore(value=2.0, lower_is_better=True)], stl)
        better = delta_m([TaskScore(value=0.5), TaskScore(value=1.5, lower_is_better=True)], stl)
        assert better > base

    def test_zero_single_task_score(self):
        with pytest.raises(ContractError):
            delta_m([TaskScore(value=1.0)], [TaskScore(value=0.0)])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            delta_m([TaskScore(value=1.0)], [])

    def test_direction_flags_must_agree(self):
        with pytest.raises(ContractError):
            delta_m([TaskScore(value=1.0)], [TaskScore(value=1.0, lower_is_better=True)])


class TestAccuracy:
    @pytest.mark.parametrize("pred,expected", [([1, 2, 3, 4], 1.0), ([0, 0, 0, 0], 0.0), ([1, 2, 3, 0], 0.75)])
    def test_counts(self, pred, expected):
        assert accuracy(pred, [1, 2, 3, 4]) == expected

    def test_empty(self):
        with pytest.raises(ContractError):
            accuracy([], [])
