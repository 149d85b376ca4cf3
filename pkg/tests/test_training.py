import math

import numpy as np
import pytest
from pydantic import ValidationError

import config
from kembench.exceptions import ContractError, OptimizerError
from kembench.models import TaskLossSpec
from kembench.services.training_service import (
    AdamW, OptimizerState, mtl_loss, optimizer_step, poly_lr, static_weights, task_loss_terms, train,
    weighted_task_loss,
)
from kembench.utils.autodiff import Tensor, mul, tensor_sum


class TestMtlLoss:
    def test_unit_weights(self):
        assert mtl_loss([0.5, 0.25], [1.0, 1.0]) == 0.75

    def test_dense_prediction_weights(self):
        weights = list(config.PASCAL_LOSS_WEIGHTS.values())
        assert mtl_loss([1.0, 1.0, 1.0], weights) == 33.0

    def test_two_task_weights_sum(self):
        assert mtl_loss([0.3, 1.2], list(config.NYUD_LOSS_WEIGHTS.values())) == pytest.approx(1.5)

    def test_tensor_losses_keep_gradients(self):
        a = Tensor(2.0, requires_grad=True)
        b = Tensor(3.0, requires_grad=True)
        total = mtl_loss([a, b], [1.0, 2.0])
        assert total.item() == 8.0
        total.backward()
        assert a.grad == 1.0 and b.grad == 2.0

    @pytest.mark.parametrize("losses,weights", [
        ([1.0, 2.0], [1.0]),
        ([], []),
        ([1.0, 2.0], [1.0, 0.0]),
        ([1.0], [-1.0]),
    ])
    def test_contract_errors(self, losses, weights):
        with pytest.raises(ContractError):
            mtl_loss(losses, weights)

    def test_static_policy_returns_the_weights(self):
        assert static_weights([1.0, 2.0], 7, [0.1, 0.2]) == [1.0, 2.0]


class TestTaskLosses:
    def test_mixed_loss_kinds(self):
        losses = TaskLossSpec(weights=[1.0, 2.0], kinds=["cross-entropy", "mean-squared-error"])
        logits = Tensor(np.zeros((2, 4)), requires_grad=True)
        depth = Tensor(np.zeros((2, 4)), requires_grad=True)
        total, values = weighted_task_loss(losses, [logits, depth], [[0, 1], np.ones((2, 4))])
        assert values == pytest.approx([math.log(4.0), 1.0])
        assert total.item() == pytest.approx(math.log(4.0) + 2.0)
        total.backward()
        # d(mean squared error)/d(pred) = 2 (pred - target) / 8, times the weight 2
        np.testing.assert_allclose(depth.grad, -0.5)
        np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-15)

    def test_terms_follow_the_configured_kinds(self):
        losses = TaskLossSpec(weights=[1.0], kinds=["mean-squared-error"])
        (term,) = task_loss_terms(losses, [Tensor([[1.0, 3.0]])], [np.array([[0.0, 0.0]])])
        assert term.item() == 5.0

    def test_output_count_must_match(self):
        losses = TaskLossSpec(weights=[1.0, 1.0], kinds=["cross-entropy", "cross-entropy"])
        with pytest.raises(ContractError):
            task_loss_terms(losses, [Tensor(np.zeros((1, 3)))], [[0]])

    @pytest.mark.parametrize("fields", [
        {"weights": [1.0, 0.0], "kinds": ["cross-entropy", "cross-entropy"]},
        {"weights": [1.0], "kinds": ["cross-entropy", "mean-squared-error"]},
        {"weights": [1.0], "kinds": ["hinge"]},
    ])
    def test_invalid_loss_settings(self, fields):
        with pytest.raises(ValidationError):
            TaskLossSpec(**fields)


class TestPolyLr:
    def test_start_and_end(self):
        assert poly_lr(0, 100, 0.1) == 0.1
        assert poly_lr(100, 100, 0.1) == 0.0

    def test_midpoint(self):
        assert poly_lr(50, 100, 0.00005, 0.9) == pytest.approx(0.00005 * 0.5 ** 0.9)
        assert poly_lr(50, 100, 0.00005, 0.9) == pytest.approx(2.679e-5, rel=1e-3)

    def test_past_the_end_clamps_to_zero(self):
        assert poly_lr(150, 100, 0.1) == 0.0

    def test_monotone(self):
        rates = [poly_lr(t, 40, 0.01) for t in range(41)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("total", [0, -5])
    def test_non_positive_total(self, total):
        with pytest.raises(ContractError):
            poly_lr(0, total, 0.1)


class TestOptimizer:
    def test_zero_gradient_without_decay_is_identity(self):
        theta = Tensor([1.5, -2.0], requires_grad=True)
        state = OptimizerState(lr0=0.1, weight_decay=0.0)
        optimizer_step({"theta": theta}, {"theta": np.zeros(2)}, state)
        np.testing.assert_array_equal(theta.data, [1.5, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        theta = Tensor([1.0, 1.0], requires_grad=True)
        state = OptimizerState(lr0=0.01, weight_decay=0.0)
        optimizer_step({"theta": theta}, {"theta": np.array([0.5, -3.0])}, state)
        np.testing.assert_allclose(theta.data, [0.99, 1.01], atol=1e-8)

    def test_decay_is_decoupled(self):
        theta = Tensor([2.0], requires_grad=True)
        state = OptimizerState(lr0=0.1, weight_decay=0.5)
        optimizer_step({"theta": theta}, {"theta": np.zeros(1)}, state)
        np.testing.assert_allclose(theta.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_follows_the_schedule(self):
        state = OptimizerState(lr0=0.1, total_steps=10, step=5)
        assert state.learning_rate() == pytest.approx(poly_lr(5, 10, 0.1))

    def test_non_finite_gradient_rejects_the_step(self):
        theta = Tensor([1.0], requires_grad=True)
        optimizer = AdamW({"theta": theta}, lr=0.1)
        theta.grad = np.array([np.nan])
        with pytest.raises(OptimizerError):
            optimizer.step()
        assert theta.data[0] == 1.0
        assert optimizer.state.step == 0
        assert optimizer.state.first_moment == {}

    def test_descends_a_quadratic(self):
        theta = Tensor([1.0], requires_grad=True)
        optimizer = AdamW({"theta": theta}, lr=0.1, weight_decay=0.0)
        trajectory = []

        def step_fn(step, weights):
            trajectory.append(abs(theta.data[0]))
            return tensor_sum(mul(theta, theta)), [theta.data[0] ** 2]

        losses = train(step_fn, optimizer, steps=10, steps_per_epoch=5, weights=[1.0])
        trajectory.append(abs(theta.data[0]))
        assert len(losses) == 2
        assert all(a > b for a, b in zip(trajectory, trajectory[1:]))


class TestTrain:
    def test_one_loss_per_epoch_including_a_partial_one(self):
        theta = Tensor([0.5], requires_grad=True)
        optimizer = AdamW({"theta": theta}, lr=0.01)
        losses = train(lambda step, w: (tensor_sum(mul(theta, theta)), [0.0]), optimizer,
                       steps=7, steps_per_epoch=3, weights=[1.0])
        assert len(losses) == 3

    def test_policy_sees_the_configured_weights(self):
        theta = Tensor([0.5], requires_grad=True)
        seen = []

        def step_fn(step, weights):
            seen.append(list(weights))
            return tensor_sum(mul(theta, theta)), [0.25]

        def halve(weights, step, losses):
            return [w / 2 for w in weights]

        train(step_fn, AdamW({"theta": theta}, lr=0.01), steps=3, steps_per_epoch=3, weights=[2.0], policy=halve)
        assert seen == [[2.0], [1.0], [1.0]]

    def test_zero_steps(self):
        theta = Tensor([0.5], requires_grad=True)
        assert train(lambda s, w: (tensor_sum(theta), [0.0]), AdamW({"theta": theta}, lr=0.01),
                     steps=0, steps_per_epoch=1, weights=[1.0]) == []
