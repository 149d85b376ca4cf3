import math

import numpy as np
import pytest

from kembench.exceptions import ContractError, DimensionError
from kembench.services.attention_service import (
    CrossAttentionLayer, CrossAttentionParams, KemLayer, KemParams, MemorySlots, TaskFeatureBlock, cross_attention,
    cross_attention_with_weights, kem_broadcast, kem_forward, kem_retrieve, kem_write, retrieve, retrieve_logits,
    topk_mask, topk_softmax,
)
from kembench.utils.autodiff import Tensor, permute, softmax_rows
from kembench.utils.rng_utils import glorot_uniform, make_rng, slot_normal


class TestTopkSoftmax:
    def test_worked_row(self):
        y = topk_softmax(Tensor([[1.0, 2.0, 3.0, 4.0]]), 2)
        np.testing.assert_allclose(y.data[0], [0.0, 0.0, 0.26894142, 0.73105858], atol=1e-8)

    def test_ties_go_to_lowest_index(self):
        mask = topk_mask(np.array([[1.0, 1.0, 1.0, 0.0]]), 2)
        np.testing.assert_array_equal(mask[0], [True, True, False, False])

    def test_random_rows(self):
        rng = make_rng(5, 99)
        logits = rng.standard_normal((1000, 9))
        k = 4
        y = topk_softmax(Tensor(logits), k).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        expected = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        for row, top in zip(y, expected):
            assert set(np.flatnonzero(row)) == set(top)

    def test_k_at_least_row_length_is_plain_softmax(self, rng):
        x = Tensor(rng.standard_normal((6, 5)))
        np.testing.assert_array_equal(topk_softmax(x, 5).data, softmax_rows(x).data)
        np.testing.assert_array_equal(topk_softmax(x, 9).data, softmax_rows(x).data)

    def test_k_zero_rejected(self):
        with pytest.raises(ContractError):
            topk_softmax(Tensor(np.zeros((1, 3))), 0)

    def test_unselected_entries_get_no_gradient(self):
        x = Tensor([[0.1, 2.0, -1.0, 3.0]], requires_grad=True)
        (topk_softmax(x, 2) * Tensor([[1.0, 2.0, 3.0, 4.0]])).sum().backward()
        assert x.grad[0, 0] == 0.0 and x.grad[0, 2] == 0.0
        assert x.grad[0, 1] != 0.0


class TestTaskFeatureBlock:
    def test_token_ownership(self, block):
        assert block.n_s == 8
        assert [block.task_of_token(t) for t in (0, 3, 4, 7)] == [0, 0, 1, 1]

    def test_wrong_token_count(self):
        with pytest.raises(DimensionError):
            TaskFeatureBlock(Tensor(np.zeros((7, 4))), n_tasks=2, tokens_per_task=4)


class TestCrossAttention:
    def test_output_shape(self, block, cross_params):
        assert cross_attention(block, cross_params).shape == (8, 4)

    def test_zero_query_key_projections_average_values(self, block, cross_params):
        cross_params.W_q.data[...] = 0.0
        out, weights = cross_attention_with_weights(block, cross_params)
        np.testing.assert_allclose(weights.data, 1.0 / 8.0, atol=1e-15)
        values = block.features.data @ cross_params.W_v.data
        np.testing.assert_allclose(out.data, np.tile(values.mean(axis=0), (8, 1)), atol=1e-12)

    def test_width_mismatch(self, cross_params):
        F = TaskFeatureBlock(Tensor(np.zeros((4, 3))), n_tasks=2, tokens_per_task=2)
        with pytest.raises(DimensionError):
            cross_attention(F, cross_params)


class TestKem:
    def test_shapes(self, block, memory, kem_params):
        R_hat = kem_retrieve(block, memory, kem_params)
        assert R_hat.shape == (2, 4)
        assert kem_write(block, R_hat, kem_params).shape == (8, 4)
        assert kem_forward(block, memory, kem_params).features.shape == (8, 4)

    def test_retrieve_selects_top_k_tokens_per_slot(self, block, memory, kem_params):
        result = retrieve(block, memory, kem_params)
        np.testing.assert_array_equal(result.selected.sum(axis=-1), [3, 3])
        np.testing.assert_array_equal(result.weights.data > 0, result.selected)

    def test_retrieve_matches_direct_formula(self, block, memory, kem_params):
        x, R = block.features.data, memory.slots.data
        logits = (R @ kem_params.W_qr.data) @ (x @ kem_params.W_kr.data).T / math.sqrt(4)
        keep = topk_mask(logits, 3)
        weights = np.where(keep, np.exp(logits - logits.max(axis=1, keepdims=True)), 0.0)
        weights /= weights.sum(axis=1, keepdims=True)
        expected = weights @ (x @ kem_params.W_vr.data)
        np.testing.assert_allclose(kem_retrieve(block, memory, kem_params).data, expected, atol=1e-12)

    def test_write_is_plain_softmax_over_slots(self, block, memory, kem_params):
        R_hat = kem_retrieve(block, memory, kem_params)
        logits = (block.features.data @ kem_params.W_qw.data) @ (R_hat.data @ kem_params.W_kw.data).T / 2.0
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        expected = weights @ (R_hat.data @ kem_params.W_vw.data)
        np.testing.assert_allclose(kem_write(block, R_hat, kem_params).data, expected, atol=1e-12)

    def test_zero_residual_weight_is_identity(self, block, memory, kem_params):
        kem_params.residual_weight = 0.0
        np.testing.assert_array_equal(kem_forward(block, memory, kem_params).features.data, block.features.data)

    def test_broadcast_adds_scaled_update(self, block):
        update = Tensor(np.ones((8, 4)))
        out = kem_broadcast(block, update, 0.5)
        np.testing.assert_allclose(out.features.data, block.features.data + 0.5)

    def test_broadcast_shape_mismatch(self, block):
        with pytest.raises(DimensionError):
            kem_broadcast(block, Tensor(np.ones((2, 4))), 1.0)

    def test_top_k_above_token_count(self, block, memory, kem_params):
        kem_params.top_k = 9
        with pytest.raises(ContractError):
            kem_retrieve(block, memory, kem_params)

    def test_top_k_must_be_positive(self, kem_params):
        with pytest.raises(ContractError):
            KemParams(*kem_params.parameters().values(), top_k=0)

    def test_slot_width_mismatch(self, block, kem_params, rng):
        with pytest.raises(DimensionError):
            retrieve_logits(block, MemorySlots(Tensor(rng.standard_normal((2, 3)))), kem_params)

    def test_batched_features_match_per_sample(self, memory, kem_params, rng):
        x = rng.standard_normal((3, 8, 4))
        batched = kem_forward(TaskFeatureBlock(Tensor(x), 2, 4), memory, kem_params).features.data
        for i in range(3):
            single = kem_forward(TaskFeatureBlock(Tensor(x[i]), 2, 4), memory, kem_params).features.data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestLayers:
    def test_zero_init_cross_attention_is_uniform(self, block, rng):
        layer = CrossAttentionLayer(4, rng, zero_init=True)
        layer(block)
        np.testing.assert_allclose(layer.last_weights, 1.0 / 8.0, atol=1e-15)

    def test_kem_layer_records_diagnostics(self, block, rng):
        layer = KemLayer(4, 3, 2, rng)
        out = layer(block)
        assert out.features.shape == (8, 4)
        assert layer.last_retrieve_weights.shape == (3, 8)
        assert layer.last_write_weights.shape == (8, 3)
        np.testing.assert_array_equal(layer.last_selection.sum(axis=-1), [2, 2, 2])
        assert set(layer.parameters()) == {"slots", "W_qr", "W_kr", "W_vr", "W_qw", "W_kw", "W_vw"}


SHAPES = [(2, 4, 4, 2, 3), (3, 3, 6, 4, 2), (2, 5, 8, 3, 5)]
SEEDS = [0, 1, 2, 3]


def _kem_instance(seed, n_tasks, m, d, L, top_k):
    rng = make_rng(seed, 61, n_tasks, m, d)
    x = rng.standard_normal((n_tasks * m, d))
    params = KemParams(*(glorot_uniform(rng, d, d) for _ in range(6)), top_k=top_k)
    memory = MemorySlots(slot_normal(rng, L, d))
    return rng, x, params, memory


def _close(actual, expected):
    # equal up to summation order
    np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", SHAPES)
class TestTokenOrder:
    def test_retrieve_ignores_token_order(self, seed, shape):
        rng, x, params, memory = _kem_instance(seed, *shape)
        n_tasks, m = shape[:2]
        perm = rng.permutation(n_tasks * m)
        original = kem_retrieve(TaskFeatureBlock(Tensor(x), n_tasks, m), memory, params)
        shuffled = kem_retrieve(TaskFeatureBlock(Tensor(x[perm]), n_tasks, m), memory, params)
        _close(shuffled.data, original.data)

    def test_write_and_broadcast_follow_token_order(self, seed, shape):
        rng, x, params, memory = _kem_instance(seed, *shape)
        n_tasks, m = shape[:2]
        perm = rng.permutation(n_tasks * m)
        block = TaskFeatureBlock(Tensor(x), n_tasks, m)
        shuffled = TaskFeatureBlock(Tensor(x[perm]), n_tasks, m)
        R_hat = kem_retrieve(block, memory, params)

        F_hat = kem_write(block, R_hat, params)
        F_hat_shuffled = kem_write(shuffled, R_hat, params)
        _close(F_hat_shuffled.data, F_hat.data[perm])

        out = kem_broadcast(block, F_hat, 0.5).features.data
        out_shuffled = kem_broadcast(shuffled, F_hat_shuffled, 0.5).features.data
        _close(out_shuffled, out[perm])

    def test_forward_follows_token_order_in_batches(self, seed, shape):
        rng, _, params, memory = _kem_instance(seed, *shape)
        n_tasks, m, d = shape[:3]
        perm = rng.permutation(n_tasks * m)
        # token-major storage, laid out batch-first for the forward
        tokens = rng.standard_normal((n_tasks * m, 2, d))
        out = kem_forward(TaskFeatureBlock(permute(Tensor(tokens), (1, 0, 2)), n_tasks, m), memory, params)
        out_shuffled = kem_forward(TaskFeatureBlock(permute(Tensor(tokens[perm]), (1, 0, 2)), n_tasks, m),
                                   memory, params)
        _close(out_shuffled.features.data, out.features.data[:, perm])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", SHAPES)
class TestSlotBottleneck:
    def test_retrieved_slots_depend_only_on_selected_tokens(self, seed, shape):
        _, x, params, memory = _kem_instance(seed, *shape)
        n_tasks, m = shape[:2]
        full = retrieve(TaskFeatureBlock(Tensor(x), n_tasks, m), memory, params)
        kept = np.flatnonzero(full.selected.any(axis=0))
        assert len(kept) >= params.top_k
        reduced = kem_retrieve(TaskFeatureBlock(Tensor(x[kept]), 1, len(kept)), memory, params)
        _close(reduced.data, full.slots.data)

    def test_each_token_sees_others_only_through_the_slots(self, seed, shape):
        _, x, params, memory = _kem_instance(seed, *shape)
        n_tasks, m = shape[:2]
        block = TaskFeatureBlock(Tensor(x), n_tasks, m)
        R_hat = kem_retrieve(block, memory, params)
        F_hat = kem_write(block, R_hat, params).data
        for token in range(n_tasks * m):
            alone = kem_write(TaskFeatureBlock(Tensor(x[token:token + 1]), 1, 1), R_hat, params)
            _close(alone.data[0], F_hat[token])

    def test_update_lies_in_the_span_of_the_slot_values(self, seed, shape):
        _, x, params, memory = _kem_instance(seed, *shape)
        n_tasks, m, _, L, _ = shape
        block = TaskFeatureBlock(Tensor(x), n_tasks, m)
        R_hat = kem_retrieve(block, memory, params)
        F_hat = kem_write(block, R_hat, params).data
        slot_values = R_hat.data @ params.W_vw.data
        coefficients, *_ = np.linalg.lstsq(slot_values.T, F_hat.T, rcond=None)
        np.testing.assert_allclose(slot_values.T @ coefficients, F_hat.T, rtol=0, atol=1e-9)
        assert np.linalg.matrix_rank(F_hat, tol=1e-9) <= L


class TestSelectionMonotonicity:
    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_raising_a_selected_logit_keeps_it_selected(self, seed, k):
        rng = make_rng(seed, 62, k)
        logits = rng.standard_normal((20, 7))
        mask = topk_mask(logits, k)
        for row, col in zip(*np.nonzero(mask)):
            for bump in (1e-9, 0.5, 10.0):
                raised = logits.copy()
                raised[row, col] += bump
                assert topk_mask(raised, k)[row, col]

    @pytest.mark.parametrize("seed", SEEDS)
    def test_lowering_an_unselected_logit_keeps_it_out(self, seed):
        rng = make_rng(seed, 63)
        logits = rng.standard_normal((20, 7))
        mask = topk_mask(logits, 3)
        for row, col in zip(*np.nonzero(~mask)):
            lowered = logits.copy()
            lowered[row, col] -= 1.0
            np.testing.assert_array_equal(topk_mask(lowered, 3)[row], mask[row])


class TestDenseLimit:
    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("n_tasks,m,d", [(2, 4, 4), (3, 2, 5), (1, 6, 3)])
    def test_top_k_of_all_tokens_is_dense_cross_attention(self, seed, n_tasks, m, d):
        rng = make_rng(seed, 64, n_tasks, m, d)
        block = TaskFeatureBlock(Tensor(rng.standard_normal((n_tasks * m, d))), n_tasks, m)
        params = CrossAttentionParams(*(glorot_uniform(rng, d, d) for _ in range(3)))
        dense = cross_attention(block, params)
        _close(cross_attention(block, params, top_k=n_tasks * m).data, dense.data)
        _close(cross_attention(block, params, top_k=n_tasks * m + 3).data, dense.data)
