import numpy as np
import pytest

from kembench.exceptions import OracleError
from kembench.services.attention_service import cross_attention, kem_forward
from kembench.services.etf_service import build_etf
from kembench.services.experiment_service import run_gradcheck_suite
from kembench.models import ExperimentConfig
from kembench.utils.autodiff import Tensor, log, mul, softmax_rows, tensor_sum
from kembench.utils.gradcheck import DEFAULT_ATOL, check_parameters, finite_diff_check


class TestOracle:
    def test_detects_a_wrong_gradient(self):
        # detach hides one factor, so the analytic gradient is half the true one
        result = finite_diff_check(lambda x: tensor_sum(mul(x, x.detach())), Tensor([1.0, 2.0, -3.0]))
        assert not result.passed
        assert result.max_relative_error > 0.1

    def test_non_finite_evaluation_raises(self):
        with pytest.raises(OracleError):
            finite_diff_check(lambda x: tensor_sum(log(x)), Tensor([1e-6]))

    def test_absolute_floor_accepts_zero_gradients(self, rng):
        # rows of a softmax always sum to one, so the true gradient is zero
        x = Tensor(rng.standard_normal((3, 5)))
        assert finite_diff_check(lambda t: tensor_sum(softmax_rows(t)), x, atol=1e-7).passed

    def test_strict_reading_without_floor(self):
        result = finite_diff_check(lambda t: tensor_sum(mul(t, t)), Tensor([0.5, -1.5]), atol=0.0)
        assert result.passed

    def test_check_parameters_restores_values(self, block, cross_params):
        before = {k: v.data.copy() for k, v in cross_params.parameters().items()}
        results = check_parameters(lambda: tensor_sum(cross_attention(block, cross_params)),
                                   cross_params.parameters(), prefix="cross")
        assert set(results) == {"cross.W_q", "cross.W_k", "cross.W_v"}
        assert all(r.passed for r in results.values())
        for name, value in cross_params.parameters().items():
            np.testing.assert_array_equal(value.data, before[name])


class TestAttentionGradients:
    def test_cross_attention_features(self, block, cross_params, rng):
        readout = Tensor(rng.standard_normal((8, 4)))

        def loss(x):
            return tensor_sum(mul(cross_attention(block.with_features(x), cross_params), readout))

        assert finite_diff_check(loss, block.features).passed

    @pytest.mark.parametrize("use_etf", [False, True])
    def test_kem_forward_parameters(self, block, memory, kem_params, rng, use_etf):
        etf = build_etf(2, 4, seed=3) if use_etf else None
        readout = Tensor(rng.standard_normal((8, 4)))
        params = {"slots": memory.slots, **kem_params.parameters()}
        results = check_parameters(
            lambda: tensor_sum(mul(kem_forward(block, memory, kem_params, etf=etf).features, readout)), params)
        failed = [name for name, r in results.items() if not r.passed]
        assert failed == []


class TestSuite:
    def test_suite_passes_on_one_seed(self):
        suite = run_gradcheck_suite(ExperimentConfig(kind="gradcheck", gradcheck_seeds=[0], plots=False))
        assert suite.passed, suite.failures
        names = {r.name for r in suite.results}
        assert {"cross_attention.features", "kem_forward.features", "kem_forward[etf].features",
                "mtl_loss", "cross_entropy", "mean_squared_error"} <= names
        assert all(r.seed == 0 for r in suite.results)

    def test_suite_passes_without_absolute_floor(self):
        assert DEFAULT_ATOL == 1e-10
        cfg = ExperimentConfig(kind="gradcheck", gradcheck_seeds=[0, 1, 2], plots=False)
        suite = run_gradcheck_suite(cfg, atol=0.0)
        assert suite.passed, suite.failures
        assert suite.atol == 0.0 and all(r.atol == 0.0 for r in suite.results)
