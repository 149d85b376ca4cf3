"""Experiment patterns: full-length runs under ``pytest -m slow`` plus reduced-size versions that always run."""
from pathlib import Path

import numpy as np
import pytest

from kembench.services.attention_service import topk_mask
from kembench.services.etf_service import build_etf, mix_task_logits
from kembench.services.experiment_service import load_config, run_imbalance, run_noise_toy
from kembench.utils.autodiff import Tensor
from kembench.utils.rng_utils import make_rng

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = [0, 1, 2]

SMALL_NOISE_TOY = ["plots=false", "m=4", "d=8", "L=2", "layers=1", "eval_size=64", "steps=0",
                   "zero_init_attention=true"]
SMALL_IMBALANCE = ["plots=false", "d=8", "L=4", "top_k=2", "train_count=16", "eval_size=8", "steps=2",
                   "steps_per_epoch=1", "batch_size=4"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_noise_toy_pattern(seed):
    baseline = run_noise_toy(load_config(str(CONFIGS / "noise_toy.env"), ["plots=false"], seed=seed))
    kem = run_noise_toy(load_config(str(CONFIGS / "noise_toy.env"), ["plots=false"], seed=seed, mechanism="kem"))
    assert baseline.noise_mass >= 0.10
    assert kem.final_metrics["noise_selection_rate"] < baseline.noise_mass


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_imbalance_pattern(seed):
    report = run_imbalance(load_config(str(CONFIGS / "imbalance.env"), ["plots=false"], seed=seed))
    kem_drop = report.final_metrics["kem_drop"]
    skem_drop = report.final_metrics["skem_drop"]
    assert kem_drop >= 0.04
    assert skem_drop <= 0.02
    assert skem_drop < kem_drop


@pytest.mark.slow
def test_repeated_run_is_bit_identical():
    cfg = load_config(str(CONFIGS / "noise_toy.env"), ["plots=false", "steps=50"], seed=5)
    assert run_noise_toy(cfg).final_metrics == run_noise_toy(cfg).final_metrics


class TestSmallScale:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_noise_toy_pattern(self, seed):
        # untrained logits are all zero: dense attention is uniform, top-k keeps the first task's tokens
        baseline = run_noise_toy(load_config(str(CONFIGS / "noise_toy.env"), SMALL_NOISE_TOY, seed=seed))
        kem = run_noise_toy(load_config(str(CONFIGS / "noise_toy.env"), SMALL_NOISE_TOY, seed=seed,
                                        mechanism="kem"))
        assert baseline.noise_mass >= 0.10
        assert baseline.noise_mass == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert kem.final_metrics["noise_selection_rate"] == 0.0
        assert kem.final_metrics["noise_selection_rate"] < baseline.noise_mass

    @pytest.mark.parametrize("seed", SEEDS)
    def test_imbalance_report_drops(self, seed):
        report = run_imbalance(load_config(str(CONFIGS / "imbalance.env"), SMALL_IMBALANCE, seed=seed))
        metrics = report.final_metrics
        for mechanism in ("kem", "skem"):
            balanced = metrics[f"{mechanism}_balanced_accuracy"]
            long_tail = metrics[f"{mechanism}_long-tail_accuracy"]
            assert 0.0 <= balanced <= 1.0 and 0.0 <= long_tail <= 1.0
            assert metrics[f"{mechanism}_drop"] == balanced - long_tail

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("n_tasks", [2, 3])
    def test_shared_logit_shift_moves_kem_but_not_skem(self, seed, n_tasks):
        # a token position boosted equally in every task stands in for a dominant shared direction
        m, slots = 5, 4
        rng = make_rng(seed, 71, n_tasks)
        logits = rng.standard_normal((slots, n_tasks * m))
        shift = np.zeros(n_tasks * m)
        shift[[t * m for t in range(n_tasks)]] = 100.0
        shifted = logits + shift
        kem_selected = topk_mask(shifted, n_tasks)
        expected = np.zeros_like(kem_selected)
        expected[:, [t * m for t in range(n_tasks)]] = True
        np.testing.assert_array_equal(kem_selected, expected)

        etf = build_etf(n_tasks, 8, seed)
        mixed = mix_task_logits(Tensor(logits), etf).data
        mixed_shifted = mix_task_logits(Tensor(shifted), etf).data
        np.testing.assert_allclose(mixed_shifted, mixed, rtol=0, atol=1e-10)
        np.testing.assert_array_equal(topk_mask(mixed_shifted, n_tasks), topk_mask(mixed, n_tasks))
