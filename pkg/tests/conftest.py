import numpy as np
import pytest

from kembench.models import ExperimentConfig
from kembench.services.attention_service import (
    CrossAttentionParams, KemParams, MemorySlots, TaskFeatureBlock,
)
from kembench.services.report_service import ReportService
from kembench.utils.autodiff import Tensor
from kembench.utils.rng_utils import STREAM_FEATURES, glorot_uniform, make_rng, slot_normal


@pytest.fixture
def rng():
    return make_rng(1234, STREAM_FEATURES)


@pytest.fixture
def block(rng):
    """Two tasks of four tokens in width 4."""
    return TaskFeatureBlock(Tensor(rng.standard_normal((8, 4))), n_tasks=2, tokens_per_task=4)


@pytest.fixture
def cross_params(rng):
    return CrossAttentionParams(*(glorot_uniform(rng, 4, 4) for _ in range(3)))


@pytest.fixture
def kem_params(rng):
    return KemParams(*(glorot_uniform(rng, 4, 4) for _ in range(6)), top_k=3)


@pytest.fixture
def memory(rng):
    return MemorySlots(slot_normal(rng, 2, 4))


@pytest.fixture
def reports(tmp_path):
    return ReportService(tmp_path / "runs", plots=False)


@pytest.fixture
def tiny_noise_config():
    return ExperimentConfig(kind="noise-toy", mechanism="cross-attention", m=4, d=8, L=2, top_k=3, layers=1,
                            steps=3, steps_per_epoch=2, batch_size=8, eval_size=32, plots=False)


@pytest.fixture
def tiny_imbalance_config():
    return ExperimentConfig(kind="imbalance", mechanism="kem", d=8, L=4, top_k=2, train_count=16, eval_size=8,
                            steps=2, steps_per_epoch=1, batch_size=4, plots=False)
