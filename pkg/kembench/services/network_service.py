"""Small networks around the attention mechanisms: per-task encoders, heads and toy models."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from kembench.exceptions import ContractError
from kembench.models import ExperimentConfig
from kembench.services.attention_service import CrossAttentionLayer, KemLayer, TaskFeatureBlock
from kembench.services.etf_service import build_etf
from kembench.utils.autodiff import Tensor, add, concat, index_select, matmul, relu, tanh
from kembench.utils.rng_utils import STREAM_PARAMS, glorot_uniform, make_rng, slot_normal, zeros

logger = logging.getLogger(__name__)

MechanismLayer = Union[CrossAttentionLayer, KemLayer]


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = glorot_uniform(rng, fan_in, fan_out)
        self.bias = zeros(fan_out)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class TaskEncoder:
    """Single linear layer plus tanh."""

    def __init__(self, fan_in: int, width: int, rng: np.random.Generator):
        self.linear = Linear(fan_in, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return tanh(self.linear(x))

    def parameters(self) -> Dict[str, Tensor]:
        return self.linear.parameters()


class TaskHead:
    """Mean-pool a task's tokens, then an optional hidden relu layer and a linear classifier."""

    def __init__(self, width: int, classes: int, rng: np.random.Generator, hidden: Optional[int] = None):
        self.hidden = Linear(width, hidden, rng) if hidden else None
        self.out = Linear(hidden or width, classes, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        pooled = tokens.mean(axis=-2)
        if self.hidden is not None:
            pooled = relu(self.hidden(pooled))
        return self.out(pooled)

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"out.{k}": v for k, v in self.out.parameters().items()}
        if self.hidden is not None:
            params.update({f"hidden.{k}": v for k, v in self.hidden.parameters().items()})
        return params


def build_mechanism(cfg: ExperimentConfig, rng: np.random.Generator) -> List[MechanismLayer]:
    """``cfg.layers`` attention layers of the configured mechanism."""
    layers: List[MechanismLayer] = []
    for _ in range(cfg.layers):
        if cfg.mechanism == "cross-attention":
            layers.append(CrossAttentionLayer(cfg.d, rng, residual_weight=cfg.residual_weight,
                                              zero_init=cfg.zero_init_attention))
        else:
            etf = build_etf(cfg.n_tasks, cfg.d, cfg.seed, cfg.etf_scale) if cfg.mechanism == "skem" else None
            layers.append(KemLayer(cfg.d, cfg.L, min(cfg.top_k, cfg.n_s), rng,
                                   residual_weight=cfg.residual_weight, zero_init=cfg.zero_init_attention,
                                   etf=etf))
    return layers


class MultiTaskModel:
    """Per-task encoders feeding a shared mechanism stack; subclasses define inputs and heads."""

    n_tasks: int
    m: int

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rng = make_rng(cfg.seed, STREAM_PARAMS)
        self.encoders: List[TaskEncoder] = []
        self.heads: List[TaskHead] = []
        self.mechanism: List[MechanismLayer] = []

    def mix(self, task_tokens: Sequence[Tensor]) -> TaskFeatureBlock:
        block = TaskFeatureBlock(concat(list(task_tokens), axis=-2), n_tasks=self.n_tasks, tokens_per_task=self.m)
        for layer in self.mechanism:
            block = layer(block)
        return block

    def task_slice(self, block: TaskFeatureBlock, task: int) -> Tensor:
        return index_select(block.features, range(task * self.m, (task + 1) * self.m), axis=-2)

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, encoder in enumerate(self.encoders):
            params.update({f"encoder{i}.{k}": v for k, v in encoder.parameters().items()})
        for i, layer in enumerate(self.mechanism):
            params.update({f"mechanism{i}.{k}": v for k, v in layer.parameters().items()})
        for i, head in enumerate(self.heads):
            params.update({f"head{i}.{k}": v for k, v in head.parameters().items()})
        return params


class NoiseToyModel(MultiTaskModel):
    """Three token streams, heads on tasks 1 and 2 only; task 3 is the noise stream."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__(cfg)
        if cfg.n_tasks != 3:
            raise ContractError(f"the noise toy has exactly 3 tasks, got n_tasks={cfg.n_tasks}")
        self.n_tasks, self.m = 3, cfg.m
        self.encoders = [TaskEncoder(cfg.d, cfg.d, self.rng) for _ in range(3)]
        self.mechanism = build_mechanism(cfg, self.rng)
        self.heads = [TaskHead(cfg.d, config.NOISE_CLASSES, self.rng) for _ in range(2)]

    def __call__(self, task_tokens: Sequence[Tensor]) -> List[Tensor]:
        encoded = [encoder(tokens) for encoder, tokens in zip(self.encoders, task_tokens)]
        block = self.mix(encoded)
        return [head(self.task_slice(block, t)) for t, head in enumerate(self.heads)]


def patchify(images: np.ndarray, patch: int = config.CLEVR_PATCH_SIZE) -> np.ndarray:
    """(B, H, W, C) images to (B, H/p * W/p, p*p*C) row-major patch vectors."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ContractError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    grid = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class ClevrModel(MultiTaskModel):
    """Patch embedding conditioned on the question; non-relational and relational tasks."""

    HIDDEN = 64

    def __init__(self, cfg: ExperimentConfig, answer_classes: int, question_length: int):
        super().__init__(cfg)
        if cfg.n_tasks != 2:
            raise ContractError(f"the imbalance model has exactly 2 tasks, got n_tasks={cfg.n_tasks}")
        patches = (config.CLEVR_IMAGE_SIZE // config.CLEVR_PATCH_SIZE) ** 2
        if cfg.m != patches:
            raise ContractError(f"m must equal the {patches} image patches, got m={cfg.m}")
        self.n_tasks, self.m = 2, cfg.m
        self.patch_embed = Linear(config.CLEVR_PATCH_SIZE ** 2 * 3, cfg.d, self.rng)
        self.position = slot_normal(self.rng, patches, cfg.d)
        self.question_embed = Linear(question_length, cfg.d, self.rng)
        self.encoders = [TaskEncoder(cfg.d, cfg.d, self.rng) for _ in range(2)]
        self.mechanism = build_mechanism(cfg, self.rng)
        self.heads = [TaskHead(cfg.d, answer_classes, self.rng, hidden=self.HIDDEN) for _ in range(2)]

    def __call__(self, images: np.ndarray, questions: np.ndarray) -> List[Tensor]:
        tokens = relu(self.patch_embed(Tensor(patchify(images))))
        query = self.question_embed(Tensor(questions)).reshape(questions.shape[0], 1, self.cfg.d)
        tokens = add(add(tokens, self.position), query)
        block = self.mix([encoder(tokens) for encoder in self.encoders])
        return [head(self.task_slice(block, t)) for t, head in enumerate(self.heads)]

    def parameters(self) -> Dict[str, Tensor]:
        params = super().parameters()
        params.update({f"patch_embed.{k}": v for k, v in self.patch_embed.parameters().items()})
        params.update({f"question_embed.{k}": v for k, v in self.question_embed.parameters().items()})
        params["position"] = self.position
        return params


def select_predictions(logits: Sequence[Tensor], task_of_sample: np.ndarray) -> np.ndarray:
    """Arg-max class of each sample under its own task's head."""
    stacked = np.stack([l.data for l in logits])
    rows = np.arange(task_of_sample.shape[0])
    return np.argmax(stacked[task_of_sample, rows], axis=-1)


def split_by_task(task_of_sample: np.ndarray, n_tasks: int) -> List[Tuple[int, np.ndarray]]:
    return [(t, np.flatnonzero(task_of_sample == t)) for t in range(n_tasks)
            if np.any(task_of_sample == t)]
