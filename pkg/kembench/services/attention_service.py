"""Cross-attention baseline, top-k softmax and the three KEM steps.

Feature blocks may carry leading batch dimensions ``(..., n_s, d)``; memory
slots and projections are shared across the batch.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Optional, Tuple

import numpy as np

from kembench.exceptions import ContractError, DimensionError
from kembench.utils.autodiff import (
    Tensor, add, masked_softmax, matmul, scale, softmax_rows, transpose,
)
from kembench.utils.rng_utils import glorot_uniform, slot_normal

if TYPE_CHECKING:
    from kembench.services.etf_service import EtfFrame

logger = logging.getLogger(__name__)

LogitMixer = Callable[[Tensor], Tensor]


@dataclass
class TaskFeatureBlock:
    """Concatenated per-task tokens, task ``t`` owning rows ``t*m .. (t+1)*m - 1``."""

    features: Tensor
    n_tasks: int
    tokens_per_task: int

    def __post_init__(self):
        if self.features.ndim < 2:
            raise DimensionError(f"features need shape (..., n_s, d), got {self.features.shape}")
        if self.n_tasks < 1 or self.tokens_per_task < 1:
            raise ContractError("n_tasks and tokens_per_task must be positive")
        if self.features.shape[-2] != self.n_s:
            raise DimensionError(
                f"features {self.features.shape} do not hold {self.n_tasks} x {self.tokens_per_task} tokens"
            )

    @property
    def n_s(self) -> int:
        return self.n_tasks * self.tokens_per_task

    @property
    def width(self) -> int:
        return self.features.shape[-1]

    def task_of_token(self, token: int) -> int:
        if not 0 <= token < self.n_s:
            raise ContractError(f"token {token} outside [0, {self.n_s})")
        return token // self.tokens_per_task

    def with_features(self, features: Tensor) -> "TaskFeatureBlock":
        return TaskFeatureBlock(features, self.n_tasks, self.tokens_per_task)


@dataclass
class MemorySlots:
    slots: Tensor

    def __post_init__(self):
        if self.slots.ndim != 2:
            raise DimensionError(f"memory slots need shape (L, d), got {self.slots.shape}")

    @property
    def length(self) -> int:
        return self.slots.shape[0]

    @property
    def width(self) -> int:
        return self.slots.shape[1]


@dataclass
class KemParams:
    W_qr: Tensor
    W_kr: Tensor
    W_vr: Tensor
    W_qw: Tensor
    W_kw: Tensor
    W_vw: Tensor
    residual_weight: float = 1.0
    top_k: int = 3

    def __post_init__(self):
        if self.top_k < 1:
            raise ContractError(f"top_k must be >= 1, got {self.top_k}")

    def parameters(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in ("W_qr", "W_kr", "W_vr", "W_qw", "W_kw", "W_vw")}


@dataclass
class CrossAttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    def parameters(self) -> Dict[str, Tensor]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v}


def _check_square(weights: Dict[str, Tensor], width: int) -> None:
    for name, weight in weights.items():
        if weight.shape != (width, width):
            raise DimensionError(f"{name} has shape {weight.shape}, expected ({width}, {width})")


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row, ties to the lowest index."""
    if k < 1:
        raise ContractError(f"top-k needs k >= 1, got {k}")
    logits = np.asarray(logits)
    q = logits.shape[-1]
    if k >= q:
        return np.ones(logits.shape, dtype=bool)
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_softmax(logits: Tensor, k: int) -> Tensor:
    """Softmax over the ``k`` largest logits of each row; every other entry is exactly 0.

    The selected index set is a constant of the backward pass.
    """
    if k < 1:
        raise ContractError(f"top-k needs k >= 1, got {k}")
    if k >= logits.shape[-1]:
        return softmax_rows(logits)
    return masked_softmax(logits, topk_mask(logits.data, k))


def _attend(logits: Tensor, values: Tensor, top_k: Optional[int]) -> Tuple[Tensor, Tensor]:
    weights = softmax_rows(logits) if top_k is None else topk_softmax(logits, top_k)
    return matmul(weights, values), weights


def cross_attention_with_weights(F: TaskFeatureBlock, params: CrossAttentionParams,
                                 top_k: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    _check_square(params.parameters(), F.width)
    x = F.features
    queries = matmul(x, params.W_q)
    keys = matmul(x, params.W_k)
    values = matmul(x, params.W_v)
    logits = scale(matmul(queries, transpose(keys)), 1.0 / math.sqrt(F.width))
    return _attend(logits, values, top_k)


def cross_attention(F: TaskFeatureBlock, params: CrossAttentionParams, top_k: Optional[int] = None) -> Tensor:
    """F' = softmax((F W_q)(F W_k)^T / sqrt(d)) F W_v over all tasks' tokens.

    ``top_k`` swaps the softmax for ``topk_softmax``.
    """
    output, _ = cross_attention_with_weights(F, params, top_k)
    return output


def retrieve_logits(F: TaskFeatureBlock, R: MemorySlots, params: KemParams) -> Tuple[Tensor, Tensor]:
    """Slot-to-token logits ``(..., L, n_s)`` and token values ``F W_vr``."""
    if R.width != F.width:
        raise DimensionError(f"memory slots {R.slots.shape} and features {F.features.shape} differ in width")
    _check_square(params.parameters(), F.width)
    queries = matmul(R.slots, params.W_qr)
    keys = matmul(F.features, params.W_kr)
    values = matmul(F.features, params.W_vr)
    logits = scale(matmul(queries, transpose(keys)), 1.0 / math.sqrt(F.width))
    return logits, values


@dataclass
class RetrieveResult:
    slots: Tensor
    weights: Tensor
    selected: np.ndarray = field(repr=False)


def retrieve(F: TaskFeatureBlock, R: MemorySlots, params: KemParams,
             mix: Optional[LogitMixer] = None) -> RetrieveResult:
    """Retrieve step with an optional logit mixer applied before top-k selection."""
    if params.top_k > F.n_s:
        raise ContractError(f"top_k={params.top_k} exceeds the {F.n_s} available tokens")
    logits, values = retrieve_logits(F, R, params)
    if mix is not None:
        logits = mix(logits)
    slots, weights = _attend(logits, values, params.top_k)
    return RetrieveResult(slots=slots, weights=weights, selected=topk_mask(logits.data, params.top_k))


def kem_retrieve(F: TaskFeatureBlock, R: MemorySlots, params: KemParams) -> Tensor:
    """R_hat = topk-softmax((R W_qr)(F W_kr)^T / sqrt(d)) F W_vr."""
    return retrieve(F, R, params).slots


def kem_write_with_weights(F: TaskFeatureBlock, R_hat: Tensor, params: KemParams) -> Tuple[Tensor, Tensor]:
    if R_hat.shape[-1] != F.width:
        raise DimensionError(f"retrieved slots {R_hat.shape} and features {F.features.shape} differ in width")
    _check_square(params.parameters(), F.width)
    queries = matmul(F.features, params.W_qw)
    keys = matmul(R_hat, params.W_kw)
    values = matmul(R_hat, params.W_vw)
    logits = scale(matmul(queries, transpose(keys)), 1.0 / math.sqrt(F.width))
    return _attend(logits, values, None)


def kem_write(F: TaskFeatureBlock, R_hat: Tensor, params: KemParams) -> Tensor:
    """F_hat = softmax((F W_qw)(R_hat W_kw)^T / sqrt(d)) R_hat W_vw, plain softmax over slots."""
    output, _ = kem_write_with_weights(F, R_hat, params)
    return output


def kem_broadcast(F: TaskFeatureBlock, F_hat: Tensor, w_r: float) -> TaskFeatureBlock:
    if F_hat.shape != F.features.shape:
        raise DimensionError(f"broadcast shapes differ: {F.features.shape} vs {F_hat.shape}")
    return F.with_features(add(F.features, scale(F_hat, w_r)))


def kem_forward(F: TaskFeatureBlock, R: MemorySlots, params: KemParams,
                etf: Optional["EtfFrame"] = None) -> TaskFeatureBlock:
    """Retrieve, write and broadcast; an ETF frame switches retrieve to the stabilized variant."""
    mix = None if etf is None else etf.mixer(F.n_tasks)
    R_hat = retrieve(F, R, params, mix=mix).slots
    return kem_broadcast(F, kem_write(F, R_hat, params), params.residual_weight)


class CrossAttentionLayer:
    """Residual single-head cross-attention over the concatenated task tokens."""

    def __init__(self, width: int, rng: np.random.Generator, residual_weight: float = 1.0,
                 zero_init: bool = False):
        self.params = CrossAttentionParams(
            W_q=glorot_uniform(rng, width, width),
            W_k=glorot_uniform(rng, width, width),
            W_v=glorot_uniform(rng, width, width),
        )
        if zero_init:
            self.params.W_q.data[...] = 0.0
            self.params.W_k.data[...] = 0.0
        self.residual_weight = residual_weight
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, F: TaskFeatureBlock) -> TaskFeatureBlock:
        output, weights = cross_attention_with_weights(F, self.params)
        self.last_weights = weights.numpy()
        return kem_broadcast(F, output, self.residual_weight)

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters()


class KemLayer:
    """Memory slots plus KEM projections; an ETF frame makes it the stabilized variant."""

    def __init__(self, width: int, length: int, top_k: int, rng: np.random.Generator,
                 residual_weight: float = 1.0, zero_init: bool = False, etf: Optional["EtfFrame"] = None):
        self.memory = MemorySlots(slot_normal(rng, length, width))
        self.params = KemParams(
            W_qr=glorot_uniform(rng, width, width),
            W_kr=glorot_uniform(rng, width, width),
            W_vr=glorot_uniform(rng, width, width),
            W_qw=glorot_uniform(rng, width, width),
            W_kw=glorot_uniform(rng, width, width),
            W_vw=glorot_uniform(rng, width, width),
            residual_weight=residual_weight,
            top_k=top_k,
        )
        if zero_init:
            for name in ("W_qr", "W_kr", "W_qw", "W_kw"):
                getattr(self.params, name).data[...] = 0.0
        self.etf = etf
        self.last_retrieve_weights: Optional[np.ndarray] = None
        self.last_selection: Optional[np.ndarray] = None
        self.last_write_weights: Optional[np.ndarray] = None

    def __call__(self, F: TaskFeatureBlock) -> TaskFeatureBlock:
        mix = None if self.etf is None else self.etf.mixer(F.n_tasks)
        retrieved = retrieve(F, self.memory, self.params, mix=mix)
        F_hat, write_weights = kem_write_with_weights(F, retrieved.slots, self.params)
        self.last_retrieve_weights = retrieved.weights.numpy()
        self.last_selection = retrieved.selected
        self.last_write_weights = write_weights.numpy()
        return kem_broadcast(F, F_hat, self.params.residual_weight)

    def parameters(self) -> Dict[str, Tensor]:
        return {"slots": self.memory.slots, **self.params.parameters()}
