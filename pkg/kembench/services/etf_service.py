"""Simplex equiangular tight frames and the stabilized (sKEM) retrieve step.

The frame ``W* = c * U (I - 11^T / K)`` has ``K`` columns in ``R^d``. Retrieve
logits are mixed along the task axis by its Gram matrix ``W*^T W*``, which is
``c^2 (I - 11^T / K)``: every task's logit is replaced by its deviation from the
cross-task mean, scaled.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from kembench.exceptions import ContractError, DimensionError
from kembench.services.attention_service import (
    KemParams, MemorySlots, TaskFeatureBlock, retrieve,
)
from kembench.utils.autodiff import Tensor, matmul, reshape
from kembench.utils.rng_utils import STREAM_ETF, make_rng

logger = logging.getLogger(__name__)

SCALE_CONVENTIONS = ("sqrt", "linear")


def _frozen(array: np.ndarray) -> Tensor:
    tensor = Tensor(array)
    tensor.data.setflags(write=False)
    return tensor


@dataclass(frozen=True)
class EtfFrame:
    etf_k: int
    dim: int
    U: Tensor
    W_star: Tensor
    gram: Tensor
    scale_convention: str

    @property
    def scale(self) -> float:
        return scale_factor(self.etf_k, self.scale_convention)

    def mixer(self, n_tasks: int) -> Callable[[Tensor], Tensor]:
        if n_tasks != self.etf_k:
            raise ContractError(f"ETF frame has {self.etf_k} vertices but the features hold {n_tasks} tasks")
        return lambda logits: mix_task_logits(logits, self)


def scale_factor(etf_k: int, scale_convention: str) -> float:
    if scale_convention == "sqrt":
        return math.sqrt(etf_k / (etf_k - 1))
    if scale_convention == "linear":
        return etf_k / (etf_k - 1)
    raise ContractError(f"unknown scale convention '{scale_convention}', expected one of {SCALE_CONVENTIONS}")


def build_etf(etf_k: int, dim: int, seed: int, scale_convention: str = "sqrt",
              basis: Optional[np.ndarray] = None) -> EtfFrame:
    """Build a K-vertex simplex ETF in ``dim`` dimensions.

    ``U`` orthonormalizes a seeded Gaussian ``dim x etf_k`` matrix unless a
    ``basis`` with orthonormal columns is given.
    """
    if etf_k < 2:
        raise ContractError(f"an ETF needs at least 2 vertices, got etf_k={etf_k}")
    if dim < etf_k:
        raise ContractError(f"dim={dim} is smaller than etf_k={etf_k}")
    c = scale_factor(etf_k, scale_convention)

    if basis is None:
        gaussian = make_rng(seed, STREAM_ETF, etf_k, dim).standard_normal((dim, etf_k))
        q, r = np.linalg.qr(gaussian)
        # fix the column signs so U depends on the seed only
        U = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    else:
        U = np.asarray(basis, dtype=np.float64)
        if U.shape != (dim, etf_k):
            raise DimensionError(f"basis has shape {U.shape}, expected ({dim}, {etf_k})")
        if not np.allclose(U.T @ U, np.eye(etf_k), atol=1e-10):
            raise ContractError("basis columns are not orthonormal")

    centering = np.eye(etf_k) - np.ones((etf_k, etf_k)) / etf_k
    W_star = c * (U @ centering)
    # closed form of W*^T W* (c^2 times the centering matrix)
    gram = (etf_k / (etf_k - 1)) ** (1 if scale_convention == "sqrt" else 2) * centering
    logger.debug(f"Built ETF frame K={etf_k} d={dim} seed={seed} convention={scale_convention}")
    return EtfFrame(etf_k=etf_k, dim=dim, U=_frozen(U), W_star=_frozen(W_star), gram=_frozen(gram),
                    scale_convention=scale_convention)


def mix_task_logits(logits: Tensor, etf: EtfFrame) -> Tensor:
    """A'[..., l, t, j] = sum_s gram[t, s] * A[..., l, s, j] over task blocks of the token axis."""
    n_s = logits.shape[-1]
    if n_s % etf.etf_k:
        raise DimensionError(f"{n_s} tokens do not split into {etf.etf_k} task blocks")
    m = n_s // etf.etf_k
    blocks = reshape(logits, logits.shape[:-1] + (etf.etf_k, m))
    mixed = matmul(etf.gram, blocks)
    return reshape(mixed, logits.shape)


def skem_retrieve(F: TaskFeatureBlock, R: MemorySlots, params: KemParams, etf: EtfFrame) -> Tensor:
    """R_hat = topk-softmax(mix((R W_qr)(F W_kr)^T / sqrt(d))) F W_vr."""
    return retrieve(F, R, params, mix=etf.mixer(F.n_tasks)).slots


def validate_frame(etf: EtfFrame, atol: float = 1e-10) -> tuple[bool, str]:
    """Check orthonormality, Gram row sums and (sqrt convention) the simplex geometry."""
    U, W, gram = etf.U.data, etf.W_star.data, etf.gram.data
    if not np.allclose(U.T @ U, np.eye(etf.etf_k), atol=atol):
        return False, "U columns are not orthonormal"
    if not np.allclose(W.T @ W, gram, atol=atol):
        return False, "Gram matrix differs from W*^T W*"
    if not np.allclose(gram.sum(axis=1), 0.0, atol=atol):
        return False, "Gram rows do not sum to zero"
    if etf.scale_convention == "sqrt":
        norms = np.linalg.norm(W, axis=0)
        if not np.allclose(norms, 1.0, atol=atol):
            return False, f"column norms {norms} are not 1"
        cosines = (W.T @ W) / np.outer(norms, norms)
        off_diagonal = cosines[~np.eye(etf.etf_k, dtype=bool)]
        if not np.allclose(off_diagonal, -1.0 / (etf.etf_k - 1), atol=atol):
            return False, "pairwise cosines differ from -1/(K-1)"
    return True, "ETF frame is valid"
