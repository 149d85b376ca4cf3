"""Seeded random streams.

Every stream is numpy's Philox4x64-10 counter-based generator keyed by the
128-bit pair ``(seed, stream)``, where ``stream`` folds a tuple of
non-negative integers (experiment component, sample index, ...) into 64 bits
with a fixed polynomial hash. Draws depend only on the key, so results are
reproducible across runs, threads and platforms.
"""
import math
from typing import Tuple

import numpy as np

from kembench.utils.autodiff import Tensor

_MASK64 = (1 << 64) - 1
_FOLD_PRIME = 0x100000001B3

# named stream ids
STREAM_PARAMS = 1
STREAM_ETF = 2
STREAM_NOISE_LATENT = 10
STREAM_NOISE_EMBED = 11
STREAM_NOISE_TOKENS = 12
STREAM_NOISE_DISTRACTOR = 13
STREAM_CLEVR = 20
STREAM_BATCHES = 30
STREAM_EVAL = 31
STREAM_FEATURES = 40


def stream_key(seed: int, stream: Tuple[int, ...]) -> np.ndarray:
    folded = 0xCBF29CE484222325
    for part in stream:
        folded = ((folded ^ (int(part) & _MASK64)) * _FOLD_PRIME) & _MASK64
    return np.array([int(seed) & _MASK64, folded], dtype=np.uint64)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, stream)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, requires_grad: bool = True) -> Tensor:
    """Projection init: uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=requires_grad)


def slot_normal(rng: np.random.Generator, length: int, width: int, requires_grad: bool = True) -> Tensor:
    """Memory-slot init: normal(0, 1/sqrt(width))."""
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(length, width)), requires_grad=requires_grad)


def zeros(*shape: int, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
