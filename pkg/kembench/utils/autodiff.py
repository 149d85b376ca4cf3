"""Dense float64 tensors with reverse-mode differentiation.

Every forward operation records its inputs and a closure mapping the output
gradient to input gradients. ``Tensor.backward`` walks the recorded graph once
in reverse topological order, sums gradients across fan-out, deposits them on
leaves that require grad, and then drops the graph.

``matmul`` accumulates products left to right over the inner dimension, so a
naive triple loop in 64-bit arithmetic reproduces it bit for bit. Matrix
multiplies and softmax inputs are reported to the active ``CostCounter`` (see
``instrument``); backward passes are never counted.
"""
import contextvars
import logging
import math
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from kembench.exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)


class CostCounter:
    """Per-run accumulator of scalar matmul multiplies and softmax input entries."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.matmul_multiplies = 0
        self.softmax_entries = 0

    def reset(self) -> None:
        self.matmul_multiplies = 0
        self.softmax_entries = 0

    def __repr__(self) -> str:
        return (f"CostCounter(enabled={self.enabled}, matmul_multiplies={self.matmul_multiplies}, "
                f"softmax_entries={self.softmax_entries})")


_ACTIVE_COUNTER: contextvars.ContextVar[Optional[CostCounter]] = contextvars.ContextVar(
    "kembench_active_counter", default=None
)


@contextmanager
def instrument(counter: CostCounter) -> Iterator[CostCounter]:
    """Route cost records of the enclosed forward passes to ``counter``."""
    if not counter.enabled:
        raise ContractError("instrumentation is disabled on this counter")
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _record_matmul(count: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.matmul_multiplies += count


def _record_softmax(count: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.softmax_entries += count


GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _op: str = "", copy: bool = True):
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[GradFn] = None
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def topological_order(self) -> List["Tensor"]:
        """Nodes reachable from this tensor, inputs before the nodes consuming them."""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() root was not produced by a recorded graph")

        order = self.topological_order()
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            for parent, grad in zip(node._parents, node._backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = grad if key not in pending else pending[key] + grad

        # the graph is single-use
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _wrap(data: np.ndarray, parents: Tuple[Tensor, ...], op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires_grad, _parents=parents if requires_grad else (),
                  _op=op, copy=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _wrap(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _wrap(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _wrap(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        out._backward = lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    return out


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = _wrap(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        out._backward = lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return out


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _wrap(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: (-g,)
    return out


def scale(a: TensorLike, factor: float) -> Tensor:
    """Multiply by a Python scalar (element-wise, never counted as a matmul)."""
    a = as_tensor(a)
    factor = float(factor)
    out = _wrap(a.data * factor, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: (g * factor,)
    return out


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """``c[..., i, j] = sum_k a[..., i, k] * b[..., k, j]``, summed left to right over k.

    Leading dimensions broadcast; a 2-D operand is shared across the batch.
    Records ``batch * p * q * r`` multiplies on the active counter.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None

    p, q = a.shape[-2], a.shape[-1]
    r = b.shape[-1]
    data = np.zeros(batch + (p, r), dtype=np.float64)
    for k in range(q):
        data += a.data[..., :, k:k + 1] * b.data[..., k:k + 1, :]
    _record_matmul(math.prod(batch) * p * q * r)

    out = _wrap(data, (a, b), "matmul")
    if out.requires_grad:
        def _backward(g: np.ndarray):
            grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)
        out._backward = _backward
    return out


def transpose(a: TensorLike) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dimensions, got {a.shape}")
    out = _wrap(np.swapaxes(a.data, -1, -2).copy(), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: (np.swapaxes(g, -1, -2),)
    return out


def permute(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = _wrap(np.transpose(a.data, axes).copy(), (a,), "permute")
    if out.requires_grad:
        out._backward = lambda g: (np.transpose(g, inverse),)
    return out


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    out = _wrap(data.copy(), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(a.shape),)
    return out


def tensor_sum(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64), (a,), "sum")
    if out.requires_grad:
        def _backward(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        out._backward = _backward
    return out


def mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: (g * out.data,)
    return out


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: (g / a.data,)
    return out


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: (g * (1.0 - out.data * out.data),)
    return out


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: (g * (a.data > 0.0),)
    return out


def _softmax_backward(y: np.ndarray) -> GradFn:
    return lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax_rows(x: TensorLike) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    _record_softmax(x.size)
    out = _wrap(y, (x,), "softmax")
    if out.requires_grad:
        out._backward = _softmax_backward(y)
    return out


def masked_softmax(x: TensorLike, mask: np.ndarray) -> Tensor:
    """Softmax over the entries where ``mask`` is True; the rest are exactly 0.

    ``mask`` is a constant: gradients reach only the unmasked entries. With an
    all-True mask this is bitwise identical to ``softmax_rows``.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("every row needs at least one selected entry")
    row_max = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.where(mask, x.data - row_max, -np.inf))
    y = e / e.sum(axis=-1, keepdims=True)
    _record_softmax(x.size)
    out = _wrap(y, (x,), "masked_softmax")
    if out.requires_grad:
        out._backward = _softmax_backward(y)
    return out


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shapes {[p.shape for p in parts]} along axis {axis}") from None
    out = _wrap(data, tuple(parts), "concat")
    if out.requires_grad:
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
        out._backward = lambda g: tuple(np.split(g, bounds, axis=axis))
    return out


def index_select(a: TensorLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = _wrap(np.take(a.data, indices, axis=axis), (a,), "index_select")
    if out.requires_grad:
        def _backward(g: np.ndarray):
            full = np.zeros_like(a.data)
            np.add.at(full, (slice(None),) * axis + (indices,), g)
            return (full,)
        out._backward = _backward
    return out


def cross_entropy(logits: TensorLike, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (N, C) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    n, classes = logits.shape
    if n == 0:
        raise ContractError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f"labels must lie in [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    out = _wrap(np.asarray(-log_probs[rows, labels].mean()), (logits,), "cross_entropy")
    if out.requires_grad:
        def _backward(g: np.ndarray):
            grad = np.exp(log_probs)
            grad[rows, labels] -= 1.0
            return (grad * (g / n),)
        out._backward = _backward
    return out


def mse_loss(pred: TensorLike, target: TensorLike) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))
