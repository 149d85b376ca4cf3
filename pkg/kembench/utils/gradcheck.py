"""Central finite-difference oracle for analytic gradients."""
import logging
from typing import Callable, Dict, Optional

import numpy as np

import config
from kembench.exceptions import ContractError, OracleError
from kembench.models import GradcheckResult
from kembench.utils.autodiff import Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = config.GRADCHECK_STEP
DEFAULT_RTOL = config.GRADCHECK_RTOL
DEFAULT_ATOL = config.GRADCHECK_ATOL
RELATIVE_FLOOR = 1e-8


def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    value = f(Tensor(data))
    value = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if value.size != 1:
        raise ContractError(f"gradient oracle needs a scalar-valued function, got shape {value.shape}")
    scalar = float(value.reshape(-1)[0])
    if not np.isfinite(scalar):
        raise OracleError(f"function evaluated to {scalar} during finite differencing")
    return scalar


def _compare(analytic: np.ndarray, numeric: np.ndarray, name: str, rtol: float, atol: float) -> GradcheckResult:
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    rel_err = abs_err / denom
    # coordinates inside the absolute floor count as exact
    rel_err = np.where(abs_err <= atol, 0.0, rel_err)
    worst = int(np.argmax(rel_err)) if rel_err.size else 0
    max_rel = float(rel_err.reshape(-1)[worst]) if rel_err.size else 0.0
    return GradcheckResult(
        name=name,
        passed=bool(max_rel <= rtol),
        max_relative_error=max_rel,
        max_absolute_error=float(abs_err.max()) if abs_err.size else 0.0,
        worst_index=worst,
        coordinates=int(analytic.size),
        rtol=rtol,
        atol=atol,
    )


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = DEFAULT_STEP,
                      rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                      name: str = "f") -> GradcheckResult:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences."""
    base = np.array(x.data, dtype=np.float64)
    point = Tensor(base, requires_grad=True)
    root = f(point)
    if not isinstance(root, Tensor):
        raise ContractError("gradient oracle needs f to return a Tensor")
    if root.requires_grad:
        root.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += step
        upper = _evaluate(f, shifted.reshape(base.shape))
        shifted[i] -= 2.0 * step
        lower = _evaluate(f, shifted.reshape(base.shape))
        flat[i] = (upper - lower) / (2.0 * step)

    result = _compare(analytic, numeric, name, rtol, atol)
    if not result.passed:
        logger.warning(f"gradcheck {name}: max relative error {result.max_relative_error:.3e} "
                       f"at coordinate {result.worst_index}")
    return result


def check_parameters(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], step: float = DEFAULT_STEP,
                     rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                     prefix: Optional[str] = None) -> Dict[str, GradcheckResult]:
    """Run the oracle on every named parameter of a model in place.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values;
    each parameter's data is perturbed coordinate by coordinate and restored.
    """
    for tensor in params.values():
        tensor.zero_grad()
    root = loss_fn()
    root.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    results: Dict[str, GradcheckResult] = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = _evaluate(lambda _: loss_fn(), tensor.data)
            flat[i] = original - step
            lower = _evaluate(lambda _: loss_fn(), tensor.data)
            flat[i] = original
            numeric[i] = (upper - lower) / (2.0 * step)
        label = f"{prefix}.{name}" if prefix else name
        results[label] = _compare(analytic[name], numeric.reshape(tensor.shape), label, rtol, atol)
        if not results[label].passed:
            logger.warning(f"gradcheck {label}: max relative error {results[label].max_relative_error:.3e}")
    for tensor in params.values():
        tensor.zero_grad()
    return results
