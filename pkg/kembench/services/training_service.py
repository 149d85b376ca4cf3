"""Weighted multi-task loss, AdamW with a polynomial schedule, and the training loop."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from kembench.exceptions import ContractError, DimensionError, OptimizerError
from kembench.models import TaskLossSpec
from kembench.utils.autodiff import Tensor, add, cross_entropy, mse_loss, scale

logger = logging.getLogger(__name__)

Loss = Union[Tensor, float]


def mtl_loss(per_task_losses: Sequence[Loss], weights: Sequence[float]) -> Loss:
    """Sum of alpha_i * L_i; differentiable when the per-task losses are tensors."""
    if len(per_task_losses) != len(weights):
        raise ContractError(f"{len(per_task_losses)} task losses but {len(weights)} weights")
    if not per_task_losses:
        raise ContractError("mtl_loss needs at least one task")
    if any(w <= 0 for w in weights):
        raise ContractError(f"task loss weights must be strictly positive, got {list(weights)}")

    if not any(isinstance(loss, Tensor) for loss in per_task_losses):
        return float(sum(w * float(loss) for loss, w in zip(per_task_losses, weights)))
    total: Optional[Tensor] = None
    for loss, weight in zip(per_task_losses, weights):
        term = scale(loss, weight)
        total = term if total is None else add(total, term)
    return total


LOSS_FUNCTIONS: Dict[str, Callable[..., Tensor]] = {
    "cross-entropy": cross_entropy,
    "mean-squared-error": mse_loss,
}


def task_loss_terms(losses: TaskLossSpec, outputs: Sequence[Tensor], targets: Sequence) -> List[Tensor]:
    """Per-task losses L_i, each of the kind ``losses`` names for its task."""
    if not len(outputs) == len(targets) == len(losses.kinds):
        raise ContractError(f"{len(losses.kinds)} task losses specified for {len(outputs)} outputs "
                            f"and {len(targets)} targets")
    return [LOSS_FUNCTIONS[kind](output, target) for kind, output, target in zip(losses.kinds, outputs, targets)]


def weighted_task_loss(losses: TaskLossSpec, outputs: Sequence[Tensor],
                       targets: Sequence) -> Tuple[Tensor, List[float]]:
    """Weighted total of ``task_loss_terms`` plus the unweighted per-task values."""
    terms = task_loss_terms(losses, outputs, targets)
    return mtl_loss(terms, losses.weights), [term.item() for term in terms]


def static_weights(weights: Sequence[float], step: int, losses: Sequence[float]) -> List[float]:
    """Default loss-weight policy: the configured weights, unchanged."""
    return list(weights)


WeightPolicy = Callable[[Sequence[float], int, Sequence[float]], List[float]]


def poly_lr(step: int, total: int, lr0: float, power: float = config.POLY_POWER) -> float:
    """lr0 * (1 - step/total)^power, and 0 past the end of the schedule."""
    if total <= 0:
        raise ContractError(f"schedule length must be positive, got {total}")
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if step >= total:
        return 0.0
    return lr0 * (1.0 - step / total) ** power


@dataclass
class OptimizerState:
    lr0: float
    weight_decay: float = config.WEIGHT_DECAY
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    power: float = config.POLY_POWER
    total_steps: Optional[int] = None
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self) -> float:
        if self.total_steps is None:
            return self.lr0
        return poly_lr(self.step, self.total_steps, self.lr0, self.power)


def optimizer_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
                   state: OptimizerState) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """One decoupled-weight-decay Adam update, applied in place.

    The whole step is rejected, leaving parameters and state untouched, if any
    gradient is non-finite.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(f"gradient of {name} has shape {grad.shape}, parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            logger.error(f"Rejecting optimizer step {state.step}: non-finite gradient for {name}")
            raise OptimizerError(f"non-finite gradient for parameter {name}")

    lr = state.learning_rate()
    t = state.step + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.first_moment.setdefault(name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps) + state.weight_decay * param.data
        param.data -= lr * update
    state.step = t
    return params, state


class AdamW:
    """Optimizer over a named parameter dict, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Dict[str, Tensor], lr: float, total_steps: Optional[int] = None,
                 weight_decay: float = config.WEIGHT_DECAY, beta1: float = config.ADAM_BETA1,
                 beta2: float = config.ADAM_BETA2, eps: float = config.ADAM_EPS,
                 power: float = config.POLY_POWER):
        self.params = params
        self.state = OptimizerState(lr0=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
                                    power=power, total_steps=total_steps)

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        optimizer_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()


StepFn = Callable[[int, List[float]], Tuple[Tensor, List[float]]]


def train(step_fn: StepFn, optimizer: AdamW, steps: int, steps_per_epoch: int, weights: Sequence[float],
          policy: WeightPolicy = static_weights, label: str = "run") -> List[float]:
    """Run ``steps`` optimizer steps; returns the mean loss of every epoch.

    ``step_fn(step, weights)`` builds the weighted loss of one batch and
    returns it with the unweighted per-task losses, which feed ``policy``.
    """
    epoch_losses: List[float] = []
    running: List[float] = []
    current = list(weights)
    for step in range(steps):
        optimizer.zero_grad()
        loss, task_losses = step_fn(step, current)
        loss.backward()
        optimizer.step()
        running.append(loss.item())
        current = policy(weights, step, task_losses)
        if len(running) == steps_per_epoch or step == steps - 1:
            epoch_losses.append(float(np.mean(running)))
            logger.info(f"[{label}] epoch {len(epoch_losses)} loss {epoch_losses[-1]:.4f}")
            running = []
    return epoch_losses
