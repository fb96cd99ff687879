"""Source-regularized loss, the power-curve schedule for its strength, the
training-length rule and batch-norm freezing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet, softmax_cross_entropy
from .tempcnn import TempCNNModel, is_running_stat


def compute_k(t_min: float, t_max: float, lambda_tmin: float, lambda_tmax: float) -> float:
    """Slope of the schedule line in log-log space."""
    if not t_max > t_min >= 1:
        raise ValueError(f"need t_max > t_min >= 1, got t_min={t_min}, t_max={t_max}")
    if not lambda_tmin > lambda_tmax > 0:
        raise ValueError(f"need lambda_tmin > lambda_tmax > 0, got {lambda_tmin}, {lambda_tmax}")
    return (math.log(lambda_tmax) - math.log(lambda_tmin)) / (math.log(t_max) - math.log(t_min))


@dataclass(frozen=True)
class LambdaSchedule:
    """lambda(n_t) = lambda_tmin * (n_t / t_min) ** k, a straight line through
    (t_min, lambda_tmin) and (t_max, lambda_tmax) on log-log axes."""

    t_max: float = 1e6
    t_min: float = 1.0
    lambda_tmin: float = 1e10
    lambda_tmax: float = 1e-10
    k: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "k", compute_k(self.t_min, self.t_max, self.lambda_tmin, self.lambda_tmax))


def lambda_for(n_t: int, schedule: LambdaSchedule = LambdaSchedule()) -> float:
    if n_t < 1:
        raise ValueError("lambda_for: n_t must be >= 1 (skip adaptation when there is no target data)")
    s = schedule
    # the anchors are returned verbatim; elsewhere evaluate in log space
    if n_t == s.t_min:
        return float(s.lambda_tmin)
    if n_t == s.t_max:
        return float(s.lambda_tmax)
    return math.exp(math.log(s.lambda_tmin) + s.k * (math.log(n_t) - math.log(s.t_min)))


@dataclass(frozen=True)
class TrainBudget:
    grad_updates: int = 5000
    batch_size: int = 32


def epochs_for(n_t: int, budget: TrainBudget = TrainBudget()) -> int:
    """max(1, ceil(updates * batch / n_t)): enough epochs to reach the update
    budget, never less than one full pass."""
    if n_t <= 0:
        raise ValueError("epochs_for: n_t must be positive")
    return max(1, -(-budget.grad_updates * budget.batch_size // n_t))


def regularized_names(params: ParamSet) -> list[str]:
    """Every learnable tensor; running statistics are excluded."""
    return [n for n in params.names() if params.is_trainable(n) and not is_running_stat(n)]


def _check_aligned(params: ParamSet, reference: ParamSet, names) -> None:
    for n in names:
        if n not in reference:
            raise ValueError(f"reference parameters lack {n!r}")
        if reference[n].shape != params[n].shape:
            raise ValueError(f"parameter {n!r}: shape {params[n].shape} != reference {reference[n].shape}")


def penalty(params: ParamSet, reference: ParamSet, names) -> float:
    """||theta - theta_ref||^2 over ``names``, accumulated in float64."""
    _check_aligned(params, reference, names)
    total = 0.0
    for n in names:
        d = params[n].astype(np.float64) - reference[n].astype(np.float64)
        total += float(np.dot(d.ravel(), d.ravel()))
    return total


def penalty_grads(params: ParamSet, reference: ParamSet, names, lam: float) -> dict[str, np.ndarray]:
    return {n: 2.0 * lam * (params[n].astype(np.float64) - reference[n].astype(np.float64)) for n in names}


def add_penalty_grads(grads: dict, params: ParamSet, reference: ParamSet, names, lam: float) -> None:
    if lam == 0.0:
        return
    for n, g in penalty_grads(params, reference, names, lam).items():
        grads[n] = grads[n] + g if n in grads else g


def source_reg_loss(logits, labels, params: ParamSet, reference: ParamSet, lam: float,
                    names=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus lam * ||theta - theta_ref||^2.

    Returns ``(loss, probs)``; the parameter-side gradient is
    :func:`penalty_grads`.
    """
    if lam < 0:
        raise ValueError("source_reg_loss: lambda must be non-negative")
    names = regularized_names(params) if names is None else names
    _check_aligned(params, reference, names)
    ce, probs = softmax_cross_entropy(logits, labels)
    if lam == 0.0:
        return ce, probs
    return ce + lam * penalty(params, reference, names), probs


def freeze_bn(model: TempCNNModel) -> TempCNNModel:
    """Normalise with the stored running statistics from now on (gamma and
    beta stay trainable).  Idempotent; mutates and returns ``model``."""
    if not any(is_running_stat(n) for n in model.params):
        raise ValueError("freeze_bn: model has no batch-norm layers")
    model.bn_frozen = True
    return model
