import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from prunetape.constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from prunetape.exceptions import NonFiniteGradientError
from prunetape.schemas import LrSchedule, OptimizerKind, Projection, TrainConfig
from prunetape.tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the shared step counter."""

    kind: OptimizerKind = OptimizerKind.ADAM
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def project(values: np.ndarray, projection: Projection) -> np.ndarray:
    if projection == Projection.NONNEGATIVE:
        return np.maximum(values, 0.0)
    if projection == Projection.UNIT_INTERVAL:
        return np.clip(values, 0.0, 1.0)
    return values


def learning_rate(step: int, config: TrainConfig) -> float:
    """Constant, or cosine decay from `lr` to 0 over the whole run."""
    if config.lr_schedule == LrSchedule.CONSTANT:
        return config.lr
    progress = min(step / max(config.total_steps, 1), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_projected(
    params: Sequence[Parameter],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    frozen: Optional[Sequence[str]] = None,
) -> OptimizerState:
    """
    One optimizer step on `params` using their `.grad`, then projection of every
    mask back onto its feasible set.

    All gradients are checked before anything is written, so a non-finite
    gradient leaves every parameter and the state untouched. Weight decay is
    added to the gradient of non-mask parameters only. Parameters named in
    `frozen` are skipped.

    Weights and masks travel together in `params`; a mask is any parameter whose
    `projection` is not NONE. Gradients are read from each parameter's `.grad`.
    From the TrainConfig only `lr` (already scheduled) and `weight_decay` are used,
    and the optimizer kind lives in `state`. Parameters are updated in place and
    the state is returned.
    """
    frozen_names = set(frozen or ())
    active = [p for p in params if p.grad is not None and p.name not in frozen_names]
    for p in active:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name or "<unnamed>")

    state.step += 1
    if state.kind == OptimizerKind.ADAM:
        bc1 = 1.0 - state.beta1**state.step
        bc2 = 1.0 - state.beta2**state.step

    for p in active:
        g = p.grad
        if weight_decay and not p.is_mask:
            g = g + weight_decay * p.data

        if state.kind == OptimizerKind.SGD:
            update = lr * g
        else:
            m = state.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                state.v[p.name] = np.zeros_like(p.data)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * state.v[p.name] + (1.0 - state.beta2) * (g * g)
            state.m[p.name], state.v[p.name] = m, v
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)

        p.data = project(p.data - update, p.projection)
    return state
