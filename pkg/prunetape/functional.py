import logging
from typing import Optional

import numpy as np

from prunetape.constants import NORM_EPS_DEFAULT
from prunetape.exceptions import BatchSizeError, LabelRangeError, ShapeMismatchError
from prunetape.schemas import NormKind
from prunetape.tensor import Function, Parameter, Tensor, wrap

logger = logging.getLogger(__name__)


class Normalize(Function):
    """
    Standardize along `axis` then apply a per-feature affine map.

    axis=0 is batch normalization (statistics per feature over the batch),
    axis=1 is layer normalization (statistics per sample over the features).
    Variance is the biased (population) estimate.
    """

    op_name = "normalize"

    def forward(self, x, gamma, beta, eps: float = NORM_EPS_DEFAULT, axis: int = 0):
        if x.ndim != 2:
            raise ShapeMismatchError(f"Normalization expects (batch, features), got {x.shape}")
        if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeMismatchError(
                f"Scale/shift shapes {gamma.shape}/{beta.shape} do not match features of {x.shape}"
            )
        self.axis = axis
        self.gamma = gamma
        self.mean = x.mean(axis=axis, keepdims=True)
        centered = x - self.mean
        self.var = (centered * centered).mean(axis=axis, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(self.var + eps)
        self.x_hat = centered * self.inv_std
        return self.x_hat * gamma + beta

    def backward(self, grad):
        axis = self.axis
        n = self.x_hat.shape[axis]
        g_hat = grad * self.gamma
        dx = (self.inv_std / n) * (
            n * g_hat
            - g_hat.sum(axis=axis, keepdims=True)
            - self.x_hat * (g_hat * self.x_hat).sum(axis=axis, keepdims=True)
        )
        return dx, (grad * self.x_hat).sum(axis=0), grad.sum(axis=0)


class NormStats:
    """
    Learnable scale/shift of one normalization site plus the statistics
    of the most recent batch it saw.
    """

    def __init__(self, features: int, kind: NormKind = NormKind.BATCH, eps: float = NORM_EPS_DEFAULT, name: str = "norm"):
        if kind == NormKind.NONE:
            raise ValueError("NormStats requires a batch or layer normalization kind")
        if not eps > 0:
            raise ValueError(f"Normalization epsilon must be > 0, got {eps}")
        self.kind = kind
        self.eps = eps
        self.features = features
        self.scale = Parameter(np.ones(features), name=f"{name}.scale")
        self.shift = Parameter(np.zeros(features), name=f"{name}.shift")
        self.batch_mean: Optional[np.ndarray] = None
        self.batch_var: Optional[np.ndarray] = None

    def parameters(self):
        return [self.scale, self.shift]

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == NormKind.BATCH:
            return batchnorm_train(x, self)
        return layernorm(x, self)


def _normalize(x: Tensor, stats: NormStats, axis: int) -> Tensor:
    stats.batch_mean = x.data.mean(axis=axis)
    stats.batch_var = x.data.var(axis=axis)
    return Normalize.apply(x, stats.scale, stats.shift, eps=stats.eps, axis=axis)


def batchnorm_train(x: Tensor, stats: NormStats) -> Tensor:
    """Batch normalization with the statistics of the current batch."""
    if x.ndim != 2 or x.shape[0] < 2:
        raise BatchSizeError(f"Batch normalization needs a batch of at least 2 samples, got shape {x.shape}")
    return _normalize(x, stats, axis=0)


def layernorm(x: Tensor, stats: NormStats) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 2:
        raise BatchSizeError(f"Layer normalization needs at least 2 features, got shape {x.shape}")
    return _normalize(x, stats, axis=1)


class SoftmaxCrossEntropy(Function):
    """Mean negative log-likelihood of integer labels, stabilized by max-subtraction."""

    op_name = "softmax_cross_entropy"

    def forward(self, logits, labels: Optional[np.ndarray] = None):
        batch = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.labels = labels
        return np.asarray(-log_probs[np.arange(batch), labels].mean())

    def backward(self, grad):
        batch = self.probs.shape[0]
        dlogits = self.probs.copy()
        dlogits[np.arange(batch), self.labels] -= 1.0
        return (grad * dlogits / batch,)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"Logits must be (batch, classes), got {logits.shape}")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(f"Got {labels.shape[0]} labels for logits of shape {logits.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelRangeError(f"Labels must lie in [0, {classes - 1}], got range [{labels.min()}, {labels.max()}]")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


class LogSoftmax(Function):
    op_name = "log_softmax"

    def forward(self, logits):
        shifted = logits - logits.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=-1, keepdims=True),)


def log_softmax(logits: Tensor) -> Tensor:
    return LogSoftmax.apply(logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def mse_loss(predictions: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.size != targets.size:
        raise ShapeMismatchError(f"Cannot compare predictions {predictions.shape} with targets {targets.shape}")
    diff = predictions.reshape(targets.size) - targets
    return (diff * diff).mean()


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    whole = np.trunc(values)
    frac = values - whole
    return whole + np.sign(values) * (np.abs(frac) >= 0.5)


class RoundSTE(Function):
    """Rounding forward, identity backward (straight-through estimator)."""

    op_name = "round_ste"

    def forward(self, x):
        return round_half_away(x)

    def backward(self, grad):
        return (grad,)


def round_ste(x: Tensor) -> Tensor:
    return RoundSTE.apply(wrap(x))
