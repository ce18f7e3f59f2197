"""Batch normalization in per-activation and spatial modes.

Per-activation statistics run over the batch axis for every (c, h, w);
spatial statistics run over (batch, h, w) for every channel. Variance is
the biased (divide-by-count) estimate.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidEpsilon, ShapeMismatch
from ..tensor import as_array, wrap_like


class BatchNormMode(enum.Enum):
    PER_ACTIVATION = "per_activation"
    SPATIAL = "spatial"

    @property
    def axes(self) -> tuple[int, ...]:
        return (0,) if self is BatchNormMode.PER_ACTIVATION else (0, 2, 3)

    def param_shape(self, x_shape: tuple[int, ...]) -> tuple[int, ...]:
        _, c, h, w = x_shape
        return (1, c, h, w) if self is BatchNormMode.PER_ACTIVATION else (1, c, 1, 1)


@dataclass
class BatchNormParams:
    """γ/β plus running statistics, all shaped like ``mode.param_shape``.

    ``batchnorm_forward_train`` replaces ``running_mean``/``running_var``
    with their momentum-updated values.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        self.gamma = as_array(self.gamma)
        self.beta = as_array(self.beta)
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma)
        if self.running_var is None:
            self.running_var = np.ones_like(self.gamma)
        self.running_mean = as_array(self.running_mean)
        self.running_var = as_array(self.running_var)
        if not self.epsilon > 0:
            raise InvalidEpsilon(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")

    @classmethod
    def identity(cls, mode: BatchNormMode, x_shape, dtype=np.float32, **kwargs) -> "BatchNormParams":
        shape = mode.param_shape(tuple(x_shape))
        return cls(np.ones(shape, dtype), np.zeros(shape, dtype), **kwargs)


def _check(mode: BatchNormMode, x: np.ndarray, p: BatchNormParams) -> None:
    if x.ndim != 4:
        raise ShapeMismatch(f"batch norm expects NCHW input, got shape {x.shape}")
    want = mode.param_shape(x.shape)
    for name in ("gamma", "beta", "running_mean", "running_var"):
        got = getattr(p, name).shape
        if got != want:
            raise ShapeMismatch(f"{name} has shape {got}, {mode.value} mode needs {want}")


def _normalize(x, mean, var, gamma, beta, eps):
    return gamma * ((x - mean) / np.sqrt(var + eps)) + beta


def batchnorm_forward_train(mode: BatchNormMode, x, p: BatchNormParams):
    """Returns ``(y, saved_mean, saved_invstd)`` and updates the running statistics."""
    X = as_array(x)
    _check(mode, X, p)
    dtype = np.result_type(X.dtype, p.gamma.dtype)
    mean = X.mean(axis=mode.axes, keepdims=True, dtype=dtype)
    var = ((X - mean) ** 2).mean(axis=mode.axes, keepdims=True, dtype=dtype)
    eps = dtype.type(p.epsilon)
    y = _normalize(X, mean, var, p.gamma, p.beta, eps)
    m = p.momentum
    p.running_mean = ((1 - m) * p.running_mean + m * mean).astype(p.running_mean.dtype)
    p.running_var = ((1 - m) * p.running_var + m * var).astype(p.running_var.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    return wrap_like(y.astype(dtype, copy=False), x), mean, invstd


def batchnorm_forward_infer(mode: BatchNormMode, x, p: BatchNormParams):
    X = as_array(x)
    _check(mode, X, p)
    dtype = np.result_type(X.dtype, p.gamma.dtype)
    y = _normalize(X, p.running_mean, p.running_var, p.gamma, p.beta, dtype.type(p.epsilon))
    return wrap_like(y.astype(dtype, copy=False), x)


def batchnorm_backward(mode: BatchNormMode, x, dy, p: BatchNormParams, saved_mean, saved_invstd):
    """Analytic ``(dx, dgamma, dbeta)`` of the training-mode forward map."""
    X = as_array(x)
    dY = as_array(dy)
    _check(mode, X, p)
    if dY.shape != X.shape:
        raise ShapeMismatch(f"dy shape {dY.shape} differs from x shape {X.shape}")
    axes = mode.axes
    count = int(np.prod([X.shape[a] for a in axes]))
    xhat = (X - saved_mean) * saved_invstd
    dbeta = dY.sum(axis=axes, keepdims=True)
    dgamma = (dY * xhat).sum(axis=axes, keepdims=True)
    dxhat = dY * p.gamma
    dx = (saved_invstd / count) * (
        count * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return wrap_like(dx.astype(dY.dtype, copy=False), x, dy), dgamma, dbeta
