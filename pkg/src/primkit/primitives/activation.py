from __future__ import annotations

import enum

import numpy as np

from ..tensor import as_array, wrap_like


class ActivationMode(enum.Enum):
    PASSTHRU = "passthru"
    RELU = "relu"
    LEAKY_RELU = "leakyrelu"
    SIGMOID = "sigmoid"
    TANH = "tanh"

    @classmethod
    def parse(cls, text: str) -> "ActivationMode":
        key = text.lower().replace("_", "").replace("-", "")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown activation {text!r}")


DEFAULT_LEAKY_ALPHA = 0.01


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply(mode: ActivationMode, x: np.ndarray, alpha: float = DEFAULT_LEAKY_ALPHA, out: np.ndarray | None = None) -> np.ndarray:
    """Raw-array activation; ``out`` may alias ``x`` for in-place use."""
    if out is None:
        out = np.empty_like(x)
    if mode is ActivationMode.PASSTHRU:
        out[...] = x
    elif mode is ActivationMode.RELU:
        np.maximum(x, 0, out=out)
    elif mode is ActivationMode.LEAKY_RELU:
        np.multiply(x, np.where(x > 0, 1.0, alpha).astype(x.dtype), out=out)
    elif mode is ActivationMode.SIGMOID:
        out[...] = sigmoid(x)
    else:
        np.tanh(x, out=out)
    return out


def activation_forward(mode: ActivationMode, x, alpha: float = DEFAULT_LEAKY_ALPHA):
    if mode is ActivationMode.LEAKY_RELU and alpha < 0:
        raise ValueError("LeakyReLU alpha must be non-negative")
    return wrap_like(apply(mode, as_array(x), alpha), x)


def activation_backward(mode: ActivationMode, x, dy, alpha: float = DEFAULT_LEAKY_ALPHA):
    """Pointwise derivative at ``x`` times ``dy``; the ReLU derivative at 0 is 0."""
    X = as_array(x)
    dY = as_array(dy)
    if mode is ActivationMode.PASSTHRU:
        dx = dY.copy()
    elif mode is ActivationMode.RELU:
        dx = np.where(X > 0, dY, 0).astype(dY.dtype)
    elif mode is ActivationMode.LEAKY_RELU:
        dx = np.where(X > 0, dY, alpha * dY).astype(dY.dtype)
    elif mode is ActivationMode.SIGMOID:
        s = sigmoid(X)
        dx = dY * s * (1 - s)
    else:
        t = np.tanh(X)
        dx = dY * (1 - t * t)
    return wrap_like(dx, x, dy)
