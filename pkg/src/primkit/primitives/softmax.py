from __future__ import annotations

import numpy as np

from ..errors import InvalidAxis
from ..tensor import as_array, wrap_like


def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} is out of range for {ndim}-D input")
    return axis % ndim


def softmax_forward(x, axis: int = -1):
    """Softmax along ``axis`` with the row maximum subtracted first."""
    X = as_array(x)
    ax = _axis(X.ndim, axis)
    shifted = X - X.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    return wrap_like(e / e.sum(axis=ax, keepdims=True), x)


def softmax_backward(y, dy, axis: int = -1):
    """``y * (dy - <dy, y>)`` along ``axis``."""
    Y = as_array(y)
    dY = as_array(dy)
    ax = _axis(Y.ndim, axis)
    dot = (dY * Y).sum(axis=ax, keepdims=True)
    return wrap_like(Y * (dY - dot), y, dy)
