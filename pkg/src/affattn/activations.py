"""Scalar nonlinearities for gates, scale factors, and the MLP.

Each activation exists in two forms: a plain numpy function pair
(value + derivative) and a taped tensor op built from that pair. The
linear-clipping function maps (-inf, -5] to 0, [5, inf) to 1, and is
0.1*x + 0.5 in between; its subgradient at exactly +-5 is taken from
the flat side, so fully saturated scales stop receiving gradient.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .numerics import Tensor, record

__all__ = [
    "ActivationKind",
    "sigmoid",
    "linear_clipping",
    "gelu",
    "sigmoid_value",
    "sigmoid_deriv",
    "linear_clipping_value",
    "linear_clipping_deriv",
    "gelu_value",
    "gelu_deriv",
    "apply_activation",
]


class ActivationKind(Enum):
    SIGMOID = "sigmoid"
    LINEAR_CLIPPING = "linear_clipping"
    GELU = "gelu"


def sigmoid_value(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_deriv(x):
    s = sigmoid_value(x)
    return s * (1.0 - s)


def linear_clipping_value(x):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(0.1 * x + 0.5, 0.0, 1.0)


def linear_clipping_deriv(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where((x > -5.0) & (x < 5.0), 0.1, 0.0)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_value(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_deriv(x):
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)


def _unary(value_fn, deriv_fn, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = Tensor(value_fn(x.data))
    return record(out, (x,), lambda g: (g * deriv_fn(x.data),))


def sigmoid(x) -> Tensor:
    """Elementwise 1 / (1 + e^-x), range (0, 1)."""
    return _unary(sigmoid_value, sigmoid_deriv, x)


def linear_clipping(x) -> Tensor:
    """Elementwise clip(0.1*x + 0.5, 0, 1); slope 0.1 strictly inside (-5, 5)."""
    return _unary(linear_clipping_value, linear_clipping_deriv, x)


def gelu(x) -> Tensor:
    """Tanh-approximation GELU."""
    return _unary(gelu_value, gelu_deriv, x)


_BY_KIND = {
    ActivationKind.SIGMOID: sigmoid,
    ActivationKind.LINEAR_CLIPPING: linear_clipping,
    ActivationKind.GELU: gelu,
}


def apply_activation(kind: ActivationKind, x) -> Tensor:
    return _BY_KIND[kind](x)
