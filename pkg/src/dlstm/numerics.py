"""Dense float64 numerics: validated matrix products, activation functions with
derivatives, and seeded random initialization.

Everything operates on plain numpy arrays: matrices are 2-d row-major float64
arrays, vectors are 1-d float64 arrays. All public operations keep values
finite; softmax is stabilized by max subtraction.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear", "softmax")


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class NumericalError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix (or matrix-vector) product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    return a @ b


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by max subtraction.

    Raises NumericalError when a row's maximum is not finite (e.g. all -inf),
    since no probability vector is defined there.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericalError("softmax: degenerate input, row maximum is not finite")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Log of softmax over the last axis, same stabilization and guard."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericalError("log_softmax: degenerate input, row maximum is not finite")
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def apply_activation(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply an activation elementwise (softmax: over the last axis)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "linear":
        return x
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_derivative(kind: str, y_or_x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of an activation.

    For sigmoid and tanh the argument is the activation *output*; for relu it
    is the *pre-activation* (derivative at exactly 0 is taken as 0). Softmax
    has no standalone derivative here; it is differentiated jointly with
    cross-entropy in the output head.
    """
    v = np.asarray(y_or_x, dtype=np.float64)
    if kind == "sigmoid":
        return v * (1.0 - v)
    if kind == "tanh":
        return 1.0 - v * v
    if kind == "relu":
        return (v > 0.0).astype(np.float64)
    if kind == "linear":
        return np.ones_like(v)
    if kind == "softmax":
        raise ValueError("softmax derivative is handled jointly with cross-entropy")
    raise ValueError(f"unknown activation kind: {kind!r}")


def init_matrix(rows: int, cols: int, scheme, rng: np.random.Generator | None = None) -> np.ndarray:
    """Create a rows x cols matrix.

    scheme is either the string "zeros" or a tuple ("uniform", r) for i.i.d.
    uniform entries on [-r, r]. Uniform init requires an rng; identical seeds
    produce bit-identical matrices.
    """
    return _init((rows, cols), scheme, rng)


def init_vector(length: int, scheme, rng: np.random.Generator | None = None) -> np.ndarray:
    """Create a length-n vector; same schemes as init_matrix."""
    return _init((length,), scheme, rng)


def _init(shape, scheme, rng):
    if scheme == "zeros":
        return np.zeros(shape, dtype=np.float64)
    try:
        kind, radius = scheme
    except (TypeError, ValueError):
        raise ValueError(f"unknown init scheme: {scheme!r}") from None
    if kind != "uniform":
        raise ValueError(f"unknown init scheme: {scheme!r}")
    if radius <= 0:
        raise ValueError(f"uniform init needs a positive radius, got {radius}")
    if rng is None:
        raise ValueError("uniform init needs an rng")
    return rng.uniform(-radius, radius, size=shape)


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {what}")
