"""Non-recurrent building blocks: affine+activation layers, the tanh reference
recurrent layer, and the softmax cross-entropy output head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    activation_derivative,
    apply_activation,
    init_matrix,
    init_vector,
    log_softmax,
    softmax,
)


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    act: str

    def __post_init__(self):
        if self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(f"dense layer: w {self.w.shape} does not match b {self.b.shape}")
        if self.act == "softmax":
            raise ValueError("softmax is only legal in the output head")


@dataclass
class DenseCache:
    layer: DenseLayer
    x: np.ndarray
    pre: np.ndarray
    y: np.ndarray


@dataclass
class RnnLayer:
    """Simple recurrent layer: h_t = tanh(w_xh x_t + w_hh h_prev + b_h)."""

    w_xh: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        if self.w_hh.shape[0] != self.w_hh.shape[1]:
            raise ShapeError(f"rnn layer: recurrent matrix {self.w_hh.shape} is not square")

    @property
    def n_units(self) -> int:
        return self.b_h.shape[0]


@dataclass
class RnnGrads:
    w_xh: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray


@dataclass
class SoftmaxOutput:
    w: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]


def init_dense(n_in: int, n_out: int, act: str, rng, weight_radius: float = 0.05) -> DenseLayer:
    return DenseLayer(
        w=init_matrix(n_out, n_in, ("uniform", weight_radius), rng),
        b=init_vector(n_out, "zeros"),
        act=act,
    )


def init_rnn(n_in: int, n_units: int, rng, weight_radius: float = 0.05) -> RnnLayer:
    scheme = ("uniform", weight_radius)
    return RnnLayer(
        w_xh=init_matrix(n_units, n_in, scheme, rng),
        w_hh=init_matrix(n_units, n_units, scheme, rng),
        b_h=init_vector(n_units, "zeros"),
    )


def init_softmax(n_in: int, n_classes: int, rng, weight_radius: float = 0.05) -> SoftmaxOutput:
    return SoftmaxOutput(
        w=init_matrix(n_classes, n_in, ("uniform", weight_radius), rng),
        b=init_vector(n_classes, "zeros"),
    )


def dense_forward(layer: DenseLayer, x: np.ndarray):
    """y = act(w @ x + b). Returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.w.shape[1],):
        raise ShapeError(f"dense forward: input {x.shape}, layer expects ({layer.w.shape[1]},)")
    pre = layer.w @ x + layer.b
    y = apply_activation(layer.act, pre)
    return y, DenseCache(layer=layer, x=x, pre=pre, y=y)


def dense_backward(cache: DenseCache, dy: np.ndarray):
    """Chain-rule gradients. Returns (dw, db, dx)."""
    layer = cache.layer
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.y.shape:
        raise ShapeError(f"dense backward: upstream {dy.shape}, output was {cache.y.shape}")
    if layer.act in ("sigmoid", "tanh"):
        dz = dy * activation_derivative(layer.act, cache.y)
    else:
        dz = dy * activation_derivative(layer.act, cache.pre)
    dw = np.outer(dz, cache.x)
    db = dz
    dx = layer.w.T @ dz
    return dw, db, dx


def rnn_sequence_forward(layer: RnnLayer, xs, h_0: np.ndarray | None = None):
    """Returns (hs, caches, h_T); caches hold (x_t, h_prev, h_t) per step."""
    if len(xs) == 0:
        raise ShapeError("rnn sequence: empty input")
    h = np.zeros(layer.n_units) if h_0 is None else np.asarray(h_0, dtype=np.float64)
    hs, caches = [], []
    for x in xs:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (layer.w_xh.shape[1],):
            raise ShapeError(f"rnn forward: input {x.shape}, expected ({layer.w_xh.shape[1]},)")
        h_prev = h
        h = np.tanh(layer.w_xh @ x + layer.w_hh @ h_prev + layer.b_h)
        hs.append(h)
        caches.append((x, h_prev, h))
    return hs, caches, h


def rnn_sequence_backward(layer: RnnLayer, caches, d_hs):
    """Returns (RnnGrads, d_xs, d_h0) for the summed upstream gradients."""
    if len(d_hs) != len(caches):
        raise ShapeError(f"rnn backward: {len(d_hs)} gradients for {len(caches)} steps")
    g = RnnGrads(
        w_xh=np.zeros_like(layer.w_xh),
        w_hh=np.zeros_like(layer.w_hh),
        b_h=np.zeros_like(layer.b_h),
    )
    d_xs: list[np.ndarray | None] = [None] * len(caches)
    d_rec = np.zeros(layer.n_units)
    for t in reversed(range(len(caches))):
        x, h_prev, h = caches[t]
        dh = np.asarray(d_hs[t], dtype=np.float64) + d_rec
        dz = dh * (1.0 - h * h)
        g.w_xh += np.outer(dz, x)
        g.w_hh += np.outer(dz, h_prev)
        g.b_h += dz
        d_xs[t] = layer.w_xh.T @ dz
        d_rec = layer.w_hh.T @ dz
    return g, d_xs, d_rec


def softmax_xent(head: SoftmaxOutput, h: np.ndarray, target: int):
    """Softmax cross-entropy for one frame.

    Returns (loss, probs, dh, dw, db) where the gradients are of the loss
    w.r.t. the head input and parameters.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (head.w.shape[1],):
        raise ShapeError(f"softmax head: input {h.shape}, expected ({head.w.shape[1]},)")
    if not 0 <= target < head.n_classes:
        raise ValueError(f"target {target} out of range for {head.n_classes} classes")
    logits = head.w @ h + head.b
    probs = softmax(logits)
    loss = -log_softmax(logits)[target]
    dlogits = probs.copy()
    dlogits[target] -= 1.0
    dw = np.outer(dlogits, h)
    db = dlogits
    dh = head.w.T @ dlogits
    return loss, probs, dh, dw, db
