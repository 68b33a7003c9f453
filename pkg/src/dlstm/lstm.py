"""Peephole LSTM memory-block layer with deep input/output projection variants
and exact backpropagation through time.

The step computes, in order: input gate, forget gate, cell input, cell state,
output gate, block output. Peephole weights are diagonal and stored as
vectors; the input and forget gates peek at the previous cell state, the
output gate peeks at the current one.

Two deepening variants of the recurrent transition are supported:

* input projection: a multi-layer transform replaces the cell-input
  activation; its first layer sees x_t and the recurrent input, deeper layers
  are feed-forward, and every layer must be non-linear.
* output projection: a stack of affine+activation layers (linear allowed) is
  applied to the block output; the projected vector is both the step output
  and the next step's recurrent input, so the recurrent weights have the
  projection width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    NumericalError,
    ShapeError,
    activation_derivative,
    apply_activation,
    init_matrix,
    init_vector,
)

NONLINEAR_ACTS = ("sigmoid", "tanh", "relu")
PROJECTION_ACTS = ("sigmoid", "tanh", "relu", "linear")


@dataclass
class ProjLayer:
    """One affine+activation layer inside a projection stack."""

    w: np.ndarray
    b: np.ndarray
    act: str


@dataclass
class InputProjection:
    """Deep transform replacing the cell-input activation.

    The first layer computes act(w_x @ x_t + w_h @ h_prev + b); inner layers
    are plain feed-forward. The final output must have n_cells entries and
    every activation must be non-linear.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    act: str = "tanh"
    inner: list[ProjLayer] = field(default_factory=list)

    def __post_init__(self):
        if self.act not in NONLINEAR_ACTS:
            raise ValueError(f"input projection needs a non-linear activation, got {self.act!r}")
        for layer in self.inner:
            if layer.act not in NONLINEAR_ACTS:
                raise ValueError(
                    f"input projection inner layers must be non-linear, got {layer.act!r}"
                )


@dataclass
class OutputProjection:
    """Projection stack applied to the block output h_t.

    The final layer's output is the step output and the recurrent input of
    the next step. Linear activations are allowed here.
    """

    layers: list[ProjLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("output projection needs at least one layer")
        for layer in self.layers:
            if layer.act not in PROJECTION_ACTS:
                raise ValueError(f"bad output projection activation {layer.act!r}")

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]


Variant = InputProjection | OutputProjection | None


@dataclass
class LstmParams:
    """All weights of one LSTM layer.

    Recurrent matrices are n_cells x n_rec where n_rec is n_cells for the
    plain and input-projection variants and the projection width when an
    output projection is attached. Peephole weights are length-n_cells
    vectors. w_xc/w_hc/b_c are None when an input projection supplies the
    cell-input path.
    """

    w_xi: np.ndarray
    w_hi: np.ndarray
    w_ci: np.ndarray
    b_i: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_cf: np.ndarray
    b_f: np.ndarray
    w_xc: np.ndarray | None
    w_hc: np.ndarray | None
    b_c: np.ndarray | None
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_co: np.ndarray
    b_o: np.ndarray
    cell_act: str = "tanh"
    state_act: str = "tanh"

    @property
    def n_cells(self) -> int:
        return self.b_i.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.w_xi.shape[1]

    @property
    def n_rec(self) -> int:
        return self.w_hi.shape[1]


@dataclass
class LstmStepCache:
    """Per-step activations needed by the backward pass."""

    x: np.ndarray
    h_in: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    za: np.ndarray | None
    a: np.ndarray
    c: np.ndarray
    tc: np.ndarray
    o: np.ndarray
    h: np.ndarray
    out: np.ndarray
    ip_pre: list[np.ndarray] | None = None
    ip_out: list[np.ndarray] | None = None
    op_pre: list[np.ndarray] | None = None
    op_out: list[np.ndarray] | None = None


@dataclass
class LstmGrads:
    """Gradients shaped like LstmParams plus the active variant's stacks."""

    params: LstmParams
    variant: Variant = None


def init_lstm_params(
    n_inputs: int,
    n_cells: int,
    rng: np.random.Generator,
    n_rec: int | None = None,
    weight_radius: float = 0.05,
    forget_bias: float = 1.0,
    cell_input: bool = True,
) -> LstmParams:
    """Initialize a layer: uniform weights, zero peepholes, positive forget bias.

    The positive forget bias keeps the carry path open early in training.
    Pass cell_input=False when an input projection will supply the cell-input
    path (w_xc/w_hc/b_c are then None).
    """
    if n_rec is None:
        n_rec = n_cells
    scheme = ("uniform", weight_radius)

    def mat(rows, cols):
        return init_matrix(rows, cols, scheme, rng)

    w_xi, w_hi = mat(n_cells, n_inputs), mat(n_cells, n_rec)
    w_xf, w_hf = mat(n_cells, n_inputs), mat(n_cells, n_rec)
    if cell_input:
        w_xc, w_hc = mat(n_cells, n_inputs), mat(n_cells, n_rec)
        b_c = init_vector(n_cells, "zeros")
    else:
        w_xc = w_hc = b_c = None
    w_xo, w_ho = mat(n_cells, n_inputs), mat(n_cells, n_rec)
    zeros = lambda: init_vector(n_cells, "zeros")
    b_f = zeros()
    b_f += forget_bias
    return LstmParams(
        w_xi=w_xi, w_hi=w_hi, w_ci=zeros(), b_i=zeros(),
        w_xf=w_xf, w_hf=w_hf, w_cf=zeros(), b_f=b_f,
        w_xc=w_xc, w_hc=w_hc, b_c=b_c,
        w_xo=w_xo, w_ho=w_ho, w_co=zeros(), b_o=zeros(),
    )


def zeros_like_params(params: LstmParams, variant: Variant = None) -> LstmGrads:
    """Gradient holder with zero arrays mirroring params and variant."""
    z = lambda a: None if a is None else np.zeros_like(a)
    p = LstmParams(
        w_xi=z(params.w_xi), w_hi=z(params.w_hi), w_ci=z(params.w_ci), b_i=z(params.b_i),
        w_xf=z(params.w_xf), w_hf=z(params.w_hf), w_cf=z(params.w_cf), b_f=z(params.b_f),
        w_xc=z(params.w_xc), w_hc=z(params.w_hc), b_c=z(params.b_c),
        w_xo=z(params.w_xo), w_ho=z(params.w_ho), w_co=z(params.w_co), b_o=z(params.b_o),
        cell_act=params.cell_act, state_act=params.state_act,
    )
    v: Variant = None
    if isinstance(variant, InputProjection):
        v = InputProjection(
            w_x=np.zeros_like(variant.w_x),
            w_h=np.zeros_like(variant.w_h),
            b=np.zeros_like(variant.b),
            act=variant.act,
            inner=[ProjLayer(np.zeros_like(l.w), np.zeros_like(l.b), l.act) for l in variant.inner],
        )
    elif isinstance(variant, OutputProjection):
        v = OutputProjection(
            layers=[ProjLayer(np.zeros_like(l.w), np.zeros_like(l.b), l.act) for l in variant.layers]
        )
    return LstmGrads(params=p, variant=v)


def lstm_param_items(params: LstmParams, variant: Variant = None):
    """Stable (name, array) listing of every parameter of a layer.

    The same function applied to a zeros_like_params holder yields the
    matching gradient arrays in the same order.
    """
    items = [
        ("w_xi", params.w_xi), ("w_hi", params.w_hi), ("w_ci", params.w_ci), ("b_i", params.b_i),
        ("w_xf", params.w_xf), ("w_hf", params.w_hf), ("w_cf", params.w_cf), ("b_f", params.b_f),
    ]
    if params.w_xc is not None:
        items += [("w_xc", params.w_xc), ("w_hc", params.w_hc), ("b_c", params.b_c)]
    items += [
        ("w_xo", params.w_xo), ("w_ho", params.w_ho), ("w_co", params.w_co), ("b_o", params.b_o),
    ]
    if isinstance(variant, InputProjection):
        items += [("ip.w_x", variant.w_x), ("ip.w_h", variant.w_h), ("ip.b", variant.b)]
        for j, layer in enumerate(variant.inner):
            items += [(f"ip.l{j}.w", layer.w), (f"ip.l{j}.b", layer.b)]
    elif isinstance(variant, OutputProjection):
        for j, layer in enumerate(variant.layers):
            items += [(f"op.l{j}.w", layer.w), (f"op.l{j}.b", layer.b)]
    return items


def grad_items(grads: LstmGrads):
    return lstm_param_items(grads.params, grads.variant)


def _act_grad(act: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    # sigmoid/tanh differentiate from the output, relu from the pre-activation
    if act in ("sigmoid", "tanh"):
        return activation_derivative(act, post)
    return activation_derivative(act, pre)


def _check_gate(name: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"non-finite values in {name}")


def lstm_step_forward(
    x_t: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    params: LstmParams,
    variant: Variant = None,
    validate: bool = False,
):
    """One step. Returns (out, c_t, cache).

    h_prev is the recurrent input: the previous block output, or the previous
    projected output when an output projection is attached. out equals h_t
    for the plain and input-projection variants and p_t for the output
    projection variant.
    """
    p = params
    x = np.asarray(x_t, dtype=np.float64)
    h_in = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x.shape != (p.n_inputs,):
        raise ShapeError(f"lstm step: input has shape {x.shape}, expected ({p.n_inputs},)")
    if h_in.shape != (p.n_rec,):
        raise ShapeError(f"lstm step: recurrent input has shape {h_in.shape}, expected ({p.n_rec},)")
    if c_prev.shape != (p.n_cells,):
        raise ShapeError(f"lstm step: cell state has shape {c_prev.shape}, expected ({p.n_cells},)")

    i = apply_activation("sigmoid", p.w_xi @ x + p.w_hi @ h_in + p.w_ci * c_prev + p.b_i)
    f = apply_activation("sigmoid", p.w_xf @ x + p.w_hf @ h_in + p.w_cf * c_prev + p.b_f)

    za = None
    ip_pre = ip_out = None
    if isinstance(variant, InputProjection):
        pre = variant.w_x @ x + variant.w_h @ h_in + variant.b
        u = apply_activation(variant.act, pre)
        ip_pre, ip_out = [pre], [u]
        for layer in variant.inner:
            pre = layer.w @ u + layer.b
            u = apply_activation(layer.act, pre)
            ip_pre.append(pre)
            ip_out.append(u)
        a = u
        if a.shape != (p.n_cells,):
            raise ShapeError(
                f"input projection produces shape {a.shape}, expected ({p.n_cells},)"
            )
    else:
        if p.w_xc is None:
            raise ShapeError("lstm step: no cell-input weights and no input projection")
        za = p.w_xc @ x + p.w_hc @ h_in + p.b_c
        a = apply_activation(p.cell_act, za)

    c = f * c_prev + i * a
    o = apply_activation("sigmoid", p.w_xo @ x + p.w_ho @ h_in + p.w_co * c + p.b_o)
    tc = apply_activation(p.state_act, c)
    h = o * tc

    out = h
    op_pre = op_out = None
    if isinstance(variant, OutputProjection):
        op_pre, op_out = [], []
        v = h
        for layer in variant.layers:
            pre = layer.w @ v + layer.b
            v = apply_activation(layer.act, pre)
            op_pre.append(pre)
            op_out.append(v)
        out = v

    if validate:
        _check_gate("input gate", i)
        _check_gate("forget gate", f)
        _check_gate("cell input", a)
        _check_gate("cell state", c)
        _check_gate("output gate", o)
        _check_gate("block output", out)

    cache = LstmStepCache(
        x=x, h_in=h_in, c_prev=c_prev, i=i, f=f, za=za, a=a, c=c, tc=tc, o=o, h=h, out=out,
        ip_pre=ip_pre, ip_out=ip_out, op_pre=op_pre, op_out=op_out,
    )
    return out, c, cache


def lstm_sequence_forward(
    xs,
    params: LstmParams,
    variant: Variant = None,
    h_0: np.ndarray | None = None,
    c_0: np.ndarray | None = None,
):
    """Run the step over a whole sequence. Returns (outputs, caches, h_T, c_T).

    h_T is the final recurrent output (projected when an output projection is
    attached). Initial states default to zeros.
    """
    if len(xs) == 0:
        raise ShapeError("lstm sequence: empty input")
    h = np.zeros(params.n_rec) if h_0 is None else np.asarray(h_0, dtype=np.float64)
    c = np.zeros(params.n_cells) if c_0 is None else np.asarray(c_0, dtype=np.float64)
    outputs, caches = [], []
    for x in xs:
        h, c, cache = lstm_step_forward(x, h, c, params, variant)
        outputs.append(h)
        caches.append(cache)
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        # replay with per-gate checks so the error names the failing gate
        hv = np.zeros(params.n_rec) if h_0 is None else np.asarray(h_0, dtype=np.float64)
        cv = np.zeros(params.n_cells) if c_0 is None else np.asarray(c_0, dtype=np.float64)
        for x in xs:
            hv, cv, _ = lstm_step_forward(x, hv, cv, params, variant, validate=True)
        raise NumericalError("non-finite recurrent state")
    return outputs, caches, h, c


def lstm_sequence_backward(
    caches: list[LstmStepCache],
    d_outputs,
    params: LstmParams,
    variant: Variant = None,
):
    """Exact gradients of sum_t <d_outputs[t], out_t> w.r.t. everything.

    Returns (grads, d_xs, d_h0, d_c0). Gradients are accumulated over all
    steps and propagated to the sequence start.
    """
    if len(d_outputs) != len(caches):
        raise ShapeError(
            f"lstm backward: {len(d_outputs)} output gradients for {len(caches)} cached steps"
        )
    p = params
    g = zeros_like_params(p, variant)
    gp = g.params
    d_xs: list[np.ndarray | None] = [None] * len(caches)
    d_rec = np.zeros(p.n_rec)
    dc = np.zeros(p.n_cells)

    for t in reversed(range(len(caches))):
        cc = caches[t]
        dout = np.asarray(d_outputs[t], dtype=np.float64) + d_rec

        if isinstance(variant, OutputProjection):
            dv = dout
            for j in reversed(range(len(variant.layers))):
                layer = variant.layers[j]
                v_in = cc.h if j == 0 else cc.op_out[j - 1]
                dz = dv * _act_grad(layer.act, cc.op_pre[j], cc.op_out[j])
                gl = g.variant.layers[j]
                gl.w += np.outer(dz, v_in)
                gl.b += dz
                dv = layer.w.T @ dz
            dh = dv
        else:
            dh = dout

        do = dh * cc.tc
        dzo = do * cc.o * (1.0 - cc.o)
        dc = dc + dh * cc.o * _act_grad(p.state_act, cc.c, cc.tc) + dzo * p.w_co

        di = dc * cc.a
        dzi = di * cc.i * (1.0 - cc.i)
        df = dc * cc.c_prev
        dzf = df * cc.f * (1.0 - cc.f)
        da = dc * cc.i

        if isinstance(variant, InputProjection):
            du = da
            for j in reversed(range(len(variant.inner))):
                layer = variant.inner[j]
                dz = du * _act_grad(layer.act, cc.ip_pre[j + 1], cc.ip_out[j + 1])
                gl = g.variant.inner[j]
                gl.w += np.outer(dz, cc.ip_out[j])
                gl.b += dz
                du = layer.w.T @ dz
            dz0 = du * _act_grad(variant.act, cc.ip_pre[0], cc.ip_out[0])
            g.variant.w_x += np.outer(dz0, cc.x)
            g.variant.w_h += np.outer(dz0, cc.h_in)
            g.variant.b += dz0
            dx_cell = variant.w_x.T @ dz0
            drec_cell = variant.w_h.T @ dz0
        else:
            dza = da * _act_grad(p.cell_act, cc.za, cc.a)
            gp.w_xc += np.outer(dza, cc.x)
            gp.w_hc += np.outer(dza, cc.h_in)
            gp.b_c += dza
            dx_cell = p.w_xc.T @ dza
            drec_cell = p.w_hc.T @ dza

        gp.w_xi += np.outer(dzi, cc.x)
        gp.w_hi += np.outer(dzi, cc.h_in)
        gp.w_ci += dzi * cc.c_prev
        gp.b_i += dzi
        gp.w_xf += np.outer(dzf, cc.x)
        gp.w_hf += np.outer(dzf, cc.h_in)
        gp.w_cf += dzf * cc.c_prev
        gp.b_f += dzf
        gp.w_xo += np.outer(dzo, cc.x)
        gp.w_ho += np.outer(dzo, cc.h_in)
        gp.w_co += dzo * cc.c
        gp.b_o += dzo

        d_xs[t] = p.w_xi.T @ dzi + p.w_xf.T @ dzf + p.w_xo.T @ dzo + dx_cell
        d_rec = p.w_hi.T @ dzi + p.w_hf.T @ dzf + p.w_ho.T @ dzo + drec_cell
        dc = dc * cc.f + dzi * p.w_ci + dzf * p.w_cf

    return g, d_xs, d_rec, dc
