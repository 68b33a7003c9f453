"""Architecture DSL, network builder, whole-network forward/backward over
masked frame sequences, binary checkpoints, and a finite-difference gradient
checker.

The DSL is a chain of layers separated by ">", e.g.

    relu(2000)x3 > lstm(750) > softmax(3304)

Layer names: relu, tanh, linear, rnn, lstm, lstm_ip, lstm_op, softmax.
lstm_ip takes (cells, proj_units) and optionally a trailing non-linear
activation name (default tanh); lstm_op takes (cells, proj_units) with a
linear projection. "xK" repeats a layer K times. Whitespace is ignored.
A structurally identical JSON tree is accepted via spec_from_config.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import (
    DenseLayer,
    RnnLayer,
    SoftmaxOutput,
    init_dense,
    init_rnn,
    init_softmax,
    rnn_sequence_backward,
    rnn_sequence_forward,
)
from .lstm import (
    NONLINEAR_ACTS,
    InputProjection,
    LstmParams,
    OutputProjection,
    ProjLayer,
    Variant,
    grad_items,
    init_lstm_params,
    lstm_param_items,
    lstm_sequence_backward,
    lstm_sequence_forward,
)
from .numerics import (
    ShapeError,
    activation_derivative,
    apply_activation,
    init_matrix,
    init_vector,
    log_softmax,
)

DENSE_KINDS = ("relu", "tanh", "linear")
LAYER_KINDS = DENSE_KINDS + ("rnn", "lstm", "lstm_ip", "lstm_op", "softmax")
_ARITY = {
    "relu": 1, "tanh": 1, "linear": 1, "rnn": 1, "lstm": 1,
    "lstm_ip": 2, "lstm_op": 2, "softmax": 1,
}


class SpecError(ValueError):
    """The architecture description is invalid."""


class SpecParseError(SpecError):
    """The architecture text failed to parse; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...]
    act: str = "tanh"  # projection activation; only meaningful for lstm_ip

    def out_dim(self) -> int:
        if self.kind == "lstm_op":
            return self.args[1]
        return self.args[0]

    def to_string(self) -> str:
        args = ",".join(str(a) for a in self.args)
        if self.kind == "lstm_ip" and self.act != "tanh":
            args += f",{self.act}"
        return f"{self.kind}({args})"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise SpecError(f"input dim must be positive, got {self.input_dim}")
        if not self.layers:
            raise SpecError("a network needs at least one layer")
        for pos, ls in enumerate(self.layers):
            if ls.kind not in LAYER_KINDS:
                raise SpecError(f"unknown layer kind {ls.kind!r}")
            if len(ls.args) != _ARITY[ls.kind]:
                raise SpecError(
                    f"{ls.kind} takes {_ARITY[ls.kind]} argument(s), got {len(ls.args)}"
                )
            if any(a < 1 for a in ls.args):
                raise SpecError(f"{ls.kind}: sizes must be positive, got {ls.args}")
            if ls.kind == "softmax" and pos != len(self.layers) - 1:
                raise SpecError("softmax must be the last layer")
        if self.layers[-1].kind != "softmax":
            raise SpecError("the last layer must be softmax")

    @property
    def n_classes(self) -> int:
        return self.layers[-1].args[0]

    def dims(self) -> list[int]:
        """Input dim of every layer followed by the output dim."""
        chain = [self.input_dim]
        for ls in self.layers:
            chain.append(ls.out_dim())
        return chain

    def to_string(self) -> str:
        return " > ".join(ls.to_string() for ls in self.layers)


import re as _re

_TOKEN_RE = _re.compile(r"([a-z_]+)\(([a-z0-9_]+(?:,[a-z0-9_]+)*)\)(?:x(\d+))?\Z")


def parse_spec(text: str, input_dim: int, n_classes: int | None = None) -> NetworkSpec:
    """Parse the layer-chain DSL into a validated NetworkSpec."""
    layers: list[LayerSpec] = []
    pos = 0
    for seg in text.split(">"):
        token = "".join(seg.split())
        at = pos + (len(seg) - len(seg.lstrip()))
        pos += len(seg) + 1
        if not token:
            raise SpecParseError("empty layer", at)
        m = _TOKEN_RE.fullmatch(token)
        if m is None:
            raise SpecParseError(f"bad layer syntax: {seg.strip()!r}", at)
        name, argstr, rep = m.group(1), m.group(2), m.group(3)
        if name not in LAYER_KINDS:
            raise SpecParseError(f"unknown layer {name!r}", at)
        raw_args = argstr.split(",")
        act = "tanh"
        if name == "lstm_ip" and raw_args and not raw_args[-1].isdigit():
            act = raw_args.pop()
            if act not in NONLINEAR_ACTS:
                raise SpecParseError(f"lstm_ip activation must be non-linear, got {act!r}", at)
        args = []
        for s in raw_args:
            if not s.isdigit():
                raise SpecParseError(f"{name}: argument {s!r} is not an integer", at)
            args.append(int(s))
        if len(args) != _ARITY[name]:
            raise SpecParseError(
                f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", at
            )
        repeat = int(rep) if rep else 1
        if repeat < 1:
            raise SpecParseError(f"repeat count must be >= 1, got {repeat}", at)
        layers.extend([LayerSpec(name, tuple(args), act)] * repeat)
    spec = NetworkSpec(input_dim, tuple(layers))
    if n_classes is not None and spec.n_classes != n_classes:
        raise SpecError(
            f"softmax has {spec.n_classes} classes but the data has {n_classes}"
        )
    return spec


_CONFIG_ARGS = {
    "relu": ("units",), "tanh": ("units",), "linear": ("units",), "rnn": ("units",),
    "lstm": ("cells",), "lstm_ip": ("cells", "proj"), "lstm_op": ("cells", "proj"),
    "softmax": ("classes",),
}


def spec_from_config(obj: dict, n_classes: int | None = None) -> NetworkSpec:
    """Build a NetworkSpec from the JSON tree mirror of the DSL.

    Shape: {"input_dim": D, "layers": [{"kind": ..., <size fields>,
    "repeat": K, "act": name}, ...]} with size field names per kind:
    units / cells / cells+proj / classes.
    """
    try:
        input_dim = int(obj["input_dim"])
        entries = obj["layers"]
    except (KeyError, TypeError) as e:
        raise SpecError(f"config needs 'input_dim' and 'layers': {e}") from None
    layers: list[LayerSpec] = []
    for entry in entries:
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {kind!r} in config")
        try:
            args = tuple(int(entry[k]) for k in _CONFIG_ARGS[kind])
        except KeyError as e:
            raise SpecError(f"{kind} config entry is missing {e}") from None
        act = entry.get("act", "tanh")
        repeat = int(entry.get("repeat", 1))
        if repeat < 1:
            raise SpecError(f"repeat count must be >= 1, got {repeat}")
        layers.extend([LayerSpec(kind, args, act)] * repeat)
    spec = NetworkSpec(input_dim, tuple(layers))
    if n_classes is not None and spec.n_classes != n_classes:
        raise SpecError(
            f"softmax has {spec.n_classes} classes but the data has {n_classes}"
        )
    return spec


# --- instantiated layers ---------------------------------------------------


class _DenseSeq:
    recurrent = False

    def __init__(self, kind: str, layer: DenseLayer):
        self.kind = kind
        self.layer = layer
        self.out_dim = layer.w.shape[0]

    def forward(self, X, state=None):
        lay = self.layer
        pre = X @ lay.w.T + lay.b
        Y = apply_activation(lay.act, pre)
        return Y, (X, pre, Y), None

    def backward(self, cache, dY, grads, prefix):
        X, pre, Y = cache
        lay = self.layer
        if lay.act in ("sigmoid", "tanh"):
            dZ = dY * activation_derivative(lay.act, Y)
        else:
            dZ = dY * activation_derivative(lay.act, pre)
        grads[prefix + "w"] += dZ.T @ X
        grads[prefix + "b"] += dZ.sum(axis=0)
        return dZ @ lay.w

    def param_items(self):
        return [("w", self.layer.w), ("b", self.layer.b)]


class _RnnSeq:
    recurrent = True
    kind = "rnn"

    def __init__(self, layer: RnnLayer):
        self.layer = layer
        self.out_dim = layer.n_units

    def init_state(self):
        return (np.zeros(self.layer.n_units),)

    def forward(self, X, state):
        h0 = state[0] if state is not None else None
        hs, caches, h_T = rnn_sequence_forward(self.layer, list(X), h0)
        return np.stack(hs), caches, (h_T,)

    def backward(self, cache, dY, grads, prefix):
        g, d_xs, _ = rnn_sequence_backward(self.layer, cache, list(dY))
        grads[prefix + "w_xh"] += g.w_xh
        grads[prefix + "w_hh"] += g.w_hh
        grads[prefix + "b_h"] += g.b_h
        return np.stack(d_xs)

    def state_at(self, cache, j):
        return (cache[j][2],)

    def param_items(self):
        lay = self.layer
        return [("w_xh", lay.w_xh), ("w_hh", lay.w_hh), ("b_h", lay.b_h)]


class _LstmSeq:
    recurrent = True

    def __init__(self, kind: str, params: LstmParams, variant: Variant):
        self.kind = kind
        self.params = params
        self.variant = variant
        self.out_dim = variant.out_dim if isinstance(variant, OutputProjection) else params.n_cells

    def init_state(self):
        return (np.zeros(self.params.n_rec), np.zeros(self.params.n_cells))

    def forward(self, X, state):
        h0, c0 = state if state is not None else (None, None)
        outs, caches, h_T, c_T = lstm_sequence_forward(list(X), self.params, self.variant, h0, c0)
        return np.stack(outs), caches, (h_T, c_T)

    def backward(self, cache, dY, grads, prefix):
        g, d_xs, _, _ = lstm_sequence_backward(cache, list(dY), self.params, self.variant)
        for rel, arr in grad_items(g):
            grads[prefix + rel] += arr
        return np.stack(d_xs)

    def state_at(self, cache, j):
        return (cache[j].out, cache[j].c)

    def param_items(self):
        return lstm_param_items(self.params, self.variant)


class _SoftmaxSeq:
    recurrent = False
    kind = "softmax"

    def __init__(self, head: SoftmaxOutput):
        self.head = head
        self.out_dim = head.n_classes

    def forward(self, X, state=None):
        logits = X @ self.head.w.T + self.head.b
        logp = log_softmax(logits)
        return logp, (X, logp), None

    def param_items(self):
        return [("w", self.head.w), ("b", self.head.b)]


class Network:
    """An instantiated layer stack with named parameters."""

    def __init__(self, spec: NetworkSpec, layers: list):
        self.spec = spec
        self.layers = layers

    def param_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            for rel, arr in layer.param_items():
                items.append((f"l{i}.{layer.kind}.{rel}", arr))
        return items

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.param_items()}

    def init_states(self):
        return [layer.init_state() for layer in self.layers if layer.recurrent]

    def states_at(self, caches, j: int):
        """Recurrent states after processing frame j, from forward caches."""
        states = []
        for i, layer in enumerate(self.layers):
            if layer.recurrent:
                states.append(layer.state_at(caches[i], j))
        return states

    def forward(self, frames, states=None):
        """Run all layers over a frame sequence.

        Returns (log_probs, caches, final_states): per-frame class
        log-probabilities (T x n_classes), per-layer caches for backward, and
        the final state of every recurrent layer in order.
        """
        X = np.asarray(frames, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ShapeError(
                f"network forward: frames have shape {X.shape}, "
                f"expected (T, {self.spec.input_dim})"
            )
        if X.shape[0] == 0:
            raise ShapeError("network forward: no frames")
        if states is None:
            states = self.init_states()
        caches, finals = [], []
        si = 0
        for layer in self.layers:
            if layer.recurrent:
                X, cache, fin = layer.forward(X, states[si])
                si += 1
                finals.append(fin)
            else:
                X, cache, _ = layer.forward(X)
            caches.append(cache)
        return X, caches, finals

    def backward(self, caches, targets, mask, grad_scale=None, out=None):
        """Gradients of the masked cross-entropy loss.

        Masked frames contribute neither loss nor gradient. grad_scale
        multiplies the gradient of the *summed* per-frame loss; it defaults
        to 1/n_unmasked so the gradients match the returned mean loss.
        Returns (grads, mean_loss); grads accumulate into `out` when given.
        """
        grads = self.zero_grads() if out is None else out
        targets = np.asarray(targets)
        mask = np.asarray(mask, dtype=bool)
        X_in, logp = caches[-1]
        T = logp.shape[0]
        if targets.shape[0] != T or mask.shape[0] != T:
            raise ShapeError(
                f"network backward: {T} frames but {targets.shape[0]} targets "
                f"and {mask.shape[0]} mask entries"
            )
        rows = np.nonzero(mask)[0]
        n = rows.size
        if n and (targets[rows].min() < 0 or targets[rows].max() >= self.spec.n_classes):
            raise ValueError(f"target out of range for {self.spec.n_classes} classes")
        scale = grad_scale if grad_scale is not None else (1.0 / n if n else 0.0)
        mean_loss = float(-logp[rows, targets[rows]].sum() / n) if n else 0.0

        dZ = np.zeros_like(logp)
        if n and scale != 0.0:
            dZ[rows] = np.exp(logp[rows]) * scale
            dZ[rows, targets[rows]] -= scale
        head = self.layers[-1]
        prefix = f"l{len(self.layers) - 1}.softmax."
        grads[prefix + "w"] += dZ.T @ X_in
        grads[prefix + "b"] += dZ.sum(axis=0)
        dX = dZ @ head.head.w
        for i in reversed(range(len(self.layers) - 1)):
            layer = self.layers[i]
            dX = layer.backward(caches[i], dX, grads, f"l{i}.{layer.kind}.")
        return grads, mean_loss

    def copy(self) -> "Network":
        other = build_network(self.spec, rng=None)
        for (_, dst), (_, src) in zip(other.param_items(), self.param_items()):
            np.copyto(dst, src)
        return other


def build_network(spec: NetworkSpec, rng: np.random.Generator | None, weight_radius: float = 0.05) -> Network:
    """Instantiate a spec. rng=None builds an all-zero skeleton (for loading);
    otherwise weights are uniform(+-weight_radius), biases zero, LSTM forget
    biases +1, peepholes zero. Same seed, same parameters, bit for bit."""
    layers = []
    d = spec.input_dim
    forget_bias = 1.0 if rng is not None else 0.0
    scheme = ("uniform", weight_radius) if rng is not None else "zeros"
    for ls in spec.layers:
        if ls.kind in DENSE_KINDS:
            layers.append(_DenseSeq(ls.kind, init_dense(d, ls.args[0], ls.kind, rng, weight_radius)))
        elif ls.kind == "rnn":
            layers.append(_RnnSeq(init_rnn(d, ls.args[0], rng, weight_radius)))
        elif ls.kind == "lstm":
            params = init_lstm_params(d, ls.args[0], rng, weight_radius=weight_radius,
                                      forget_bias=forget_bias)
            layers.append(_LstmSeq("lstm", params, None))
        elif ls.kind == "lstm_ip":
            cells, proj = ls.args
            params = init_lstm_params(d, cells, rng, weight_radius=weight_radius,
                                      forget_bias=forget_bias, cell_input=False)
            ip = InputProjection(
                w_x=init_matrix(proj, d, scheme, rng),
                w_h=init_matrix(proj, cells, scheme, rng),
                b=init_vector(proj, "zeros"),
                act=ls.act,
                inner=[ProjLayer(init_matrix(cells, proj, scheme, rng),
                                 init_vector(cells, "zeros"), "tanh")],
            )
            layers.append(_LstmSeq("lstm_ip", params, ip))
        elif ls.kind == "lstm_op":
            cells, proj = ls.args
            params = init_lstm_params(d, cells, rng, n_rec=proj, weight_radius=weight_radius,
                                      forget_bias=forget_bias)
            op = OutputProjection(layers=[
                ProjLayer(init_matrix(proj, cells, scheme, rng),
                          init_vector(proj, "zeros"), "linear")
            ])
            layers.append(_LstmSeq("lstm_op", params, op))
        elif ls.kind == "softmax":
            layers.append(_SoftmaxSeq(init_softmax(d, ls.args[0], rng, weight_radius)))
        else:  # pragma: no cover - spec validation rules this out
            raise SpecError(f"unknown layer kind {ls.kind!r}")
        d = layers[-1].out_dim
    return Network(spec, layers)


def network_forward(net: Network, frames, states=None):
    return net.forward(frames, states)


def network_backward(net: Network, caches, targets, mask, grad_scale=None, out=None):
    return net.backward(caches, targets, mask, grad_scale=grad_scale, out=out)


def network_loss(net: Network, frames, targets, mask, states=None) -> float:
    """Mean masked cross-entropy of a forward pass (no gradients)."""
    logp, _, _ = net.forward(frames, states)
    mask = np.asarray(mask, dtype=bool)
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        return 0.0
    targets = np.asarray(targets)
    return float(-logp[rows, targets[rows]].sum() / rows.size)


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DLN1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent."""


def save_checkpoint(net: Network, path, seed: int) -> None:
    """Write magic, version, spec string, seed, then every named tensor.

    Tensors are (name length, name, rows, cols, row-major little-endian
    float64); vectors are stored as 1 x n. Round trips are bit-exact.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        spec_bytes = net.spec.to_string().encode("utf-8")
        f.write(struct.pack("<I", len(spec_bytes)))
        f.write(spec_bytes)
        f.write(struct.pack("<Q", seed))
        for name, arr in net.param_items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            a2 = arr.reshape(1, -1) if arr.ndim == 1 else arr
            f.write(struct.pack("<II", a2.shape[0], a2.shape[1]))
            f.write(np.ascontiguousarray(a2, dtype="<f8").tobytes())


_FIRST_LAYER_INPUT_TENSOR = {
    "relu": "w", "tanh": "w", "linear": "w", "rnn": "w_xh",
    "lstm": "w_xi", "lstm_ip": "w_xi", "lstm_op": "w_xi", "softmax": "w",
}


def load_checkpoint(path):
    """Read a checkpoint back into a Network. Returns (net, seed)."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if need(4, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", need(4, "spec length"))
    spec_text = need(spec_len, "spec string").decode("utf-8")
    (seed,) = struct.unpack("<Q", need(8, "seed"))

    tensors: dict[str, np.ndarray] = {}
    while off < len(data):
        (name_len,) = struct.unpack("<I", need(4, "tensor name length"))
        name = need(name_len, "tensor name").decode("utf-8")
        rows, cols = struct.unpack("<II", need(8, f"shape of {name}"))
        raw = need(rows * cols * 8, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)

    # the spec string does not carry the input width; recover it from the
    # first layer's input-facing tensor
    probe = parse_spec(spec_text, 1)
    first = f"l0.{probe.layers[0].kind}.{_FIRST_LAYER_INPUT_TENSOR[probe.layers[0].kind]}"
    if first not in tensors:
        raise CheckpointError(f"missing tensor {first}")
    input_dim = tensors[first].shape[1]
    spec = parse_spec(spec_text, input_dim)
    net = build_network(spec, rng=None)
    for name, p in net.param_items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        t = tensors.pop(name)
        expect = (1, p.size) if p.ndim == 1 else p.shape
        if t.shape != expect:
            raise CheckpointError(f"tensor {name} has shape {t.shape}, expected {expect}")
        np.copyto(p, t.reshape(p.shape))
    if tensors:
        raise CheckpointError(f"unexpected tensors: {sorted(tensors)}")
    return net, seed


# --- gradient checking -------------------------------------------------------


def gradient_check(net: Network, frames, targets, mask, eps: float = 1e-4,
                   corrupt_block: str | None = None) -> dict[str, float]:
    """Max relative error per parameter block: analytic vs central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as the denominator.
    corrupt_block deliberately offsets one analytic block (negative-control
    hook for the checker itself).
    """
    _, caches, _ = net.forward(frames)
    grads, _ = net.backward(caches, targets, mask)
    if corrupt_block is not None:
        if corrupt_block not in grads:
            raise KeyError(f"no parameter block named {corrupt_block!r}")
        grads[corrupt_block] += 1.0
    report: dict[str, float] = {}
    for name, p in net.param_items():
        flat = p.ravel()
        g = grads[name].ravel()
        num = np.empty_like(g)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            lp = network_loss(net, frames, targets, mask)
            flat[k] = orig - eps
            lm = network_loss(net, frames, targets, mask)
            flat[k] = orig
            num[k] = (lp - lm) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        report[name] = float((np.abs(g - num) / denom).max()) if flat.size else 0.0
    return report
