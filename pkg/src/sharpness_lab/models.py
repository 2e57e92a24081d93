"""Small ReLU MLP/CNN models over a flat parameter vector.

Parameters are stored layer by layer, weights first then biases. Dense
weights have shape (fan_in, units) so a layer computes ``x @ W + b``. Conv
kernels have shape (out, in, k, k); each output-channel kernel is a
contiguous run of coordinates and forms one filter group.

Every layer except the last is followed by ReLU. The last layer must be
dense and produces logits for a softmax cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Dense",
    "Conv",
    "ModelSpec",
    "HiddenNode",
    "LayerSlot",
    "ParameterLayout",
    "ParameterVector",
    "build_model",
    "build_layout",
    "forward_logits",
    "loss_and_grad",
    "evaluate",
    "apply_node_scaling",
    "model_objective",
]


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.layer_shapes()  # validates

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units

    def layer_shapes(self) -> list:
        """Output shape (without batch axis) of every layer."""
        if not self.input_shape or any(s <= 0 for s in self.input_shape):
            raise ConfigError(f"invalid input shape {self.input_shape}")
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        if not isinstance(self.layers[-1], Dense):
            raise ConfigError("last layer must be dense")
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.units <= 0:
                    raise ConfigError(f"layer {i}: dense units must be positive")
                shape = (layer.units,)
            elif isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if layer.channels <= 0 or layer.kernel <= 0 or layer.kernel > min(h, w):
                    raise ConfigError(f"layer {i}: conv {layer} does not fit input {shape}")
                shape = (layer.channels, h - layer.kernel + 1, w - layer.kernel + 1)
            else:
                raise ConfigError(f"layer {i}: unknown layer {layer!r}")
            shapes.append(shape)
        return shapes

    def to_text(self) -> str:
        parts = ["in=" + "x".join(str(s) for s in self.input_shape)]
        for layer in self.layers:
            if isinstance(layer, Dense):
                parts.append(f"dense={layer.units}")
            else:
                parts.append(f"conv={layer.channels}:{layer.kernel}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        """Parse ``"in=1x6x6 conv=4:3 dense=10"``-style descriptions."""
        input_shape = None
        layers = []
        try:
            for token in text.split():
                key, _, val = token.partition("=")
                if key == "in":
                    input_shape = tuple(int(v) for v in val.split("x"))
                elif key == "dense":
                    layers.append(Dense(int(val)))
                elif key == "conv":
                    ch, _, k = val.partition(":")
                    layers.append(Conv(int(ch), int(k)))
                else:
                    raise ConfigError(f"unknown model token {token!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"cannot parse model spec {text!r}: {exc}") from None
        if input_shape is None:
            raise ConfigError(f"model spec {text!r} lacks in=...")
        return cls(input_shape, tuple(layers))

    @classmethod
    def mlp(cls, *widths: int) -> "ModelSpec":
        """``ModelSpec.mlp(2, 3, 2)`` is a 2-3-2 perceptron."""
        return cls((widths[0],), tuple(Dense(u) for u in widths[1:]))


@dataclass(frozen=True)
class LayerSlot:
    kind: str
    weight_start: int
    weight_shape: tuple
    bias_start: int
    bias_size: int
    fan_in: int

    @property
    def weight_stop(self) -> int:
        return self.weight_start + int(np.prod(self.weight_shape))

    @property
    def bias_stop(self) -> int:
        return self.bias_start + self.bias_size


@dataclass(frozen=True, eq=False)
class HiddenNode:
    layer: int
    unit: int
    incoming: np.ndarray
    bias: int
    outgoing: np.ndarray


@dataclass(frozen=True, eq=False)
class ParameterLayout:
    k: int
    filter_groups: tuple = ()
    bias_mask: np.ndarray = None
    nodes: tuple = ()
    slots: tuple = ()

    def __post_init__(self):
        mask = np.zeros(self.k, dtype=bool) if self.bias_mask is None else np.asarray(self.bias_mask, dtype=bool)
        if mask.shape != (self.k,):
            raise ValueError("bias mask length must equal k")
        mask.setflags(write=False)
        object.__setattr__(self, "bias_mask", mask)
        seen = np.zeros(self.k, dtype=bool)
        for start, stop in self.filter_groups:
            if not 0 <= start < stop <= self.k or seen[start:stop].any():
                raise ValueError("filter groups must be disjoint ranges inside [0, k)")
            seen[start:stop] = True

    @classmethod
    def flat(cls, k: int) -> "ParameterLayout":
        """Layout with no filters, biases or nodes (e.g. the toy loss)."""
        return cls(k)

    @property
    def m(self) -> int:
        return len(self.filter_groups)

    @property
    def q(self) -> int:
        return self.k - sum(stop - start for start, stop in self.filter_groups)

    def same_structure(self, other: "ParameterLayout") -> bool:
        return (
            self.k == other.k
            and tuple(self.filter_groups) == tuple(other.filter_groups)
            and np.array_equal(self.bias_mask, other.bias_mask)
        )


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (self.layout.k,):
            raise ShapeError("ParameterVector", vals.shape, (self.layout.k,))
        if not np.all(np.isfinite(vals)):
            raise NumericError("parameter vector has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def __len__(self):
        return self.layout.k


def build_layout(spec: ModelSpec) -> ParameterLayout:
    shapes = spec.layer_shapes()
    slots = []
    groups = []
    offset = 0
    in_shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, shapes):
        if isinstance(layer, Dense):
            fan_in = int(np.prod(in_shape))
            wshape = (fan_in, layer.units)
        else:
            fan_in = in_shape[0] * layer.kernel**2
            wshape = (layer.channels, in_shape[0], layer.kernel, layer.kernel)
            for o in range(layer.channels):
                groups.append((offset + o * fan_in, offset + (o + 1) * fan_in))
        nw = int(np.prod(wshape))
        nb = out_shape[0]
        slots.append(
            LayerSlot("dense" if isinstance(layer, Dense) else "conv", offset, wshape, offset + nw, nb, fan_in)
        )
        offset += nw + nb
        in_shape = out_shape
    k = offset
    mask = np.zeros(k, dtype=bool)
    for s in slots:
        mask[s.bias_start : s.bias_stop] = True

    nodes = []
    for li in range(len(slots) - 1):
        cur, nxt = slots[li], slots[li + 1]
        out_shape = shapes[li]
        for u in range(cur.bias_size):
            if cur.kind == "dense":
                fan_in, units = cur.weight_shape
                incoming = cur.weight_start + np.arange(fan_in) * units + u
            else:
                incoming = cur.weight_start + u * cur.fan_in + np.arange(cur.fan_in)
            if nxt.kind == "dense":
                units = nxt.weight_shape[1]
                per_unit = int(np.prod(out_shape[1:])) if cur.kind == "conv" else 1
                rows = np.arange(u * per_unit, (u + 1) * per_unit)
                outgoing = (nxt.weight_start + rows[:, None] * units + np.arange(units)[None, :]).reshape(-1)
            else:
                o2, c2, kk, _ = nxt.weight_shape
                outgoing = (
                    nxt.weight_start
                    + np.arange(o2)[:, None] * (c2 * kk * kk)
                    + u * kk * kk
                    + np.arange(kk * kk)[None, :]
                ).reshape(-1)
            nodes.append(HiddenNode(li, u, incoming, cur.bias_start + u, outgoing))
    return ParameterLayout(k, tuple(groups), mask, tuple(nodes), tuple(slots))


def build_model(spec: ModelSpec, seed: int) -> ParameterVector:
    """Initialize uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.empty(layout.k)
    for slot in layout.slots:
        bound = 1.0 / math.sqrt(slot.fan_in)
        n = slot.bias_stop - slot.weight_start
        values[slot.weight_start : slot.bias_stop] = rng.uniform(-bound, bound, size=n)
    return ParameterVector(values, layout)


def _as_batch(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    size = int(np.prod(spec.input_shape))
    if x.ndim == 0 or int(np.prod(x.shape[1:])) != size:
        raise ShapeError("model input", x.shape, spec.input_shape)
    return x.reshape((-1,) + spec.input_shape)


def _build_forward(g: Graph, values: np.ndarray, spec: ModelSpec, layout: ParameterLayout, x: np.ndarray):
    h = g.const(_as_batch(spec, x))
    leaves = []
    last = len(layout.slots) - 1
    for i, slot in enumerate(layout.slots):
        wv = values[slot.weight_start : slot.weight_stop].reshape(slot.weight_shape)
        bv = values[slot.bias_start : slot.bias_stop]
        if slot.kind == "dense":
            if len(h.shape) != 2:
                h = g.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            W, b = g.param(wv), g.param(bv)
            h = h @ W + b
        else:
            W, b = g.param(wv), g.param(bv.reshape(-1, 1, 1))
            h = g.conv2d(h, W) + b
        leaves.append((slot, W, b))
        if i != last:
            h = g.relu(h)
    return h, leaves


def forward_logits(w: ParameterVector, spec: ModelSpec, x) -> np.ndarray:
    g = Graph()
    logits, _ = _build_forward(g, w.values, spec, w.layout, x)
    return logits.value.numpy()


def loss_and_grad(w: ParameterVector, spec: ModelSpec, batch) -> tuple:
    """Mean softmax cross-entropy over ``batch = (x, y)`` and its gradient."""
    x, y = batch
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    g = Graph()
    logits, leaves = _build_forward(g, w.values, spec, w.layout, x)
    if logits.shape[0] != y.shape[0]:
        raise ShapeError("loss_and_grad", logits.shape, y.shape)
    loss = g.mean(g.softmax_crossentropy(logits, y))
    grads = g.backward(loss)
    flat = np.empty(w.layout.k)
    for slot, W, b in leaves:
        flat[slot.weight_start : slot.weight_stop] = grads[W].reshape(-1)
        flat[slot.bias_start : slot.bias_stop] = grads[b].reshape(-1)
    return loss.value.item(), flat


def evaluate(w: ParameterVector, spec: ModelSpec, x, y) -> tuple:
    """(mean cross-entropy, accuracy) without building gradients."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    g = Graph()
    logits, _ = _build_forward(g, w.values, spec, w.layout, x)
    loss = g.mean(g.softmax_crossentropy(logits, y)).value.item()
    acc = float(np.mean(np.argmax(logits.value.data, axis=1) == y))
    return loss, acc


def model_objective(spec: ModelSpec, layout: ParameterLayout, batch):
    """Closure ``v -> (loss, grad)`` over raw parameter arrays."""

    def objective(values):
        return loss_and_grad(ParameterVector(values, layout), spec, batch)

    return objective


def apply_node_scaling(w: ParameterVector, node: int, c: float) -> ParameterVector:
    """Scale a hidden ReLU node: incoming weights and bias by c, outgoing by 1/c.

    Positive homogeneity of ReLU leaves the network function unchanged.
    """
    if not c > 0:
        raise ValueError(f"scaling factor must be positive, got {c}")
    try:
        info = w.layout.nodes[node]
    except IndexError:
        raise ValueError(f"no hidden node {node} (model has {len(w.layout.nodes)})") from None
    v = w.values.copy()
    v[info.incoming] *= c
    v[info.bias] *= c
    v[info.outgoing] /= c
    return w.with_values(v)
