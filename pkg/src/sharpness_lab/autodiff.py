"""Dense float64 tensors and tape-based reverse-mode differentiation.

A :class:`Graph` records every primitive applied to its nodes in an
append-only tape. ``Graph.backward`` walks the tape once in reverse and
returns the gradient of a scalar root with respect to each parameter leaf.

    g = Graph()
    w = g.param([1.0, 2.0])
    loss = g.sum(w * w)
    g.backward(loss)[w]        # array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "finite_difference_gradient",
]


class Tensor:
    """Immutable row-major float64 array.

    Non-finite values are rejected at construction, so every op output is
    checked simply by wrapping it.
    """

    __slots__ = ("_data",)

    def __init__(self, data, op="tensor"):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op}: non-finite value in output of shape {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not scalar")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._data!r})"


@dataclass(eq=False, frozen=True)
class Node:
    """Handle to one tape entry. Hashes by identity so it can key a dict."""

    graph: "Graph"
    id: int

    @property
    def value(self) -> Tensor:
        return self.graph._values[self.id]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.mul(self, -1.0)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(op, a_shape, b_shape) from None


class Graph:
    """Append-only tape of primitive ops.

    Not thread-safe; build one graph per thread. Inputs of node ``i`` always
    have ids ``< i``, so reverse id order is a valid topological order.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple] = []
        self._values: list[Tensor] = []
        self._ctx: list = []
        self._params: list[Node] = []

    def __len__(self):
        return len(self._values)

    @property
    def params(self) -> list:
        return list(self._params)

    def _record(self, op, inputs, value, ctx=None) -> Node:
        tensor = value if isinstance(value, Tensor) else Tensor(value, op=op)
        self._ops.append(op)
        self._inputs.append(tuple(inputs))
        self._values.append(tensor)
        self._ctx.append(ctx)
        return Node(self, len(self._values) - 1)

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    # leaves

    def param(self, value) -> Node:
        node = self._record("param", (), Tensor(value, op="param"))
        self._params.append(node)
        return node

    def const(self, value) -> Node:
        return self._record("const", (), Tensor(value, op="const"))

    # primitives

    def add(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        _broadcast_shape("add", a.shape, b.shape)
        return self._record("add", (a.id, b.id), a.value.data + b.value.data)

    def sub(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        _broadcast_shape("sub", a.shape, b.shape)
        return self._record("sub", (a.id, b.id), a.value.data - b.value.data)

    def mul(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        _broadcast_shape("mul", a.shape, b.shape)
        return self._record("mul", (a.id, b.id), a.value.data * b.value.data)

    def matmul(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return self._record("matmul", (a.id, b.id), a.value.data @ b.value.data)

    def conv2d(self, x, kernel) -> Node:
        """Valid-padding, stride-1 cross-correlation.

        ``x`` is (N, C, H, W) and ``kernel`` is (O, C, k, k); the output is
        (N, O, H - k + 1, W - k + 1).
        """
        x, kernel = self._node(x), self._node(kernel)
        xs, ks = x.shape, kernel.shape
        if (
            len(xs) != 4
            or len(ks) != 4
            or xs[1] != ks[1]
            or ks[2] != ks[3]
            or ks[2] > xs[2]
            or ks[3] > xs[3]
        ):
            raise ShapeError("conv2d", xs, ks)
        k = ks[2]
        windows = sliding_window_view(x.value.data, (k, k), axis=(2, 3))
        out = np.einsum("nchwij,ocij->nohw", windows, kernel.value.data, optimize=True)
        return self._record("conv2d", (x.id, kernel.id), out)

    def relu(self, a) -> Node:
        a = self._node(a)
        return self._record("relu", (a.id,), np.maximum(a.value.data, 0.0))

    def abs(self, a) -> Node:
        a = self._node(a)
        return self._record("abs", (a.id,), np.abs(a.value.data))

    def mean(self, a) -> Node:
        a = self._node(a)
        return self._record("mean", (a.id,), np.mean(a.value.data))

    def sum(self, a) -> Node:
        a = self._node(a)
        return self._record("sum", (a.id,), np.sum(a.value.data))

    def reshape(self, a, shape) -> Node:
        a = self._node(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.value.size:
            raise ShapeError("reshape", a.shape, shape)
        return self._record("reshape", (a.id,), a.value.data.reshape(shape), ctx=a.shape)

    def softmax_crossentropy(self, logits, labels) -> Node:
        """Per-sample ``-log softmax(logits)[label]``.

        ``logits`` is (B, C) with integer ``labels`` of length B, or (C,) with
        a single integer label (giving a scalar).
        """
        logits = self._node(logits)
        z = logits.value.data
        lab = np.asarray(labels)
        single = z.ndim == 1
        if single:
            z = z[None, :]
            lab = lab.reshape(1)
        if z.ndim != 2 or lab.shape != (z.shape[0],):
            raise ShapeError("softmax_crossentropy", logits.shape, lab.shape)
        if not np.issubdtype(lab.dtype, np.integer):
            raise ShapeError("softmax_crossentropy", logits.shape, lab.shape, detail="labels must be integers")
        if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
            raise ShapeError("softmax_crossentropy", logits.shape, lab.shape, detail="label out of range")
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(z.shape[0])
        losses = log_norm - shifted[rows, lab]
        probs = np.exp(shifted - log_norm[:, None])
        out = losses[0] if single else losses
        return self._record("softmax_crossentropy", (logits.id,), out, ctx=(probs, lab, single))

    # reverse sweep

    def backward(self, root) -> dict:
        """Gradient of scalar ``root`` w.r.t. every param leaf, keyed by node."""
        root = self._node(root)
        if root.value.size != 1:
            raise ShapeError("backward", root.shape, detail="root must be scalar")
        grads: list = [None] * (root.id + 1)
        grads[root.id] = np.ones(root.shape)
        for i in range(root.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            op = self._ops[i]
            if op in ("param", "const"):
                continue
            ins = self._inputs[i]
            for j, contrib in zip(ins, self._vjp(op, i, g)):
                if contrib is None:
                    continue
                grads[j] = contrib if grads[j] is None else grads[j] + contrib
        out = {}
        for p in self._params:
            g = grads[p.id] if p.id < len(grads) else None
            out[p] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out

    def _vjp(self, op, i, g):
        ins = [self._values[j].data for j in self._inputs[i]]
        if op == "add":
            a, b = ins
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        if op == "sub":
            a, b = ins
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        if op == "mul":
            a, b = ins
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        if op == "matmul":
            a, b = ins
            return g @ b.T, a.T @ g
        if op == "conv2d":
            x, kernel = ins
            k = kernel.shape[2]
            windows = sliding_window_view(x, (k, k), axis=(2, 3))
            dk = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
            padded = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            gwin = sliding_window_view(padded, (k, k), axis=(2, 3))
            dx = np.einsum("nohwab,ocab->nchw", gwin, kernel[:, :, ::-1, ::-1], optimize=True)
            return dx, dk
        if op == "relu":
            (a,) = ins
            return (g * (a > 0.0),)
        if op == "abs":
            (a,) = ins
            return (g * np.sign(a),)
        if op == "mean":
            (a,) = ins
            return (np.full(a.shape, float(g) / a.size),)
        if op == "sum":
            (a,) = ins
            return (np.full(a.shape, float(g)),)
        if op == "reshape":
            return (g.reshape(self._ctx[i]),)
        if op == "softmax_crossentropy":
            probs, lab, single = self._ctx[i]
            d = probs.copy()
            d[np.arange(d.shape[0]), lab] -= 1.0
            if single:
                return (d[0] * float(g),)
            return (d * g[:, None],)
        raise AssertionError(f"no vjp for {op}")


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], w, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not step > 0:
        raise ValueError("step must be positive")
    w = np.array(getattr(w, "values", w), dtype=np.float64)
    flat = w.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn(w))
        flat[i] = orig - step
        lo = float(loss_fn(w))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(w.shape)
