"""Shared generators for tests: random nets, random op programs, the toy objective."""

import numpy as np

from sharpness_lab.autodiff import Graph, finite_difference_gradient
from sharpness_lab.models import ModelSpec, build_model

KINK_MARGIN = 1e-3


def random_mlp(rng, max_params=1000):
    """Small random ReLU MLP with one or two hidden layers and <= max_params."""
    while True:
        widths = [int(rng.integers(2, 6))]
        widths += [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))]
        widths.append(int(rng.integers(2, 5)))
        spec = ModelSpec.mlp(*widths)
        w = build_model(spec, int(rng.integers(2**31)))
        if w.layout.k <= max_params:
            return spec, w


def random_batch(rng, spec, n=16):
    x = rng.standard_normal((n,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, size=n)
    return x, y


# random op programs

UNARY = ("relu", "abs")
BINARY = ("add", "sub", "mul")


def random_program(rng):
    """A random straight-line program over the differentiable primitives.

    Returns ``(program, leaves)``: ``program`` is a dict consumed by
    :func:`run_program` and ``leaves`` the initial parameter arrays.
    """
    batch = int(rng.integers(1, 4))
    leaves = []
    steps = []
    if rng.random() < 0.4:
        c, k = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h = w = int(rng.integers(k, k + 3))
        o = int(rng.integers(1, 4))
        x = rng.standard_normal((batch, c, h, w))
        leaves.append(0.5 * rng.standard_normal((o, c, k, k)))
        steps.append(("conv", len(leaves) - 1))
        width = o * (h - k + 1) * (w - k + 1)
        steps.append(("flatten",))
    else:
        width = int(rng.integers(1, 5))
        x = rng.standard_normal((batch, width))
    for _ in range(int(rng.integers(1, 6))):
        kind = rng.choice(["unary", "binary", "matmul"])
        if kind == "unary":
            steps.append((str(rng.choice(UNARY)),))
        elif kind == "binary":
            shape = (width,) if rng.random() < 0.5 else (batch, width)
            leaves.append(0.5 * rng.standard_normal(shape) + (1.0 if rng.random() < 0.3 else 0.0))
            steps.append((str(rng.choice(BINARY)), len(leaves) - 1))
        else:
            new_width = int(rng.integers(1, 5))
            leaves.append(rng.standard_normal((width, new_width)) / np.sqrt(width))
            steps.append(("matmul", len(leaves) - 1))
            width = new_width
    head = str(rng.choice(["mean", "sum", "xent"] if width >= 2 else ["mean", "sum"]))
    labels = rng.integers(0, width, size=batch)
    return {"x": x, "steps": steps, "head": head, "labels": labels}, leaves


def run_program(program, arrays):
    """Execute on a fresh graph; returns (graph, root, params, kink inputs)."""
    g = Graph()
    params = [g.param(a) for a in arrays]
    h = g.const(program["x"])
    kinks = []
    for step in program["steps"]:
        op = step[0]
        if op == "conv":
            h = g.conv2d(h, params[step[1]])
        elif op == "flatten":
            h = g.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        elif op in UNARY:
            kinks.append(h.value.data)
            h = getattr(g, op)(h)
        elif op == "matmul":
            h = g.matmul(h, params[step[1]])
        else:
            h = getattr(g, op)(h, params[step[1]])
    if program["head"] == "mean":
        root = g.mean(h)
    elif program["head"] == "sum":
        root = g.sum(h)
    else:
        root = g.mean(g.softmax_crossentropy(h, program["labels"]))
    return g, root, params, kinks


def away_from_kinks(program, leaves) -> bool:
    _, _, _, kinks = run_program(program, leaves)
    return all(np.min(np.abs(k)) >= KINK_MARGIN for k in kinks if k.size)


def program_gradients(program, leaves):
    """(reverse-mode gradient, central-difference gradient), both flattened."""
    g, root, params, _ = run_program(program, leaves)
    grads = g.backward(root)
    ad = np.concatenate([grads[p].reshape(-1) for p in params]) if params else np.zeros(0)
    sizes = [a.size for a in leaves]
    shapes = [a.shape for a in leaves]

    def loss(flat):
        arrays, pos = [], 0
        for n, s in zip(sizes, shapes):
            arrays.append(flat[pos : pos + n].reshape(s))
            pos += n
        return run_program(program, arrays)[1].value.item()

    flat0 = np.concatenate([a.reshape(-1) for a in leaves]) if leaves else np.zeros(0)
    fd = finite_difference_gradient(loss, flat0, step=1e-6)
    return ad, fd


def relative_error(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def sample_program(rng):
    """Draw programs until one sits at least KINK_MARGIN from every kink."""
    while True:
        program, leaves = random_program(rng)
        if leaves and away_from_kinks(program, leaves):
            return program, leaves
