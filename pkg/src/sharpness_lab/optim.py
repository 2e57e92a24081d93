"""Base optimizers and the SAM / ASAM two-step update.

An *objective* throughout is a callable mapping a raw parameter array to
``(loss, gradient)``. :func:`models.model_objective` builds one for
a model and a batch; the toy loss provides another.

One two-step update:

1. ``g = grad L(w)``
2. ``eps`` from ``g`` (SAM: ``rho g / ||g||``; ASAM: ``rho T^2 g / ||T g||``
   for p=2, ``rho T sign(g)`` for p=inf)
3. ``w <- base_update(w, grad L(w + eps) + lambda w)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError
from .models import ParameterVector, model_objective
from .normops import PerturbationConfig, make_operator

__all__ = [
    "OptimizerState",
    "init_state",
    "learning_rate",
    "base_step",
    "sam_ascent",
    "asam_ascent",
    "perturbation",
    "sharpness_aware_grad",
    "two_step_update",
    "plain_update",
    "m_sharpness_grad",
]

ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    t: int = 0
    buf: np.ndarray = None
    m1: np.ndarray = None
    m2: np.ndarray = None
    last_loss: float = math.nan


def init_state(
    kind: str,
    k: int,
    lr: float,
    *,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    schedule: str = "constant",
    total_steps: int = 0,
    beta1: float = 0.9,
    beta2: float = 0.98,
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ConfigError(f"unknown base optimizer {kind!r}")
    if schedule not in ("constant", "cosine"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    if schedule == "cosine" and total_steps < 1:
        raise ConfigError("cosine schedule needs total_steps >= 1")
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    z = np.zeros(k)
    return OptimizerState(
        kind=kind,
        lr=lr,
        momentum=momentum,
        weight_decay=weight_decay,
        schedule=schedule,
        total_steps=total_steps,
        beta1=beta1,
        beta2=beta2,
        buf=z.copy(),
        m1=z.copy() if kind == "adam" else None,
        m2=z.copy() if kind == "adam" else None,
    )


def learning_rate(state: OptimizerState) -> float:
    if state.schedule == "constant":
        return state.lr
    frac = min(state.t, state.total_steps) / state.total_steps
    return 0.5 * state.lr * (1.0 + math.cos(math.pi * frac))


def base_step(values: np.ndarray, grad: np.ndarray, state: OptimizerState) -> tuple:
    """Apply one SGD/Adam update with ``grad + weight_decay * values``."""
    values = np.asarray(values, dtype=np.float64)
    if state.buf.shape != values.shape:
        raise ValueError("optimizer state does not match parameter length")
    lr = learning_rate(state)
    # overflow is reported by the caller's finiteness check, not by numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        eff = grad + state.weight_decay * values
        if state.kind == "sgd":
            buf = state.momentum * state.buf + eff if state.momentum else eff
            return values - lr * buf, replace(state, t=state.t + 1, buf=buf)
        t = state.t + 1
        m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * eff
        m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * eff * eff
        mhat = m1 / (1.0 - state.beta1**t)
        vhat = m2 / (1.0 - state.beta2**t)
        new = values - lr * mhat / (np.sqrt(vhat) + state.adam_eps)
    return new, replace(state, t=t, m1=m1, m2=m2)


def sam_ascent(grad, rho: float) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if norm < ZERO_NORM:
        return np.zeros_like(grad)
    return rho * grad / norm


def asam_ascent(w, grad, cfg: PerturbationConfig) -> np.ndarray:
    """Closed-form first-order maximizer over ``||T^-1 eps||_p <= rho``."""
    grad = np.asarray(grad, dtype=np.float64)
    scales = make_operator(w, cfg).scales
    if math.isinf(cfg.p):
        return cfg.rho * scales * np.sign(grad)
    tg = scales * grad
    norm = np.linalg.norm(tg)
    if norm < ZERO_NORM:
        return np.zeros_like(grad)
    return cfg.rho * scales * tg / norm


def perturbation(w, grad, cfg: PerturbationConfig, use_asam: bool = True) -> np.ndarray:
    if use_asam:
        return asam_ascent(w, grad, cfg)
    return sam_ascent(grad, cfg.rho)


def _evaluate(objective, values, step):
    try:
        loss, grad = objective(values)
    except NumericError as exc:
        raise DivergenceError(f"non-finite loss ({exc})", step=step) from None
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite loss", step=step)
    return loss, np.asarray(grad, dtype=np.float64)


def sharpness_aware_grad(w: ParameterVector, objective, cfg: PerturbationConfig, use_asam=True, step=None):
    """Return ``(L(w), eps, grad L(w + eps))``."""
    loss, grad = _evaluate(objective, w.values, step)
    eps = perturbation(w, grad, cfg, use_asam)
    if not np.all(np.isfinite(w.values + eps)):
        raise DivergenceError("non-finite perturbed weights", step=step)
    _, pgrad = _evaluate(objective, w.values + eps, step)
    return loss, eps, pgrad


def two_step_update(w: ParameterVector, state: OptimizerState, objective, cfg: PerturbationConfig, use_asam=True):
    """One SAM (``use_asam=False``) or ASAM step. Returns ``(w', state')``.

    The perturbation is only used to pick the gradient; ``w`` itself moves by
    the base optimizer.
    """
    loss, _, pgrad = sharpness_aware_grad(w, objective, cfg, use_asam, step=state.t)
    return _finish(w, pgrad, state, loss)


def plain_update(w: ParameterVector, state: OptimizerState, objective):
    loss, grad = _evaluate(objective, w.values, state.t)
    return _finish(w, grad, state, loss)


def _finish(w, grad, state, loss):
    new, state = base_step(w.values, grad, state)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("non-finite parameters after update", step=state.t - 1)
    return w.with_values(new), replace(state, last_loss=loss)


def _chunks(n: int, m: int):
    if m <= 0:
        raise ValueError(f"m must be a positive integer, got {m}")
    return [(i, min(i + m, n)) for i in range(0, n, m)]


def m_sharpness_grad(w: ParameterVector, spec, batch, m: int, cfg: PerturbationConfig, use_asam=True, step=None):
    """Average over size-``m`` chunks of each chunk's own ``grad L_chunk(w + eps_chunk)``.

    Chunks are consecutive; a short final chunk is weighted like the others.
    Returns ``(mean chunk loss, gradient)``.
    """
    x, y = batch
    spans = _chunks(len(y), m)
    losses, grads = [], []
    for lo, hi in spans:
        obj = model_objective(spec, w.layout, (x[lo:hi], y[lo:hi]))
        loss, _, pgrad = sharpness_aware_grad(w, obj, cfg, use_asam, step=step)
        losses.append(loss)
        grads.append(pgrad)
    return float(np.mean(losses)), np.mean(grads, axis=0)
