"""Sharpness and adaptive sharpness of a parameter vector.

``max_{||T^-1 eps||_p <= rho} L(w + eps) - L(w)`` is approximated either by
the closed-form first-order maximizer (``steps=1``) or by projected ascent
on ``u = T^-1 eps`` inside the ``rho`` ball. The identity scheme gives plain
sharpness. ``eps = 0`` is always feasible, so the reported maximum is the
best loss seen including the unperturbed one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .models import ModelSpec, ParameterVector, model_objective
from .normops import PerturbationConfig, make_operator
from .optim import _chunks, asam_ascent

__all__ = [
    "SharpnessReport",
    "estimate_sharpness",
    "m_sharpness_estimate",
    "model_sharpness",
]


@dataclass(frozen=True)
class SharpnessReport:
    base_loss: float
    perturbed_loss: float
    sharpness: float
    cfg: PerturbationConfig
    method: str
    m: object = "full"
    history: tuple = field(default=(), repr=False)


def _loss(objective, values):
    try:
        loss, grad = objective(values)
    except NumericError as exc:
        raise NumericError(f"perturbed loss is not finite: {exc}") from None
    if not math.isfinite(loss):
        raise NumericError("perturbed loss is not finite")
    return loss, np.asarray(grad, dtype=np.float64)


def _project(u, rho, p):
    if math.isinf(p):
        return np.clip(u, -rho, rho)
    norm = np.linalg.norm(u)
    if norm > rho:
        return u * (rho / norm)
    return u


def estimate_sharpness(
    w: ParameterVector, objective, cfg: PerturbationConfig, steps: int = 1, seed: int = 0
) -> SharpnessReport:
    """Estimate (adaptive) sharpness of ``w`` under ``objective``.

    ``steps`` counts perturbed-loss evaluations. The first is the closed-form
    ascent point; the remaining ``steps - 1`` follow normalized ascent steps
    of length ``rho / steps`` in the transformed space. When the gradient
    vanishes the ascent starts from a seeded random point on the boundary.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    base, grad = _loss(objective, w.values)
    eps = asam_ascent(w, grad, cfg)
    best = base
    history = []

    scales = make_operator(w, cfg).scales
    active = scales > 0
    u = np.zeros_like(eps)
    u[active] = eps[active] / scales[active]
    if steps > 1 and not np.any(u) and cfg.rho > 0:
        rng = np.random.default_rng(seed)
        u[active] = rng.standard_normal(int(active.sum()))
        u = _project(u * (10.0 * cfg.rho / max(np.linalg.norm(u), 1e-300)), cfg.rho, cfg.p)
    lr = cfg.rho / steps
    for i in range(steps):
        loss, g = _loss(objective, w.values + scales * u)
        best = max(best, loss)
        history.append(best - base)
        if i == steps - 1:
            break
        d = scales * g
        if math.isinf(cfg.p):
            u = u + lr * np.sign(d)
        else:
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                break
            u = u + lr * d / norm
        u = _project(u, cfg.rho, cfg.p)
    method = "one-step" if steps == 1 else f"{steps}-step"
    return SharpnessReport(base, best, best - base, cfg, method, "full", tuple(history))


def m_sharpness_estimate(
    w: ParameterVector, spec: ModelSpec, data, cfg: PerturbationConfig, m: int, steps: int = 1
) -> SharpnessReport:
    """Mean of per-chunk sharpness over consecutive chunks of ``m`` samples."""
    x, y = data
    reports = []
    for lo, hi in _chunks(len(y), m):
        obj = model_objective(spec, w.layout, (x[lo:hi], y[lo:hi]))
        reports.append(estimate_sharpness(w, obj, cfg, steps))
    base = float(np.mean([r.base_loss for r in reports]))
    pert = float(np.mean([r.perturbed_loss for r in reports]))
    sharp = float(np.mean([r.sharpness for r in reports]))
    return SharpnessReport(base, pert, sharp, cfg, reports[0].method, m)


def model_sharpness(
    w: ParameterVector, spec: ModelSpec, data, cfg: PerturbationConfig, steps: int = 1, m=None
) -> SharpnessReport:
    """Full-data estimate, or m-sharpness when ``m`` is given."""
    if m is None or m == "full":
        return estimate_sharpness(w, model_objective(spec, w.layout, data), cfg, steps)
    return m_sharpness_estimate(w, spec, data, cfg, int(m), steps)
