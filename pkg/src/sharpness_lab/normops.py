"""Diagonal normalization operators for adaptive sharpness.

An operator is stored as the diagonal of ``T_w + eta * I``. Perturbations
live in the ball ``||T^-1 eps||_p <= rho``; ``apply`` maps a transformed
vector back to weight space and ``apply_inverse`` goes the other way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "SCHEMES",
    "NormalizationOperator",
    "PerturbationConfig",
    "elementwise_T",
    "filterwise_T",
    "identity_T",
    "make_operator",
    "apply",
    "apply_inverse",
]

SCHEMES = ("identity", "elementwise", "filterwise")
_SCHEME_ALIASES = {"none": "identity", "identity": "identity", "elementwise": "elementwise", "filterwise": "filterwise"}


def _parse_p(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "∞"):
            return math.inf
    try:
        p = float(p)
    except (TypeError, ValueError):
        raise ConfigError(f"p must be 2 or inf, got {p!r}") from None
    if p not in (2.0, math.inf):
        raise ConfigError(f"p must be 2 or inf, got {p!r}")
    return p


@dataclass(frozen=True, eq=False)
class NormalizationOperator:
    scales: np.ndarray
    scheme: str
    eta: float
    bias_normalized: bool

    def __post_init__(self):
        s = np.array(self.scales, dtype=np.float64)
        s.setflags(write=False)
        object.__setattr__(self, "scales", s)


@dataclass(frozen=True)
class PerturbationConfig:
    """Radius, norm and normalization choice for one perturbation ball.

    ``rho = 0`` is accepted and yields a zero perturbation; it is how the
    reduction to the base optimizer is exercised.
    """

    rho: float = 0.5
    p: float = 2.0
    scheme: str = "elementwise"
    eta: float = 0.01
    bias_normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", _parse_p(self.p))
        scheme = _SCHEME_ALIASES.get(str(self.scheme).lower())
        if scheme is None:
            raise ConfigError(f"unknown normalization scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", scheme)
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ConfigError(f"eta must be >= 0, got {self.eta}")

    @property
    def label(self) -> str:
        p = "inf" if math.isinf(self.p) else "2"
        return f"{self.scheme}-p{p}-rho{self.rho:g}"

    @classmethod
    def sam(cls, rho: float, p=2.0) -> "PerturbationConfig":
        return cls(rho=rho, p=p, scheme="identity", eta=0.0)


def _unnormalize_biases(scales, layout, bias_normalized):
    if not bias_normalized and layout is not None:
        scales[layout.bias_mask] = 1.0
    return scales


def _values(w):
    return np.asarray(getattr(w, "values", w), dtype=np.float64)


def identity_T(w) -> NormalizationOperator:
    return NormalizationOperator(np.ones(_values(w).shape[0]), "identity", 0.0, True)


def elementwise_T(w, eta: float = 0.01, bias_normalized: bool = False) -> NormalizationOperator:
    scales = np.abs(_values(w)) + eta
    _unnormalize_biases(scales, getattr(w, "layout", None), bias_normalized)
    return NormalizationOperator(scales, "elementwise", eta, bias_normalized)


def filterwise_T(w, eta: float = 0.01, bias_normalized: bool = False) -> NormalizationOperator:
    """Filter coordinates share their filter's L2 norm; the rest are element-wise."""
    v = _values(w)
    layout = getattr(w, "layout", None)
    scales = np.abs(v)
    for start, stop in getattr(layout, "filter_groups", ()):
        scales[start:stop] = np.linalg.norm(v[start:stop])
    scales += eta
    _unnormalize_biases(scales, layout, bias_normalized)
    return NormalizationOperator(scales, "filterwise", eta, bias_normalized)


def make_operator(w, cfg: PerturbationConfig) -> NormalizationOperator:
    if cfg.scheme == "identity":
        return identity_T(w)
    if cfg.scheme == "elementwise":
        return elementwise_T(w, cfg.eta, cfg.bias_normalized)
    return filterwise_T(w, cfg.eta, cfg.bias_normalized)


def apply(op: NormalizationOperator, v) -> np.ndarray:
    return op.scales * np.asarray(v, dtype=np.float64)


def apply_inverse(op: NormalizationOperator, v) -> np.ndarray:
    if np.any(op.scales == 0):
        raise ZeroDivisionError(
            f"{op.scheme} operator has zero scales and cannot be inverted; use eta > 0"
        )
    return np.asarray(v, dtype=np.float64) / op.scales
