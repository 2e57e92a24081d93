"""Rank correlation between a measure and the generalization gap.

Also evaluates the complexity term of the adaptive-sharpness PAC-Bayes
bound as a diagnostic.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeasureGapPair",
    "HyperGrid",
    "BoundInputs",
    "kendall_tau",
    "granulated_coefficients",
    "pac_bayes_penalty",
    "generalization_gap",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeasureGapPair:
    measure: float
    gap: float

    def __post_init__(self):
        if not (math.isfinite(self.measure) and math.isfinite(self.gap)):
            raise ValueError(f"non-finite pair ({self.measure}, {self.gap})")


@dataclass
class HyperGrid:
    """Records indexed by full hyperparameter tuples (one value per axis)."""

    axes: list
    records: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = [(name, list(values)) for name, values in self.axes]
        for key in self.records:
            self._check_key(key)

    @property
    def names(self) -> list:
        return [name for name, _ in self.axes]

    def _check_key(self, key):
        if len(key) != len(self.axes):
            raise ValueError(f"record {key} does not have one value per axis")
        for (name, values), v in zip(self.axes, key):
            if v not in values:
                raise ValueError(f"value {v!r} not on axis {name!r}")

    def add(self, key, pair: MeasureGapPair):
        key = tuple(key)
        self._check_key(key)
        if key in self.records:
            raise ValueError(f"duplicate record {key}")
        self.records[key] = pair


def kendall_tau(pairs) -> float:
    """``2/(n(n-1)) * sum_{i<j} sign(m_i - m_j) sign(g_i - g_j)``; ties count 0."""
    pairs = list(pairs)
    n = len(pairs)
    if n < 2:
        raise ValueError(f"kendall_tau needs at least 2 pairs, got {n}")
    m = np.array([p.measure for p in pairs])
    g = np.array([p.gap for p in pairs])
    iu = np.triu_indices(n, k=1)
    dm = np.sign(m[:, None] - m[None, :])[iu]
    dg = np.sign(g[:, None] - g[None, :])[iu]
    total = int(np.sum(dm * dg))
    return 2.0 * total / (n * (n - 1))


def granulated_coefficients(grid: HyperGrid) -> tuple:
    """Per-axis granulated coefficients psi and their mean Psi.

    psi_i averages tau over every fixed setting of the other axes, taking
    tau along axis i only. Slices with fewer than two records are skipped.
    """
    psis = {}
    for i, (name, values) in enumerate(grid.axes):
        others = [vals for j, (_, vals) in enumerate(grid.axes) if j != i]
        taus = []
        for fixed in itertools.product(*others):
            slice_pairs = []
            for v in values:
                key = fixed[:i] + (v,) + fixed[i:]
                if key in grid.records:
                    slice_pairs.append(grid.records[key])
            if len(slice_pairs) < 2:
                logger.warning("axis %s: slice %s has %d record(s), skipped", name, fixed, len(slice_pairs))
                continue
            taus.append(kendall_tau(slice_pairs))
        if not taus:
            raise ValueError(f"axis {name!r}: no slice has two or more records")
        psis[name] = float(np.mean(taus))
    return psis, float(np.mean(list(psis.values())))


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the bound's complexity term.

    ``rho`` relates to the prior's sigma via
    ``rho = sqrt(k) * sigma * (1 + sqrt(log(n) / k)) / eta``; only ``rho``
    is consumed here.
    """

    k: int
    n: float
    delta: float
    rho: float
    eta: float
    weight_norm: float
    C: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.n > 1:
            raise ValueError("n must be > 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.C < 0:
            raise ValueError("C must be >= 0")


def pac_bayes_penalty(b: BoundInputs) -> float:
    """``sqrt((k log(1 + |w|^2/(eta rho)^2 (1 + sqrt(log n / k))^2) + 4 log(n/delta) + C) / (n - 1))``."""
    scale = b.eta * b.rho
    if scale == 0:
        raise ZeroDivisionError("eta * rho must be nonzero")
    growth = (1.0 + math.sqrt(math.log(b.n) / b.k)) ** 2
    inner = b.k * math.log1p(b.weight_norm**2 / scale**2 * growth) + 4.0 * math.log(b.n / b.delta) + b.C
    return math.sqrt(inner / (b.n - 1.0))


def generalization_gap(train: float, test: float, kind: str = "loss") -> float:
    """Test minus train for losses/errors; train minus test for accuracies."""
    if not (math.isfinite(train) and math.isfinite(test)):
        raise ValueError("metrics must be finite")
    if kind in ("loss", "error"):
        return test - train
    if kind == "accuracy":
        return train - test
    raise ValueError(f"unknown metric kind {kind!r}")
