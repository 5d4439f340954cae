"""Threshold schedule, class error term and gate decisions.

The gate drops the classification loss of a matched object instance whose
predicted class probabilities are already within ``N(t)`` of the one-hot
target (Chebyshev distance). ``N(t)`` decays exponentially per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ThresholdSchedule:
    """Exponential per-epoch threshold ``n0 * exp(-lambda * t)``."""

    n0: float
    n_final: float
    total_epochs: int
    decay: float  # lambda

    def threshold_at(self, epoch: int) -> float:
        return threshold_at(self, epoch)

    def trace(self) -> np.ndarray:
        """Thresholds for epochs ``0..total_epochs`` inclusive."""
        return np.array([threshold_at(self, t) for t in range(self.total_epochs + 1)])


@dataclass(frozen=True)
class GateDecision:
    error: float
    threshold: float
    gated: bool


def make_schedule(n0: float, n_final: float, total_epochs: int) -> ThresholdSchedule:
    if not (0.0 < n0 <= 1.0):
        raise ValueError(f"n0 must lie in (0, 1], got {n0}")
    if not (0.0 < n_final <= n0):
        raise ValueError(f"n_final must lie in (0, n0={n0}], got {n_final}")
    if int(total_epochs) != total_epochs or total_epochs < 1:
        raise ValueError(f"total_epochs must be a positive integer, got {total_epochs}")
    decay = math.log(n0 / n_final) / total_epochs
    return ThresholdSchedule(float(n0), float(n_final), int(total_epochs), decay)


def threshold_at(schedule: ThresholdSchedule, epoch: int) -> float:
    if not (0 <= epoch <= schedule.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    return schedule.n0 * math.exp(-schedule.decay * epoch)


def _check_probs(name: str, v: np.ndarray) -> None:
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d vector")
    if not np.all((v >= 0.0) & (v <= 1.0)):
        raise ValueError(f"{name} entries must lie in [0, 1]")


def class_error(truth, predicted) -> float:
    """Chebyshev distance between ground-truth and predicted class vectors."""
    p = np.asarray(truth, dtype=np.float64)
    q = np.asarray(predicted, dtype=np.float64)
    _check_probs("truth", p)
    _check_probs("predicted", q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    return float(np.max(np.abs(p - q)))


def class_errors(truth: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Row-wise :func:`class_error` for ``(n, c)`` arrays (no range checks)."""
    return np.max(np.abs(truth - predicted), axis=-1) if len(truth) else np.zeros(0)


def gate_flags(errors, threshold: float) -> np.ndarray:
    """Boolean mask ``errors < threshold``."""
    e = np.asarray(errors, dtype=np.float64)
    if threshold < 0:
        raise ValueError(f"threshold must be nonnegative, got {threshold}")
    if e.size and not np.all((e >= 0.0) & (e <= 1.0)):
        raise ValueError("errors must lie in [0, 1]")
    return e < threshold


def gate_mask(errors, threshold: float) -> list[GateDecision]:
    flags = gate_flags(errors, threshold)
    return [
        GateDecision(float(e), float(threshold), bool(g))
        for e, g in zip(np.asarray(errors, dtype=np.float64).ravel(), flags.ravel())
    ]
