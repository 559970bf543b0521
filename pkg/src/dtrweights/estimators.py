"""Value estimators (plain/augmented, unnormalized/normalized) and their variances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NoAdherersError, WeightSeries
from .weighting import ess

ESTIMATOR_NAMES = (
    "ipw", "nipw", "aipw", "naipw",
    "gaw", "ngaw", "agaw", "nagaw",
    "baw", "nbaw", "abaw", "nabaw",
)


@dataclass(frozen=True)
class EstimatorTag:
    kind: str  # "IPW" | "GAW" | "BAW"
    augmented: bool
    normalized: bool

    @classmethod
    def parse(cls, name: str) -> "EstimatorTag":
        s = name.lower()
        if s not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}")
        normalized = s.startswith("n")
        s = s[1:] if normalized else s
        augmented = s in ("aipw", "agaw", "abaw")
        kind = s[1:] if augmented else s
        return cls(kind.upper(), augmented, normalized)

    @property
    def name(self) -> str:
        return ("n" if self.normalized else "") + ("a" if self.augmented else "") + self.kind.lower()


@dataclass(frozen=True)
class ValueEstimate:
    estimator: str
    value: float
    variance: float | None = None
    ess: float | None = None
    diagnostics: dict = field(default_factory=dict)


def value_plain(Y, terminal_weights, normalized: bool = True) -> float:
    """``mean(w Y)`` or the self-normalized ``sum(w Y) / sum(w)``."""
    w = np.asarray(terminal_weights, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if normalized:
        s = w.sum()
        if s <= 0:
            raise NoAdherersError("terminal weights sum to zero")
        return float(np.dot(w, Y) / s)
    return float(np.dot(w, Y) / Y.shape[0])


def value_augmented(Q, cum_weights, normalized: bool = True) -> float:
    """Augmented estimator from ``Q`` (``(n, T+1)``, last column ``Y``) and cumulative weights ``(n, T)``."""
    Q = np.asarray(Q, dtype=float)
    W = np.asarray(cum_weights, dtype=float)
    n, T = W.shape
    delta = Q[:, 1:] - Q[:, :-1]
    base = Q[:, 0].mean()
    if normalized:
        S = W.sum(axis=0)
        for t in np.flatnonzero(S <= 0):
            raise NoAdherersError(f"cumulative weights at stage {t + 1} sum to zero")
        return float(base + np.sum(np.sum(W * delta, axis=0) / S))
    return float(base + np.sum(W * delta) / n)


def analytical_variance_plain(Y, terminal_weights, point: float) -> float:
    """Sandwich variance of the self-normalized estimator.

    ``(1/n^2) sum w^2 (Y - V)^2 / Jbar^2`` with ``Jbar = mean(w)`` (population
    divisor ``n`` throughout).
    """
    w = np.asarray(terminal_weights, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = w.shape[0]
    J = w.mean()
    if J <= 0:
        raise NoAdherersError("terminal weights sum to zero")
    return float(np.sum(w**2 * (Y - point) ** 2) / n**2 / J**2)


def augmented_influence(Q, cum_weights, point: float) -> np.ndarray:
    """Estimating-function values ``U_i`` of the normalized augmented estimator."""
    Q = np.asarray(Q, dtype=float)
    W = np.asarray(cum_weights, dtype=float)
    n = W.shape[0]
    S = W.sum(axis=0)
    for t in np.flatnonzero(S <= 0):
        raise NoAdherersError(f"cumulative weights at stage {t + 1} sum to zero")
    delta = Q[:, 1:] - Q[:, :-1]
    return np.sum(W * delta / S, axis=1) + (Q[:, 0] - point) / n


def analytical_variance_augmented(Q, cum_weights, point: float) -> float:
    """``n * mean(U^2) = sum U_i^2`` for the normalized augmented estimator."""
    U = augmented_influence(Q, cum_weights, point)
    return float(np.dot(U, U))


def bias_bound(theta, y_range: float) -> float:
    """Worst-case ``(1 - min theta) * y_range`` bound on the GAW bias."""
    return float((1.0 - np.min(theta)) * y_range)


def estimate(tag: EstimatorTag, Y, weights: WeightSeries, Q=None, with_variance: bool = True) -> ValueEstimate:
    """Point value, ESS and (for normalized variants) analytical variance."""
    diag: dict = {}
    if tag.augmented:
        if Q is None:
            raise ValueError("augmented estimators need Q-function values")
        value = value_augmented(Q, weights.cum, tag.normalized)
        var = analytical_variance_augmented(Q, weights.cum, value) if tag.normalized and with_variance else None
    else:
        value = value_plain(Y, weights.terminal, tag.normalized)
        var = analytical_variance_plain(Y, weights.terminal, value) if tag.normalized and with_variance else None
    if var is not None and tag.kind == "BAW":
        diag["variance_note"] = "heuristic: ignores window-selection randomness"
    w_T = weights.terminal
    return ValueEstimate(tag.name, value, var, ess(w_T) if w_T.sum() > 0 else None, diag)
