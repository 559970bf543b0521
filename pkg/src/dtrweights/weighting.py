"""IPW, generalized-adherence and windowed weights, plus weight diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Direction,
    GawConfig,
    NoAdherersError,
    Panel,
    Regime,
    WeightKind,
    WeightSeries,
    WindowSpec,
    recommended_actions,
)

GAMMA_CAP = 1 - 1e-9


def observed_probability(panel: Panel, p_treat: np.ndarray) -> np.ndarray:
    """``P(A_t = observed a_t | history)`` from the ``(n, T)`` treat probabilities."""
    return np.where(panel.A == 1, p_treat, 1.0 - p_treat)


def gamma_from_constraint(eps_t, p_t, cap: float | None = GAMMA_CAP):
    """Largest relaxation keeping ``1 - p_t / D_t <= eps_t``.

    ``gamma = eps_t * p_t / ((1 - eps_t) * (1 - p_t))``, optionally capped
    below 1. Works elementwise on arrays.
    """
    p = np.asarray(p_t, dtype=float)
    if np.any(p >= 1) or np.any(p <= 0):
        raise ValueError("adherence probability must lie strictly inside (0, 1)")
    eps = np.asarray(eps_t, dtype=float)
    gamma = eps * p / ((1.0 - eps) * (1.0 - p))
    if cap is not None:
        gamma = np.minimum(gamma, cap)
    return gamma if gamma.ndim else float(gamma)


def gaw_stage_weight(adherent, p_t, gamma_t):
    """Compatibility score over the stabilizing denominator, ``m / D``."""
    p = np.asarray(p_t, dtype=float)
    g = np.asarray(gamma_t, dtype=float)
    D = p + g * (1.0 - p)
    m = np.where(adherent, 1.0, g)
    w = m / D
    return w if w.ndim else float(w)


def ipw_weights(panel: Panel, regime: Regime, p_treat: np.ndarray) -> WeightSeries:
    """Indicator of strict adherence over the observed-treatment probability."""
    adherent = panel.A == recommended_actions(regime, panel)
    w = np.where(adherent, 1.0, 0.0) / observed_probability(panel, p_treat)
    return WeightSeries(w, WeightKind.IPW, source=None)


@dataclass(frozen=True)
class GawStageQuantities:
    p: np.ndarray
    gamma: np.ndarray
    m: np.ndarray
    D: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.p / self.D

    @property
    def theta(self) -> np.ndarray:
        """Per-individual product of ``p_t / D_t`` over stages."""
        return np.prod(self.ratio, axis=1)


def gaw_weights(panel: Panel, regime: Regime, p_treat: np.ndarray, config: GawConfig, gamma=None):
    """Generalized adherence weights.

    ``gamma`` may override the bias-constraint schedule with an ``(n, T)``
    array. Returns ``(WeightSeries, GawStageQuantities, n_capped)``.
    """
    d = recommended_actions(regime, panel)
    adherent = panel.A == d
    p = np.where(d == 1, p_treat, 1.0 - p_treat)
    n_capped = 0
    if gamma is None:
        eps_t = config.eps_t(panel.n, panel.T)
        raw = gamma_from_constraint(eps_t, p, cap=None)
        n_capped = int(np.sum(raw > config.gamma_cap))
        gamma = np.minimum(raw, config.gamma_cap)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), p.shape)
    D = p + gamma * (1.0 - p)
    m = np.where(adherent, 1.0, gamma)
    w = m / D
    q = GawStageQuantities(p, gamma, m, D)
    return WeightSeries(w, WeightKind.GAW, source=config), q, n_capped


def window_compatible(regime: Regime, window: WindowSpec, stage: int, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Stage compatibility of observed actions ``a`` under the windowed regime.

    Treat is compatible inside the widened treat region, control inside the
    complement of the shrunk treat region, so both actions are compatible
    inside the tolerance band.
    """
    x = np.atleast_2d(x)
    wide = np.ones(x.shape[0], dtype=bool)
    narrow = np.ones(x.shape[0], dtype=bool)
    for c, (lo, hi) in zip(regime.stages[stage], window.bounds[stage]):
        v = x[:, c.index]
        if c.direction is Direction.LE:
            wide &= v <= c.threshold + hi
            narrow &= v <= c.threshold - lo
        else:
            wide &= v >= c.threshold - lo
            narrow &= v >= c.threshold + hi
    return ((a == regime.treat_action) & wide) | ((a == regime.control_action) & ~narrow)


def windowed_compatibility(regime: Regime, window: WindowSpec, panel: Panel, i: int, t: int) -> bool:
    return bool(window_compatible(regime, window, t, panel.X[t][i : i + 1], panel.A[i : i + 1, t])[0])


def baw_weights(panel: Panel, regime: Regime, window: WindowSpec, p_treat: np.ndarray) -> WeightSeries:
    compat = np.column_stack(
        [window_compatible(regime, window, t, panel.X[t], panel.A[:, t]) for t in range(panel.T)]
    )
    w = np.where(compat, 1.0, 0.0) / observed_probability(panel, p_treat)
    return WeightSeries(w, WeightKind.BAW, source=window)


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    top = w.max(initial=0.0)
    if top <= 0:
        raise NoAdherersError("all weights are zero")
    w = w / top  # scale-free; avoids underflow in the squares
    s = w.sum()
    return float(s * s / np.dot(w, w))


def weight_spread(weights, lo_pct: float = 1.0, hi_pct: float = 99.0) -> float:
    """Difference of two percentiles (linear interpolation between closest ranks)."""
    if hi_pct < lo_pct:
        raise ValueError("hi_pct must be >= lo_pct")
    lo, hi = np.percentile(np.asarray(weights, dtype=float), [lo_pct, hi_pct], method="linear")
    return float(hi - lo)


def smd(covariate, groups, weights=None) -> float:
    """Standardized mean difference, group 1 minus group 0.

    Means are weighted when ``weights`` is given; the denominator is always the
    pooled unweighted SD ``sqrt((var_1 + var_0) / 2)``.
    """
    x = np.asarray(covariate, dtype=float)
    g = np.asarray(groups).astype(bool)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    m1 = np.average(x[g], weights=w[g])
    m0 = np.average(x[~g], weights=w[~g])
    sd = np.sqrt((x[g].var(ddof=1) + x[~g].var(ddof=1)) / 2.0)
    return float((m1 - m0) / sd)
