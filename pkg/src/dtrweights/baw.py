"""Bootstrap selection of adherence windows around regime thresholds."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BawConfig,
    DisqualifiedWindowError,
    NoAdherersError,
    Panel,
    Regime,
    WindowSpec,
)
from .estimators import value_augmented, value_plain
from .glm import Nuisance
from .weighting import baw_weights


def delta_max(covariate_range, q: float = 35.0) -> float:
    """Largest half-width worth searching: the covariate range over ``q``."""
    lo, hi = covariate_range
    if not hi > lo:
        raise ValueError(f"degenerate covariate range ({lo}, {hi})")
    if q <= 0:
        raise ValueError("q must be positive")
    return (hi - lo) / q


def stage_grid(step: float, dmax: float) -> tuple:
    """``(0, s, 2s, ..., M s)`` with ``M s <= dmax``."""
    if step <= 0 or step > dmax:
        raise ValueError(f"grid step {step} must lie in (0, {dmax}]")
    m = int(math.floor(dmax / step + 1e-9))
    return tuple(float(i * step) for i in range(m + 1))


def build_grid(steps, dmaxes) -> list:
    """Cartesian product of per-clause grids, in lexicographic order."""
    grids = [stage_grid(s, d) for s, d in zip(steps, dmaxes)]
    return list(itertools.product(*grids))


def bootstrap_indices(n: int, B: int, seed: int) -> np.ndarray:
    """``(B, n)`` resample indices; replicate ``b`` uses the substream ``(seed, b)``."""
    out = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        out[b] = rng.integers(0, n, size=n)
    return out


def bootstrap_counts(n: int, B: int, seed: int) -> np.ndarray:
    """``(B, n)`` multiplicity of each individual in each resample."""
    idx = bootstrap_indices(n, B, seed)
    return np.stack([np.bincount(row, minlength=n) for row in idx]).astype(float)


@dataclass(frozen=True)
class WindowSearchResult:
    grid: tuple
    windows: tuple
    boot_mean: np.ndarray
    boot_var: np.ndarray
    bias: np.ndarray
    loss: np.ndarray
    n_excluded: np.ndarray
    disqualified: np.ndarray
    best: int
    reference: float
    B: int
    lambda_bias: float

    @property
    def delta_opt(self) -> tuple:
        return self.grid[self.best]

    @property
    def window_opt(self) -> WindowSpec:
        return self.windows[self.best]

    def rows(self) -> list[dict]:
        """Per-candidate diagnostics table."""
        out = []
        for j, delta in enumerate(self.grid):
            row = {f"delta{k + 1}": d for k, d in enumerate(delta)}
            row.update(
                boot_mean=float(self.boot_mean[j]),
                boot_var=float(self.boot_var[j]),
                bias=float(self.bias[j]),
                loss=float(self.loss[j]),
                n_excluded=int(self.n_excluded[j]),
                disqualified=bool(self.disqualified[j]),
                selected=j == self.best,
            )
            out.append(row)
        return out


def _clipped_window(regime: Regime, delta, ranges) -> WindowSpec:
    it = iter(delta)
    bounds = []
    for t, clauses in enumerate(regime.stages):
        stage = []
        for j, c in enumerate(clauses):
            d = next(it)
            lo, hi = ranges[t][j]
            stage.append((max(0.0, min(d, c.threshold - lo)), max(0.0, min(d, hi - c.threshold))))
        bounds.append(tuple(stage))
    return WindowSpec(tuple(bounds))


def _clause_ranges(panel: Panel, regime: Regime):
    return [[panel.covariate_range(t, c.index) for c in clauses] for t, clauses in enumerate(regime.stages)]


def _statistic(config: BawConfig, Y, cum, Q):
    if config.augmented:
        return value_augmented(Q, cum, config.normalized)
    return value_plain(Y, cum[:, -1], config.normalized)


def _boot_statistics(config: BawConfig, counts, Y, cums, Q):
    """``(B, G)`` bootstrap statistics for ``G`` windows at once; NaN where undefined.

    ``cums`` is ``(n, T, G)``: cumulative weights of every candidate window.
    """
    n = Y.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        if config.augmented:
            delta = Q[:, 1:] - Q[:, :-1]
            base = (counts @ Q[:, 0] / n)[:, None]
            out = np.zeros((counts.shape[0], cums.shape[2]))
            for t in range(cums.shape[1]):
                W = cums[:, t, :]
                num = counts @ (W * delta[:, t : t + 1])
                if config.normalized:
                    den = counts @ W
                    out += np.where(den > 0, num / den, np.nan)
                else:
                    out += num / n
            return base + out
        W = cums[:, -1, :]
        num = counts @ (W * Y[:, None])
        if config.normalized:
            den = counts @ W
            return np.where(den > 0, num / den, np.nan)
        return num / n


def select_window(
    panel: Panel,
    regime: Regime,
    config: BawConfig,
    seed: int,
    nuisance: Nuisance | None = None,
    counts: np.ndarray | None = None,
    Q: np.ndarray | None = None,
) -> WindowSearchResult:
    """Pick the window minimizing bootstrap variance plus penalized squared bias.

    All candidates share one set of ``B`` resamples. The bias reference is the
    strict (zero-window) estimator of the same variant on the original sample.
    Ties go to the lexicographically smallest window.
    """
    if len(config.grids) != sum(len(c) for c in regime.stages):
        raise ValueError("need one window grid per regime clause")
    nuisance = nuisance or Nuisance.fit(panel, fit_q=config.augmented)
    if config.augmented and Q is None:
        Q = nuisance.q.evaluate(panel, regime)[1]
    grid = tuple(itertools.product(*config.grids))
    ranges = _clause_ranges(panel, regime)
    windows = tuple(_clipped_window(regime, d, ranges) for d in grid)

    strict = baw_weights(panel, regime, WindowSpec.zeros(regime), nuisance.p_treat)
    try:
        reference = _statistic(config, panel.Y, strict.cum, Q)
    except NoAdherersError as exc:
        raise NoAdherersError(f"reference estimate undefined: {exc}") from exc

    G = len(grid)
    stats = np.full((config.B, G), np.nan)
    if not config.refit:
        if counts is None:
            counts = bootstrap_counts(panel.n, config.B, seed)
        cums = np.stack([baw_weights(panel, regime, win, nuisance.p_treat).cum for win in windows], axis=2)
        stats[:] = _boot_statistics(config, counts, panel.Y, cums, Q)
    else:
        idx = bootstrap_indices(panel.n, config.B, seed)
        for b in range(config.B):
            sub = panel.take(idx[b])
            nb = nuisance.refit(sub)
            Qb = nb.q.evaluate(sub, regime)[1] if config.augmented else None
            for j, win in enumerate(windows):
                cum = baw_weights(sub, regime, win, nb.p_treat).cum
                try:
                    stats[b, j] = _statistic(config, sub.Y, cum, Qb)
                except NoAdherersError:
                    pass

    valid = ~np.isnan(stats)
    n_ok = valid.sum(axis=0)
    n_excl = config.B - n_ok
    disq = (n_excl > config.max_excluded * config.B) | (n_ok < 2)
    mean = np.full(G, np.nan)
    var = np.full(G, np.nan)
    for j in np.flatnonzero(~disq):
        s = stats[valid[:, j], j]
        mean[j] = s.mean()
        var[j] = s.var(ddof=1)
    bias = mean - reference
    loss = var + config.lambda_bias * bias**2
    if np.all(disq):
        raise DisqualifiedWindowError("every candidate window was disqualified")
    # first index attaining the minimum = lexicographically smallest window
    best = int(np.nanargmin(loss))
    return WindowSearchResult(grid, windows, mean, var, bias, loss, n_excl, disq, best, reference, config.B, config.lambda_bias)
