"""Value surfaces over threshold grids, argmax location and threshold bootstrap."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .baw import bootstrap_counts, bootstrap_indices, select_window
from .core import BawConfig, DtrError, GawConfig, Panel, Regime, recommended_actions, substream_seed
from .estimators import EstimatorTag, ValueEstimate, bias_bound, estimate
from .glm import Nuisance
from .weighting import baw_weights, gaw_weights, ipw_weights


# numeric per-cell diagnostics kept on the surface; delta_opt is stored as its sup-norm
_EXTRA_KEYS = ("bias_bound", "gamma_capped", "delta_opt")


def _tags(estimators) -> tuple:
    return tuple(e if isinstance(e, EstimatorTag) else EstimatorTag.parse(e) for e in estimators)


def _needs_q(tags) -> bool:
    return any(t.augmented for t in tags)


def _needs_counts(tags, baw: BawConfig | None) -> bool:
    return baw is not None and not baw.refit and any(t.kind == "BAW" for t in tags)


def evaluate_regime(
    panel: Panel,
    regime: Regime,
    estimators,
    nuisance: Nuisance,
    gaw: GawConfig | None = None,
    baw: BawConfig | None = None,
    seed: int | None = None,
    counts: np.ndarray | None = None,
    with_variance: bool = True,
) -> dict:
    """Every requested estimator at one regime.

    Returns ``{name: ValueEstimate}``; estimators that are undefined on this
    panel map to the raised :class:`DtrError` instead.
    """
    tags = _tags(estimators)
    Q = None
    if _needs_q(tags):
        if nuisance.q is None:
            raise ValueError("augmented estimators need outcome models; fit the nuisance with fit_q=True")
        Q = nuisance.q.evaluate(panel, regime)[1]
    if any(t.kind == "BAW" for t in tags):
        if baw is None or seed is None:
            raise ValueError("BAW estimators need a BawConfig and a seed")
        if counts is None and not baw.refit:
            counts = bootstrap_counts(panel.n, baw.B, seed)
    p = nuisance.p_treat
    cache: dict = {}
    out: dict = {}
    for tag in tags:
        diag = {"clamped": nuisance.clamp_count}
        try:
            if tag.kind == "IPW":
                if "ipw" not in cache:
                    cache["ipw"] = ipw_weights(panel, regime, p)
                ws = cache["ipw"]
            elif tag.kind == "GAW":
                if gaw is None:
                    raise ValueError("GAW estimators need a GawConfig")
                if "gaw" not in cache:
                    cache["gaw"] = gaw_weights(panel, regime, p, gaw)
                ws, q, n_capped = cache["gaw"]
                diag.update(
                    gamma_capped=n_capped,
                    eps_n=gaw.eps_n(panel.n),
                    bias_bound=bias_bound(q.theta, float(np.ptp(panel.Y))),
                )
            else:
                cfg = replace(baw, augmented=tag.augmented, normalized=tag.normalized)
                res = select_window(panel, regime, cfg, seed, nuisance=nuisance, counts=counts, Q=Q)
                ws = baw_weights(panel, regime, res.window_opt, p)
                diag.update(delta_opt=res.delta_opt, window_excluded=int(res.n_excluded[res.best]))
            est = estimate(tag, panel.Y, ws, Q, with_variance=with_variance)
        except DtrError as exc:
            out[tag.name] = exc
            continue
        out[tag.name] = replace(est, diagnostics={**diag, **est.diagnostics})
    return out


def estimate_value(
    panel: Panel,
    regime: Regime,
    estimator: str,
    nuisance: Nuisance | None = None,
    gaw: GawConfig | None = None,
    baw: BawConfig | None = None,
    seed: int | None = None,
) -> ValueEstimate:
    """Single estimator at one regime; raises the estimator's error if undefined."""
    tag = EstimatorTag.parse(estimator)
    if nuisance is None:
        nuisance = Nuisance.fit(panel, fit_q=tag.augmented)
    res = evaluate_regime(panel, regime, [tag], nuisance, gaw, baw, seed)[tag.name]
    if isinstance(res, DtrError):
        raise res
    return res


@dataclass
class ValueSurface:
    """Per-cell estimates over a cartesian threshold grid.

    ``values[name]`` has one axis per threshold; NaN marks a missing cell
    whose reason code sits in ``missing[name]``.
    """

    axes: tuple
    estimators: tuple
    values: dict
    variances: dict
    ess: dict
    missing: dict
    extras: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def optimum(self, name: str):
        """``(psi tuple, value)`` at the maximum; ties go to the smallest psi tuple."""
        v = self.values[name]
        if np.all(np.isnan(v)):
            return None, float("nan")
        flat = int(np.nanargmax(v))
        idx = np.unravel_index(flat, v.shape)
        return tuple(float(self.axes[k][i]) for k, i in enumerate(idx)), float(v[idx])

    def rows(self) -> list[dict]:
        """Long-format records, one per (cell, estimator)."""
        out = []
        for idx in np.ndindex(*self.shape):
            psi = {f"psi{k + 1}": float(self.axes[k][i]) for k, i in enumerate(idx)}
            for name in self.estimators:
                out.append(
                    {
                        **psi,
                        "estimator": name,
                        "value": float(self.values[name][idx]),
                        "variance": float(self.variances[name][idx]),
                        "ess": float(self.ess[name][idx]),
                        "missing_reason": self.missing[name][idx],
                    }
                )
        return out


def evaluate_surface(
    panel: Panel,
    template: Regime,
    axes,
    estimators,
    gaw: GawConfig | None = None,
    baw: BawConfig | None = None,
    seed: int | None = None,
    nuisance: Nuisance | None = None,
    with_variance: bool = True,
    keep_cells: bool = False,
) -> ValueSurface:
    """Evaluate each estimator at every threshold combination of ``axes``.

    ``template`` fixes the clause structure; its thresholds are replaced by
    the grid values in stage/clause order. Nuisance models are fit once; only
    the Q recursion is re-run per cell. All cells share one bootstrap
    resample set for window selection.
    """
    tags = _tags(estimators)
    axes = tuple(np.sort(np.asarray(a, dtype=float)) for a in axes)
    if len(axes) != len(template.thresholds):
        raise ValueError(f"{len(axes)} grid axes for {len(template.thresholds)} thresholds")
    if any(a.size == 0 for a in axes):
        raise ValueError("grid axes must be non-empty")
    if nuisance is None:
        nuisance = Nuisance.fit(panel, fit_q=_needs_q(tags))
    counts = bootstrap_counts(panel.n, baw.B, seed) if _needs_counts(tags, baw) else None
    shape = tuple(a.size for a in axes)
    names = tuple(t.name for t in tags)
    values = {k: np.full(shape, np.nan) for k in names}
    variances = {k: np.full(shape, np.nan) for k in names}
    ess = {k: np.full(shape, np.nan) for k in names}
    missing = {k: np.full(shape, "", dtype=object) for k in names}
    extras: dict = {k: {} for k in names}
    cells = {}
    for idx in np.ndindex(*shape):
        regime = template.with_thresholds([axes[k][i] for k, i in enumerate(idx)])
        res = evaluate_regime(panel, regime, tags, nuisance, gaw, baw, seed, counts, with_variance)
        for name, r in res.items():
            if isinstance(r, DtrError):
                missing[name][idx] = r.reason
                continue
            values[name][idx] = r.value
            variances[name][idx] = np.nan if r.variance is None else r.variance
            ess[name][idx] = np.nan if r.ess is None else r.ess
            for key in _EXTRA_KEYS:
                if key in r.diagnostics:
                    v = r.diagnostics[key]
                    v = max(v) if key == "delta_opt" else v
                    extras[name].setdefault(key, np.full(shape, np.nan))[idx] = v
        if keep_cells:
            cells[idx] = res
    return ValueSurface(axes, names, values, variances, ess, missing, extras, cells)


@dataclass(frozen=True)
class ThresholdBootstrap:
    estimator: str
    draws: np.ndarray  # (B_ok, k) argmax thresholds
    dropped: int

    def summary(self) -> list[dict]:
        out = []
        for k in range(self.draws.shape[1]):
            d = self.draws[:, k]
            q25, q50, q75, lo, hi = np.percentile(d, [25, 50, 75, 2.5, 97.5], method="linear")
            out.append(
                {
                    "threshold": f"psi{k + 1}",
                    "mean": float(d.mean()),
                    "sd": float(d.std(ddof=1)) if d.size > 1 else 0.0,
                    "median": float(q50),
                    "iqr": float(q75 - q25),
                    "ci_low": float(lo),
                    "ci_high": float(hi),
                }
            )
        return out

    def covers(self, truth) -> bool:
        """Whether every marginal 95% percentile interval contains ``truth``."""
        return all(s["ci_low"] <= t <= s["ci_high"] for s, t in zip(self.summary(), truth))


def bootstrap_thresholds(
    panel: Panel,
    template: Regime,
    axes,
    estimator: str,
    B: int,
    seed: int,
    gaw: GawConfig | None = None,
    baw: BawConfig | None = None,
    propensity_specs=None,
    outcome_specs=None,
) -> ThresholdBootstrap:
    """Percentile bootstrap of the argmax thresholds.

    Each resample refits the nuisance models and re-evaluates the surface.
    Resamples whose surface is entirely missing are dropped and counted.
    """
    tag = EstimatorTag.parse(estimator)
    idx = bootstrap_indices(panel.n, B, seed)
    draws = []
    dropped = 0
    for b in range(B):
        sub = panel.take(idx[b])
        try:
            nb = Nuisance.fit(sub, propensity_specs, outcome_specs, fit_q=tag.augmented)
        except DtrError:
            dropped += 1
            continue
        surf = evaluate_surface(sub, template, axes, [tag], gaw, baw, substream_seed(seed, b, 1), nb, with_variance=False)
        psi, _ = surf.optimum(tag.name)
        if psi is None:
            dropped += 1
            continue
        draws.append(psi)
    arr = np.array(draws, dtype=float).reshape(-1, len(template.thresholds))
    return ThresholdBootstrap(tag.name, arr, dropped)


def regime_metrics(estimated: Regime, true: Regime, generator, N_ext: int = 10_000, seed: int = 0):
    """``(POT, value)`` of ``estimated`` on an external sample that follows it.

    ``generator(n, seed, policy)`` must return a panel whose treatments follow
    ``policy``. POT is the share of individuals whose assignment matches the
    true optimal rule at every stage.
    """
    ext = generator(N_ext, seed, estimated)
    match = np.all(recommended_actions(true, ext) == ext.A, axis=1)
    return float(match.mean()), float(ext.Y.mean())


def grid_cells(axes):
    """Threshold tuples of the cartesian grid in lexicographic order."""
    return list(itertools.product(*(np.sort(np.asarray(a, dtype=float)) for a in axes)))
