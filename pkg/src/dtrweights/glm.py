"""Nuisance models: logistic propensities (IRLS) and stagewise linear Q-functions.

Feature terms are written as strings over the stage-indexed history, with
1-based stages and covariate positions:

``"1"``            intercept
``"x2_1"``         first covariate observed at stage 2
``"a1"``           stage-1 treatment
``"a1*x1_1^2"``    stage-1 treatment times squared stage-1 covariate
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .core import Panel, Regime, recommended_actions

P_CLAMP = 1e-6
RIDGE = 1e-6

_FACTOR = re.compile(r"^(?:x(\d+)_(\d+)(?:\^(\d+))?|a(\d+))$")


def _parse_term(term: str) -> tuple:
    term = term.replace(" ", "")
    if term == "1":
        return ()
    factors = []
    for part in term.split("*"):
        m = _FACTOR.match(part)
        if not m:
            raise ValueError(f"cannot parse feature factor {part!r} in {term!r}")
        if m.group(4) is not None:
            factors.append(("a", int(m.group(4)) - 1, 0, 1))
        else:
            power = int(m.group(3)) if m.group(3) else 1
            factors.append(("x", int(m.group(1)) - 1, int(m.group(2)) - 1, power))
    return tuple(sorted(factors))


@dataclass(frozen=True)
class FeatureSpec:
    """Ordered feature terms for one stage's design matrix."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(t.replace(" ", "") for t in self.terms)
        parsed = [_parse_term(t) for t in terms]
        if len(set(parsed)) != len(parsed):
            raise ValueError(f"duplicate terms in feature spec {terms}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_parsed", tuple(parsed))

    @property
    def width(self) -> int:
        return len(self.terms)

    @property
    def has_intercept(self) -> bool:
        return () in self._parsed

    def max_stage(self) -> int:
        return max((f[1] for term in self._parsed for f in term), default=-1)

    def design(self, X, A) -> np.ndarray:
        """Design matrix from covariate stages ``X`` and treatment matrix ``A``.

        ``A`` may be narrower than the panel (only columns referenced are read).
        """
        n = A.shape[0] if A is not None and np.ndim(A) == 2 else X[0].shape[0]
        cols = []
        for term in self._parsed:
            col = np.ones(n)
            for kind, stage, idx, power in term:
                if kind == "a":
                    col = col * A[:, stage]
                else:
                    v = X[stage][:, idx]
                    col = col * (v if power == 1 else v**power)
            cols.append(col)
        return np.column_stack(cols) if cols else np.empty((n, 0))


def default_propensity_spec(panel: Panel, stage: int) -> FeatureSpec:
    """Intercept, current-stage covariates, prior treatments."""
    t = stage + 1
    terms = ["1"] + [f"x{t}_{j + 1}" for j in range(panel.X[stage].shape[1])]
    terms += [f"a{s}" for s in range(1, t)]
    return FeatureSpec(tuple(terms))


def default_outcome_spec(panel: Panel, stage: int) -> FeatureSpec:
    """Intercept, history main effects, treatments and treatment-by-own-stage-covariate terms."""
    terms = ["1"]
    for s in range(1, stage + 2):
        terms += [f"x{s}_{j + 1}" for j in range(panel.X[s - 1].shape[1])]
    for s in range(1, stage + 2):
        terms.append(f"a{s}")
        terms += [f"a{s}*x{s}_{j + 1}" for j in range(panel.X[s - 1].shape[1])]
    return FeatureSpec(tuple(terms))


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    separation: bool = False
    ridge: float = 0.0


def _deviance(y, eta) -> float:
    # -2 log-likelihood, stable for large |eta|
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def _irls(Z, y, penalty, max_iter, tol, trace: list | None = None):
    n, p = Z.shape
    beta = np.zeros(p)
    eta = Z @ beta
    dev = _deviance(y, eta) + float(beta @ (penalty * beta))
    if trace is not None:
        trace.append(dev)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        wts = np.clip(mu * (1 - mu), 1e-12, None)
        grad = Z.T @ (y - mu) - penalty * beta
        H = (Z * wts[:, None]).T @ Z + np.diag(penalty)
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, grad)[0]
        # step-halving keeps the penalized deviance non-increasing
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = Z @ cand
            dev_c = _deviance(y, eta_c) + float(cand @ (penalty * cand))
            if dev_c <= dev + 1e-12 * max(1.0, abs(dev)):
                break
            t *= 0.5
        else:
            converged = True  # no descent direction left
            break
        change = abs(dev - dev_c)
        beta, eta, dev = cand, eta_c, dev_c
        if trace is not None:
            trace.append(dev)
        if np.max(np.abs(t * step)) < tol or change < tol * (abs(dev) + tol):
            converged = True
            break
    return beta, converged, it, dev


def fit_logistic(design, response, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS with step-halving.

    Columns are standardized internally; coefficients are reported on the
    original scale. If the fit separates (fitted probabilities collapsing to
    0/1 or the response being constant) the model is refit with a tiny ridge
    penalty on the non-intercept terms and ``separation`` is set.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("design must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be binary 0/1")
    n, p = X.shape
    const = np.all(X == X[:1], axis=0)
    center = np.where(const, 0.0, X.mean(axis=0))
    scale = np.where(const, 1.0, X.std(axis=0))
    has_int = bool(np.any(const & (X[0] != 0)))
    if has_int:
        Z = (X - center) / scale
        Z[:, const] = X[:, const]
    else:
        center = np.zeros(p)
        Z = X / scale

    def back(b):
        coef = b / scale
        if has_int:
            j = int(np.flatnonzero(const & (X[0] != 0))[0])
            coef[j] = (b[j] - np.sum(np.delete(coef * center, j))) / X[0, j]
        return coef

    penalty = np.zeros(p)
    beta, converged, it, dev = _irls(Z, y, penalty, max_iter, tol)
    eta = Z @ beta
    separated = bool(y.min() == y.max() or np.max(np.abs(eta)) > 30 or np.max(np.abs(beta)) > 1e3)
    if separated:
        penalty = np.where(const, 0.0, RIDGE * n)
        beta, converged, it, dev = _irls(Z, y, penalty, max_iter, tol)
        warnings.warn("logistic fit separated; ridge fallback applied", RuntimeWarning, stacklevel=2)
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    return LogisticFit(back(beta), converged, it, dev, separated, RIDGE if separated else 0.0)


def predict_propensity(coef, design, p_clamp: float = P_CLAMP, counter: list | None = None) -> np.ndarray:
    """``expit(design @ coef)`` clamped to ``[p_clamp, 1 - p_clamp]``.

    If ``counter`` is a list, the number of clamped rows is appended to it.
    """
    eta = np.atleast_2d(np.asarray(design, dtype=float)) @ np.asarray(coef, dtype=float)
    p = expit(eta)
    clamped = (p < p_clamp) | (p > 1 - p_clamp)
    if counter is not None:
        counter.append(int(clamped.sum()))
    return np.clip(p, p_clamp, 1 - p_clamp)


@dataclass(frozen=True)
class PropensityModels:
    """Per-stage fitted ``P(A_t = 1 | history)`` models."""

    specs: tuple
    fits: tuple
    p_clamp: float = P_CLAMP

    def predict(self, panel: Panel) -> tuple[np.ndarray, int]:
        """``(n, T)`` matrix of ``P(A_t = 1 | history)`` and the clamp count."""
        counter: list = []
        cols = [
            predict_propensity(f.coef, s.design(panel.X, panel.A), self.p_clamp, counter)
            for s, f in zip(self.specs, self.fits)
        ]
        return np.column_stack(cols), int(sum(counter))


def fit_propensity_models(panel: Panel, specs=None, p_clamp: float = P_CLAMP) -> PropensityModels:
    specs = tuple(specs) if specs is not None else tuple(default_propensity_spec(panel, t) for t in range(panel.T))
    fits = tuple(fit_logistic(s.design(panel.X, panel.A), panel.A[:, t]) for t, s in enumerate(specs))
    return PropensityModels(specs, fits, p_clamp)


class _LeastSquares:
    """Pivoted-QR least squares on a fixed design, reusable across responses."""

    def __init__(self, design: np.ndarray):
        n, p = design.shape
        scale = np.sqrt(np.mean(design**2, axis=0))
        scale[scale == 0] = 1.0
        Q, R, piv = linalg.qr(design / scale, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > diag[0] * max(n, p) * np.finfo(float).eps)) if p else 0
        self.dropped = tuple(sorted(int(j) for j in piv[rank:]))
        if self.dropped:
            warnings.warn(f"rank-deficient design; dropping columns {self.dropped}", RuntimeWarning, stacklevel=3)
        self._Q = Q[:, :rank]
        self._R = R[:rank, :rank]
        self._piv = piv[:rank]
        self._scale = scale
        self.p = p

    def solve(self, y: np.ndarray) -> np.ndarray:
        coef = np.zeros(self.p)
        if self._piv.size:
            z = linalg.solve_triangular(self._R, self._Q.T @ y)
            coef[self._piv] = z / self._scale[self._piv]
        return coef


@dataclass
class QModels:
    """Stagewise outcome regressions with cached factorizations.

    The stage-``t`` coefficients depend on the regime through the
    pseudo-outcome, so :meth:`evaluate` re-runs the backward recursion for
    each regime while reusing the observed-history designs.
    """

    specs: tuple
    _solvers: list = field(repr=False, default_factory=list)
    _designs: list = field(repr=False, default_factory=list)

    @classmethod
    def prepare(cls, panel: Panel, specs=None) -> "QModels":
        specs = tuple(specs) if specs is not None else tuple(default_outcome_spec(panel, t) for t in range(panel.T))
        if len(specs) != panel.T:
            raise ValueError("need one outcome feature spec per stage")
        designs = [s.design(panel.X, panel.A) for s in specs]
        return cls(specs, [_LeastSquares(D) for D in designs], designs)

    def evaluate(self, panel: Panel, regime: Regime, actions=None):
        """Return ``(coefs, Q)`` with ``Q`` of shape ``(n, T + 1)`` and ``Q[:, T] == Y``.

        ``Q[:, t]`` is the fitted stage-``t`` model evaluated at the observed
        history with the stage-``t`` treatment set to the regime's action.
        """
        T = panel.T
        d = recommended_actions(regime, panel) if actions is None else actions
        Q = np.empty((panel.n, T + 1))
        Q[:, T] = panel.Y
        coefs = [None] * T
        for t in range(T - 1, -1, -1):
            beta = self._solvers[t].solve(Q[:, t + 1])
            A_plug = np.array(panel.A, copy=True)
            A_plug[:, t] = d[:, t]
            Q[:, t] = self.specs[t].design(panel.X, A_plug) @ beta
            coefs[t] = beta
        return tuple(coefs), Q


def fit_q_functions(panel: Panel, regime: Regime, feature_specs=None):
    """Backward-recursive Q-functions under ``regime``; returns ``(coefs, Q)``."""
    return QModels.prepare(panel, feature_specs).evaluate(panel, regime)


@dataclass
class Nuisance:
    """Fitted nuisance quantities for one panel, reused across regimes.

    ``p_treat`` is the ``(n, T)`` matrix of ``P(A_t = 1 | history)``.
    """

    p_treat: np.ndarray
    clamp_count: int = 0
    propensity: PropensityModels | None = None
    q: QModels | None = None
    propensity_specs: tuple | None = None
    outcome_specs: tuple | None = None
    _boot: dict = field(default_factory=dict, repr=False)

    @classmethod
    def fit(cls, panel: Panel, propensity_specs=None, outcome_specs=None, fit_q: bool = True) -> "Nuisance":
        models = fit_propensity_models(panel, propensity_specs)
        p, clamps = models.predict(panel)
        q = QModels.prepare(panel, outcome_specs) if fit_q else None
        return cls(p, clamps, models, q, models.specs, q.specs if q is not None else outcome_specs)

    @classmethod
    def from_probabilities(cls, panel: Panel, p_treat, outcome_specs=None, fit_q: bool = True) -> "Nuisance":
        p = np.asarray(p_treat, dtype=float).reshape(panel.n, panel.T)
        q = QModels.prepare(panel, outcome_specs) if fit_q else None
        return cls(p, 0, None, q, None, q.specs if q is not None else outcome_specs)

    def refit(self, panel: Panel) -> "Nuisance":
        """Same model specifications refit on another panel (a bootstrap resample)."""
        return Nuisance.fit(panel, self.propensity_specs, self.outcome_specs, fit_q=self.q is not None)
