"""Seeded generators for the two simulation designs and their true values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, stats
from scipy.special import expit

from .core import Clause, Panel, Regime
from .glm import FeatureSpec, default_outcome_spec

SIM1 = "sim1"
SIM2 = "sim2"

_DEFAULTS = {
    SIM1: {
        "x1_mean": 450.0, "x1_s": 150.0,
        "a1_int": 2.0, "a1_x1": -0.006,
        "x2_slope": 1.25, "x2_s": 60.0,
        "a2_int": 0.8, "a2_x2": -0.004,
        "y_int": 400.0, "y_x1": 1.6, "y_s": 60.0,
        "blip1_center": 350.0, "blip2_scale": 2.0, "blip2_center": 900.0,
    },
    SIM2: {
        "x1_mean": 450.0, "x1_s": 150.0,
        "x2_mean": 50.0, "x2_s": 20.0,
        "a1_int": -4.5, "a1_x1": 0.005, "a1_x2": 0.02,
        "y_s": 20.0,
        "tau_height": 100.0, "tau_center": 350.0, "tau_width": 75.0, "tau_shift": -30.0,
    },
}


@dataclass(frozen=True)
class DgpSpec:
    """One of the two simulation designs.

    ``sd=True`` reads the second argument of every normal law as a standard
    deviation; ``sd=False`` reads it as a variance.
    """

    name: str = SIM1
    sd: bool = True
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        name = self.name.lower()
        if name not in _DEFAULTS:
            raise ValueError(f"unknown design {self.name!r}; choose sim1 or sim2")
        unknown = set(self.overrides) - set(_DEFAULTS[name])
        if unknown:
            raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
        object.__setattr__(self, "name", name)

    @property
    def params(self) -> dict:
        p = dict(_DEFAULTS[self.name])
        p.update(self.overrides)
        return p

    def scale(self, key: str) -> float:
        s = self.params[key]
        return s if self.sd else math.sqrt(s)

    @property
    def T(self) -> int:
        return 2 if self.name == SIM1 else 1

    def regime(self, psi1: float, psi2: float) -> Regime:
        """Default threshold family: treat when the covariate is at or below its threshold."""
        if self.name == SIM1:
            return Regime(((Clause(0, psi1),), (Clause(0, psi2),)))
        return Regime(((Clause(0, psi1), Clause(1, psi2)),))

    @property
    def true_thresholds(self) -> tuple:
        return (350.0, 450.0) if self.name == SIM1 else (430.0, 80.0)

    @property
    def default_axes(self) -> tuple:
        if self.name == SIM1:
            return (np.arange(150.0, 500.0 + 1e-9, 5.0), np.arange(200.0, 600.0 + 1e-9, 5.0))
        return (np.arange(200.0, 600.0 + 1e-9, 5.0), np.arange(40.0, 80.0 + 1e-9, 1.0))

    @property
    def default_windows(self) -> tuple:
        if self.name == SIM1:
            return ((0.0, 2.0, 4.0, 6.0, 8.0, 10.0), (0.0, 2.0, 4.0, 6.0, 8.0, 10.0))
        return ((0.0, 2.0, 4.0, 6.0, 8.0, 10.0), (0.0, 1.0, 2.0))

    def outcome_specs(self, panel: Panel) -> tuple:
        specs = tuple(default_outcome_spec(panel, t) for t in range(panel.T))
        if self.name == SIM2:
            specs = (FeatureSpec(specs[0].terms + ("a1*x1_1^2",)),)
        return specs

    def with_overrides(self, **kw) -> "DgpSpec":
        return replace(self, overrides={**self.overrides, **kw})


def tau(spec: DgpSpec, x1):
    p = spec.params
    return p["tau_height"] * np.exp(-(((np.asarray(x1) - p["tau_center"]) / p["tau_width"]) ** 2)) + p["tau_shift"]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def simulate(spec: DgpSpec, n: int, seed, policy: Regime | None = None) -> Panel:
    """Draw ``n`` trajectories.

    Treatments follow the observational propensities, or the regime
    ``policy`` when given. Draws happen in a fixed order so a seed always
    determines the same panel.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    p = spec.params
    if spec.name == SIM1:
        x1 = p["x1_mean"] + spec.scale("x1_s") * rng.standard_normal(n)
        u1 = rng.random(n)
        x2 = p["x2_slope"] * x1 + spec.scale("x2_s") * rng.standard_normal(n)
        u2 = rng.random(n)
        e = rng.standard_normal(n)
        X = (x1.reshape(-1, 1), x2.reshape(-1, 1))
        if policy is None:
            a1 = (u1 < expit(p["a1_int"] + p["a1_x1"] * x1)).astype(np.int64)
            a2 = (u2 < expit(p["a2_int"] + p["a2_x2"] * x2)).astype(np.int64)
        else:
            a1 = policy.actions(0, X[0])
            a2 = policy.actions(1, X[1])
        y = (
            p["y_int"] + p["y_x1"] * x1 + spec.scale("y_s") * e
            - a1 * (x1 - p["blip1_center"])
            - a2 * (p["blip2_scale"] * x2 - p["blip2_center"])
        )
        return Panel(X=X, A=np.column_stack([a1, a2]), Y=y, covariate_names=(("x1",), ("x2",)))
    x1 = p["x1_mean"] + spec.scale("x1_s") * rng.standard_normal(n)
    x2 = p["x2_mean"] + spec.scale("x2_s") * rng.standard_normal(n)
    u1 = rng.random(n)
    e = rng.standard_normal(n)
    X = (np.column_stack([x1, x2]),)
    if policy is None:
        a1 = (u1 < expit(p["a1_int"] + p["a1_x1"] * x1 + p["a1_x2"] * x2)).astype(np.int64)
    else:
        a1 = policy.actions(0, X[0])
    y = x1 + 2 * x2 + tau(spec, x1) * a1 + spec.scale("y_s") * e
    return Panel(X=X, A=a1.reshape(-1, 1), Y=y, covariate_names=(("x1", "x2"),))


def generate(spec: DgpSpec, n: int, seed) -> Panel:
    """Observational panel of size ``n``."""
    return simulate(spec, n, seed)


def true_propensities(spec: DgpSpec, panel: Panel) -> np.ndarray:
    """``(n, T)`` matrix of the generating ``P(A_t = 1 | history)``."""
    p = spec.params
    if spec.name == SIM1:
        x1 = panel.X[0][:, 0]
        x2 = panel.X[1][:, 0]
        return np.column_stack([expit(p["a1_int"] + p["a1_x1"] * x1), expit(p["a2_int"] + p["a2_x2"] * x2)])
    x = panel.X[0]
    return expit(p["a1_int"] + p["a1_x1"] * x[:, 0] + p["a1_x2"] * x[:, 1]).reshape(-1, 1)


def oracle_value(spec: DgpSpec, regime: Regime, N_mc: int = 1_000_000, seed=0) -> tuple[float, float]:
    """Monte Carlo value of ``regime``: ``(mean outcome, standard error)``."""
    if N_mc < 10_000:
        raise ValueError("N_mc must be at least 10^4")
    y = simulate(spec, N_mc, seed, policy=regime).Y
    return float(y.mean()), float(y.std(ddof=1) / math.sqrt(N_mc))


def _partial_benefit(a, mu, s, psi):
    """``E[(a - X) 1{X <= psi}]`` for ``X ~ N(mu, s^2)``."""
    z = (psi - mu) / s
    return (a - mu) * stats.norm.cdf(z) + s * stats.norm.pdf(z)


def _is_template(spec: DgpSpec, regime: Regime) -> bool:
    if regime.treat_action != 1 or regime.control_action != 0:
        return False
    shape = tuple(tuple((c.index, c.direction.value) for c in st) for st in regime.stages)
    if spec.name == SIM1:
        return shape == (((0, "<="),), ((0, "<="),))
    return shape == (((0, "<="), (1, "<=")),)


def true_value(spec: DgpSpec, regime: Regime) -> float:
    """Exact value of a template regime by closed form (design 1) or quadrature (design 2)."""
    if not _is_template(spec, regime):
        raise ValueError("closed-form truth only covers the default threshold family")
    p = spec.params
    psi = regime.thresholds
    if spec.name == SIM1:
        mu1, s1 = p["x1_mean"], spec.scale("x1_s")
        mu2 = p["x2_slope"] * mu1
        s2 = math.hypot(p["x2_slope"] * s1, spec.scale("x2_s"))
        base = p["y_int"] + p["y_x1"] * mu1
        b1 = _partial_benefit(p["blip1_center"], mu1, s1, psi[0])
        k = p["blip2_scale"]
        b2 = k * _partial_benefit(p["blip2_center"] / k, mu2, s2, psi[1])
        return float(base + b1 + b2)
    mu1, s1 = p["x1_mean"], spec.scale("x1_s")
    base = mu1 + 2 * p["x2_mean"]
    lo, hi = mu1 - 12 * s1, min(psi[0], mu1 + 12 * s1)
    if hi <= lo:
        return float(base)
    part, _ = integrate.quad(
        lambda x: float(tau(spec, x)) * stats.norm.pdf(x, mu1, s1), lo, hi, epsabs=1e-11, epsrel=1e-12, limit=200
    )
    return float(base + part * stats.norm.cdf((psi[1] - p["x2_mean"]) / spec.scale("x2_s")))


def true_surface(spec: DgpSpec, axes) -> np.ndarray:
    """Exact values over the cartesian grid ``axes`` (one array per threshold)."""
    shape = tuple(len(a) for a in axes)
    out = np.empty(shape)
    for idx in np.ndindex(*shape):
        out[idx] = true_value(spec, spec.regime(*(axes[k][i] for k, i in enumerate(idx))))
    return out


def tuned_c(m: float, values) -> float:
    """Bias-control constant ``m / range(values)``, ``values`` being regime values."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    r = float(v.max() - v.min()) if v.size else 0.0
    if r <= 0:
        raise ValueError("regime values have zero range")
    return m / r
