"""Domain types: panels, threshold regimes, windows and estimator configs."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class DtrError(Exception):
    """Base class for estimation errors that carry a machine-readable reason."""

    reason = "Error"


class NoAdherersError(DtrError):
    reason = "NoAdherers"


class DisqualifiedWindowError(DtrError):
    reason = "DisqualifiedWindow"


class SeparationError(DtrError):
    reason = "Separation"


class DataError(DtrError):
    reason = "DataError"


def substream_seed(*keys) -> int:
    """Independent 63-bit seed derived from integer ``keys``."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Panel:
    """Rectangular longitudinal dataset.

    ``X[t]`` is the ``(n, p_t)`` covariate matrix observed before the
    stage-``t`` decision (zero-based stage index), ``A`` is ``(n, T)``
    with values in ``alphabet`` and ``Y`` the terminal outcome.
    """

    X: tuple
    A: np.ndarray
    Y: np.ndarray
    alphabet: tuple = (0, 1)
    covariate_names: tuple | None = None

    def __post_init__(self):
        Y = _frozen(self.Y)
        if Y.ndim != 1:
            raise DataError("outcome must be a vector")
        n = Y.shape[0]
        A = _frozen(self.A, dtype=np.int64)
        if A.ndim == 1:
            A = _frozen(A.reshape(-1, 1), dtype=np.int64)
        if A.shape[0] != n:
            raise DataError(f"treatment rows {A.shape[0]} != outcome rows {n}")
        X = []
        for t, x in enumerate(self.X):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x.reshape(-1, 1)
            if x.shape[0] != n:
                raise DataError(f"stage {t + 1} covariates have {x.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(x)):
                raise DataError(f"stage {t + 1} covariates contain non-finite values")
            X.append(_frozen(x))
        if len(X) != A.shape[1]:
            raise DataError(f"{len(X)} covariate stages but {A.shape[1]} treatment columns")
        if not np.all(np.isfinite(Y)):
            raise DataError("outcomes must be finite")
        if not np.all(np.isin(A, self.alphabet)):
            raise DataError(f"treatments outside alphabet {self.alphabet}")
        if tuple(self.alphabet) != (0, 1):
            raise DataError("only the binary alphabet (0, 1) is supported")
        object.__setattr__(self, "X", tuple(X))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "alphabet", tuple(self.alphabet))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.A.shape[1]

    def take(self, idx) -> "Panel":
        """Row subset (used for bootstrap resamples)."""
        idx = np.asarray(idx)
        return Panel(
            X=tuple(x[idx] for x in self.X),
            A=self.A[idx],
            Y=self.Y[idx],
            alphabet=self.alphabet,
            covariate_names=self.covariate_names,
        )

    def covariate_range(self, stage: int, index: int) -> tuple[float, float]:
        col = self.X[stage][:, index]
        return float(col.min()), float(col.max())


class Direction(str, Enum):
    LE = "<="
    GE = ">="


@dataclass(frozen=True)
class Clause:
    """One threshold comparison ``X[stage][:, index] <= threshold`` (or ``>=``)."""

    index: int
    threshold: float
    direction: Direction = Direction.LE

    def holds(self, x: np.ndarray) -> np.ndarray:
        # inclusive on the treat side
        if self.direction is Direction.LE:
            return x <= self.threshold
        return x >= self.threshold

    def flipped(self) -> "Clause":
        d = Direction.GE if self.direction is Direction.LE else Direction.LE
        return Clause(self.index, self.threshold, d)


@dataclass(frozen=True)
class Regime:
    """Threshold regime: at each stage treat iff every clause holds."""

    stages: tuple
    treat_action: int = 1
    control_action: int = 0

    def __post_init__(self):
        stages = tuple(tuple(c) for c in self.stages)
        for t, clauses in enumerate(stages):
            if not clauses:
                raise ValueError(f"stage {t + 1} has no clauses")
        if self.treat_action == self.control_action:
            raise ValueError("treat and control actions must differ")
        object.__setattr__(self, "stages", stages)

    @property
    def T(self) -> int:
        return len(self.stages)

    @property
    def thresholds(self) -> tuple:
        return tuple(c.threshold for clauses in self.stages for c in clauses)

    def check(self, panel: Panel, warn: bool = True) -> None:
        if panel.T != self.T:
            raise ValueError(f"regime has {self.T} stages, panel has {panel.T}")
        for t, clauses in enumerate(self.stages):
            p = panel.X[t].shape[1]
            for c in clauses:
                if not 0 <= c.index < p:
                    raise IndexError(f"stage {t + 1} clause references covariate {c.index}, stage has {p}")
                if warn:
                    lo, hi = panel.covariate_range(t, c.index)
                    if not lo <= c.threshold <= hi:
                        warnings.warn(
                            f"threshold {c.threshold} outside observed range [{lo:.4g}, {hi:.4g}] "
                            f"at stage {t + 1}",
                            stacklevel=2,
                        )

    def treat_region(self, stage: int, x: np.ndarray) -> np.ndarray:
        """Boolean mask of rows in the stage's treat region (conjunction)."""
        x = np.atleast_2d(x)
        mask = np.ones(x.shape[0], dtype=bool)
        for c in self.stages[stage]:
            if c.index >= x.shape[1]:
                raise IndexError(f"covariate {c.index} missing from stage {stage + 1} row")
            mask &= c.holds(x[:, c.index])
        return mask

    def actions(self, stage: int, x: np.ndarray) -> np.ndarray:
        return np.where(self.treat_region(stage, x), self.treat_action, self.control_action)

    def flipped(self, swap_actions: bool = True) -> "Regime":
        """Every clause direction flipped; the two actions swapped unless ``swap_actions`` is False.

        For single-clause stages and rows off the thresholds, flipping both
        reproduces the original assignment and flipping only the directions
        gives its complement.
        """
        return Regime(
            tuple(tuple(c.flipped() for c in clauses) for clauses in self.stages),
            treat_action=self.control_action if swap_actions else self.treat_action,
            control_action=self.treat_action if swap_actions else self.control_action,
        )

    def with_thresholds(self, thresholds: Sequence[float]) -> "Regime":
        it = iter(thresholds)
        stages = tuple(
            tuple(Clause(c.index, float(next(it)), c.direction) for c in clauses)
            for clauses in self.stages
        )
        return Regime(stages, self.treat_action, self.control_action)


def recommended_action(regime: Regime, stage: int, covariates) -> int:
    """Action the regime recommends for a single covariate row at ``stage``."""
    row = np.asarray(covariates, dtype=float).reshape(1, -1)
    return int(regime.actions(stage, row)[0])


def recommended_actions(regime: Regime, panel: Panel) -> np.ndarray:
    """``(n, T)`` matrix of regime recommendations at the observed histories."""
    return np.column_stack([regime.actions(t, panel.X[t]) for t in range(panel.T)])


def strict_adherence(regime: Regime, panel: Panel, i: int, t: int) -> bool:
    if not (0 <= i < panel.n and 0 <= t < panel.T):
        raise IndexError(f"(i={i}, t={t}) outside panel of shape ({panel.n}, {panel.T})")
    return bool(recommended_action(regime, t, panel.X[t][i]) == panel.A[i, t])


@dataclass(frozen=True)
class WindowSpec:
    """Per-stage, per-clause tolerances ``(lower, upper)``.

    ``bounds[t][j]`` is the ``(delta_l, delta_u)`` pair for clause ``j`` of
    stage ``t``. ``lower`` always widens the region below the threshold and
    ``upper`` the region above it, whichever side the treat region is on.
    """

    bounds: tuple

    def __post_init__(self):
        b = tuple(tuple((float(lo), float(hi)) for lo, hi in stage) for stage in self.bounds)
        for stage in b:
            for lo, hi in stage:
                if lo < 0 or hi < 0:
                    raise ValueError("window tolerances must be non-negative")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def zeros(cls, regime: Regime) -> "WindowSpec":
        return cls(tuple(tuple((0.0, 0.0) for _ in clauses) for clauses in regime.stages))

    @classmethod
    def symmetric(cls, regime: Regime, deltas: Sequence[float]) -> "WindowSpec":
        """One half-width per clause, flattened in stage/clause order."""
        it = iter(deltas)
        return cls(tuple(tuple((d, d) for d in (next(it) for _ in clauses)) for clauses in regime.stages))

    @property
    def is_zero(self) -> bool:
        return all(lo == 0 and hi == 0 for stage in self.bounds for lo, hi in stage)

    def norm_inf(self) -> float:
        return max((max(lo, hi) for stage in self.bounds for lo, hi in stage), default=0.0)

    def validate(self, regime: Regime, ranges, delta_max=None) -> None:
        """Directional constraints ``lower <= min(dmax, psi - xmin)``, ``upper <= min(dmax, xmax - psi)``.

        ``ranges[t][j]`` is the covariate ``(xmin, xmax)`` and ``delta_max[t][j]``
        an optional cap.
        """
        if len(self.bounds) != regime.T:
            raise ValueError("window and regime disagree on the number of stages")
        for t, (stage, clauses) in enumerate(zip(self.bounds, regime.stages)):
            if len(stage) != len(clauses):
                raise ValueError(f"stage {t + 1}: {len(stage)} windows for {len(clauses)} clauses")
            for j, ((lo, hi), c) in enumerate(zip(stage, clauses)):
                xmin, xmax = ranges[t][j]
                dmax = math.inf if delta_max is None else delta_max[t][j]
                tol = 1e-9 * max(1.0, abs(c.threshold))
                if lo > min(dmax, c.threshold - xmin) + tol or hi > min(dmax, xmax - c.threshold) + tol:
                    raise ValueError(
                        f"window ({lo}, {hi}) violates directional constraints at stage {t + 1}, "
                        f"clause {j + 1} (psi={c.threshold}, range=({xmin}, {xmax}), dmax={dmax})"
                    )


@dataclass(frozen=True)
class GawConfig:
    """Bias-control schedule ``eps_n = c * n**-k``, split evenly over stages."""

    c: float
    k: float
    gamma_cap: float = 1 - 1e-9

    def __post_init__(self):
        if self.c < 0 or self.k <= 0:
            raise ValueError("GAW requires c >= 0 and k > 0")

    def eps_n(self, n: int) -> float:
        eps = self.c * n ** (-self.k)
        if eps >= 1:
            raise ValueError(f"eps_n = {eps:.4g} >= 1; choose smaller c or larger k")
        return eps

    def eps_t(self, n: int, T: int) -> float:
        return self.eps_n(n) / T


@dataclass(frozen=True)
class BawConfig:
    """Window search settings.

    ``grids`` holds one candidate list of symmetric half-widths per clause
    (stage-major order); each list must contain 0.
    """

    grids: tuple
    B: int = 200
    lambda_bias: float = 1.0
    q: float = 35.0
    refit: bool = False
    augmented: bool = False
    normalized: bool = True
    max_excluded: float = 0.2

    def __post_init__(self):
        grids = tuple(tuple(sorted(float(d) for d in g)) for g in self.grids)
        for g in grids:
            if 0.0 not in g:
                raise ValueError("every window grid must contain 0")
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if self.lambda_bias < 0:
            raise ValueError("lambda_bias must be non-negative")
        object.__setattr__(self, "grids", grids)


class WeightKind(str, Enum):
    IPW = "IPW"
    GAW = "GAW"
    BAW = "BAW"


@dataclass(frozen=True)
class WeightSeries:
    """Stage weights ``w`` and running products ``cum`` (both ``(n, T)``)."""

    w: np.ndarray
    kind: WeightKind
    source: object = None
    cum: np.ndarray = field(default=None)

    def __post_init__(self):
        w = _frozen(self.w)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "w", w)
        if self.cum is None:
            object.__setattr__(self, "cum", _frozen(np.cumprod(w, axis=1)))

    @property
    def terminal(self) -> np.ndarray:
        return self.cum[:, -1]
