"""Replication driver: repeated simulate-fit-evaluate runs aggregated into summary tables."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import BawConfig, DtrError, GawConfig, WindowSpec, substream_seed
from .estimators import EstimatorTag
from .glm import Nuisance
from .io import write_csv, write_json
from .simgen import DgpSpec, generate, simulate, true_propensities, true_surface, tuned_c
from .surface import bootstrap_thresholds, evaluate_surface, regime_metrics
from .weighting import baw_weights, gaw_weights, ipw_weights, weight_spread

log = logging.getLogger(__name__)

FOOTER = "Var uses divisor R-1 across replicates; Bias = mean - truth; rMSE = sqrt(mean squared error)."


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce a study; serialized verbatim into the manifest."""

    design: str = "sim1"
    sd: bool = True
    n: tuple = (1000,)
    R: int = 100
    seed: int = 0
    axes: tuple | None = None  # one list per threshold; None uses grid_step
    grid_step: tuple | None = None
    estimators: tuple = ("nipw", "ngaw", "nbaw")
    c: float | None = 0.18
    k: float = 0.5
    m: float | None = None  # when set, c = m / range of the replicate's nIPW surface
    windows: tuple | None = None
    B: int = 200
    lambda_bias: float = 1.0
    refit: bool = False
    n_ext: int = 10_000
    ci_B: int = 0  # bootstrap replications for threshold CIs; 0 skips coverage
    true_ps: bool = False

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "estimators", tuple(EstimatorTag.parse(e).name for e in self.estimators))
        if self.axes is not None:
            object.__setattr__(self, "axes", tuple(tuple(float(v) for v in a) for a in self.axes))
        if self.grid_step is not None:
            object.__setattr__(self, "grid_step", tuple(float(v) for v in self.grid_step))
        if self.windows is not None:
            object.__setattr__(self, "windows", tuple(tuple(float(v) for v in w) for w in self.windows))
        if (self.c is None) == (self.m is None) and any(EstimatorTag.parse(e).kind == "GAW" for e in self.estimators):
            raise ValueError("give exactly one of c and m for GAW estimators")
        if self.R < 2:
            raise ValueError("R must be at least 2")

    @property
    def spec(self) -> DgpSpec:
        return DgpSpec(self.design, sd=self.sd)

    def grid_axes(self) -> tuple:
        if self.axes is not None:
            return tuple(np.array(a) for a in self.axes)
        full = self.spec.default_axes
        if self.grid_step is None:
            return full
        return tuple(np.arange(a[0], a[-1] + 1e-9, s) for a, s in zip(full, self.grid_step))

    def baw_config(self) -> BawConfig:
        return BawConfig(
            self.windows if self.windows is not None else self.spec.default_windows,
            B=self.B,
            lambda_bias=self.lambda_bias,
            refit=self.refit,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"schema_version", "outputs"}
        if unknown:
            raise ValueError(f"unknown study settings {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ReplicateResult:
    n: int
    r: int
    values: dict = field(default_factory=dict)  # name -> flat cell array
    variances: dict = field(default_factory=dict)
    ess: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    optimum: dict = field(default_factory=dict)  # name -> psi tuple
    pot: dict = field(default_factory=dict)
    ext_value: dict = field(default_factory=dict)
    covered: dict = field(default_factory=dict)
    spreads: dict = field(default_factory=dict)
    c: float = float("nan")
    error: str | None = None


def _gaw_for(cfg: StudyConfig, panel, nuisance, axes, spec) -> GawConfig | None:
    if not any(EstimatorTag.parse(e).kind == "GAW" for e in cfg.estimators):
        return None
    if cfg.c is not None:
        return GawConfig(cfg.c, cfg.k)
    surf = evaluate_surface(panel, spec.regime(0.0, 0.0), axes, ["nipw"], nuisance=nuisance, with_variance=False)
    return GawConfig(tuned_c(cfg.m, surf.values["nipw"]), cfg.k)


def _spreads(cfg: StudyConfig, panel, nuisance, gaw, baw, spec, seed) -> dict:
    """1st-to-99th percentile spread of terminal weights at the true optimal regime."""
    from .baw import select_window

    regime = spec.regime(*spec.true_thresholds)
    p = nuisance.p_treat
    out = {"IPW": weight_spread(ipw_weights(panel, regime, p).terminal)}
    kinds = {EstimatorTag.parse(e).kind for e in cfg.estimators}
    if gaw is not None:
        out["GAW"] = weight_spread(gaw_weights(panel, regime, p, gaw)[0].terminal)
    if "BAW" in kinds:
        try:
            win = select_window(panel, regime, baw, seed, nuisance=nuisance).window_opt
        except DtrError:
            win = WindowSpec.zeros(regime)
        out["BAW"] = weight_spread(baw_weights(panel, regime, win, p).terminal)
    return out


def run_replicate(cfg: StudyConfig, n: int, r: int) -> ReplicateResult:
    spec = cfg.spec
    axes = cfg.grid_axes()
    res = ReplicateResult(n, r)
    try:
        panel = generate(spec, n, np.random.SeedSequence([cfg.seed, n, r]))
        needs_q = any(EstimatorTag.parse(e).augmented for e in cfg.estimators)
        outcome_specs = spec.outcome_specs(panel) if needs_q else None
        if cfg.true_ps:
            nuisance = Nuisance.from_probabilities(panel, true_propensities(spec, panel), outcome_specs, fit_q=needs_q)
        else:
            nuisance = Nuisance.fit(panel, outcome_specs=outcome_specs, fit_q=needs_q)
        gaw = _gaw_for(cfg, panel, nuisance, axes, spec)
        res.c = gaw.c if gaw is not None else float("nan")
        baw = cfg.baw_config()
        bseed = substream_seed(cfg.seed, n, r, 2)
        surf = evaluate_surface(panel, spec.regime(0.0, 0.0), axes, cfg.estimators, gaw, baw, bseed, nuisance)
        for name in surf.estimators:
            res.values[name] = surf.values[name].ravel()
            res.variances[name] = surf.variances[name].ravel()
            res.ess[name] = surf.ess[name].ravel()
            res.extras[name] = {k: v.ravel() for k, v in surf.extras[name].items()}
            psi, _ = surf.optimum(name)
            res.optimum[name] = psi
            if psi is None:
                continue
            pot, val = regime_metrics(
                spec.regime(*psi),
                spec.regime(*spec.true_thresholds),
                lambda N, s, pol: simulate(spec, N, s, pol),
                cfg.n_ext,
                np.random.SeedSequence([cfg.seed, n, r, 3]),
            )
            res.pot[name], res.ext_value[name] = pot, val
            if cfg.ci_B > 0:
                boot = bootstrap_thresholds(
                    panel, spec.regime(0.0, 0.0), axes, name, cfg.ci_B, substream_seed(cfg.seed, n, r, 4),
                    gaw, baw, outcome_specs=outcome_specs,
                )
                res.covered[name] = boot.covers(spec.true_thresholds) if boot.draws.size else None
        res.spreads = _spreads(cfg, panel, nuisance, gaw, baw, spec, bseed)
    except (DtrError, np.linalg.LinAlgError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        log.warning("replicate n=%d r=%d failed: %s", n, r, res.error)
    return res


def _run_all(cfg: StudyConfig, threads: int) -> list[ReplicateResult]:
    jobs = [(n, r) for n in cfg.n for r in range(cfg.R)]
    if threads <= 1:
        return [run_replicate(cfg, n, r) for n, r in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        # map preserves job order, so the reduction below is schedule-independent
        return list(ex.map(run_replicate, [cfg] * len(jobs), [j[0] for j in jobs], [j[1] for j in jobs]))


def _mean_sd(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


def cell_metrics(estimates, truth) -> dict:
    """Per-cell Monte Carlo metrics from an ``(R, cells)`` array (NaN = missing)."""
    E = np.asarray(estimates, dtype=float)
    ok = np.isfinite(E)
    cnt = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, np.nansum(E, axis=0) / cnt, np.nan)
        dev = np.where(ok, E - mean, 0.0)
        var = np.where(cnt > 1, (dev**2).sum(axis=0) / (cnt - 1), np.nan)
        err = np.where(ok, E - truth, 0.0)
        rmse = np.where(cnt > 0, np.sqrt((err**2).sum(axis=0) / cnt), np.nan)
    return {"mean": mean, "var": var, "bias": mean - truth, "rmse": rmse, "count": cnt}


def _reference(name: str) -> str:
    t = EstimatorTag.parse(name)
    return EstimatorTag("IPW", t.augmented, t.normalized).name


def aggregate(cfg: StudyConfig, results: list[ReplicateResult]) -> dict:
    spec = cfg.spec
    axes = cfg.grid_axes()
    truth = true_surface(spec, axes).ravel()
    psi_true = spec.true_thresholds
    tables: dict = {k: [] for k in ("surface", "thresholds", "variance", "ess_diff", "weight_spread", "bias_bound", "failures")}
    for n in cfg.n:
        reps = [x for x in results if x.n == n]
        ok = [x for x in reps if x.error is None]
        tables["failures"].append({"n": n, "replicates": len(reps), "failed": len(reps) - len(ok),
                                   "errors": "; ".join(sorted({x.error for x in reps if x.error}))})
        if len(ok) < 2:
            continue
        metrics = {}
        for name in cfg.estimators:
            V = np.stack([x.values[name] for x in ok])
            metrics[name] = cell_metrics(V, truth)
        for name in cfg.estimators:
            m = metrics[name]
            ess_cells = np.nanmean(np.stack([x.ess[name] for x in ok]), axis=0)
            ref = _reference(name)
            if ref != name and ref in metrics:
                a, b = m["var"], metrics[ref]["var"]
                both = np.isfinite(a) & np.isfinite(b)
                pct = 100.0 * float(np.mean(a[both] < b[both])) if both.any() else float("nan")
            else:
                pct = float("nan")
            row = {"n": n, "estimator": name}
            for key, arr in (("var", m["var"]), ("bias", m["bias"]), ("rmse", m["rmse"]), ("ess", ess_cells)):
                row[f"{key}_mean"], row[f"{key}_sd"] = _mean_sd(arr)
            row["pct_var_reduction"] = pct
            row["cells"] = int(truth.size)
            row["cells_missing"] = int(np.sum(m["count"] < len(ok)))
            tables["surface"].append(row)

            # thresholds and regime-level metrics
            opts = np.array([x.optimum[name] for x in ok if x.optimum.get(name) is not None], dtype=float)
            row = {"n": n, "estimator": name, "replicates": len(opts)}
            for k in range(len(psi_true)):
                col = opts[:, k] if opts.size else np.array([])
                mu, sd = _mean_sd(col)
                q25, med, q75 = np.percentile(col, [25, 50, 75], method="linear") if col.size else (np.nan,) * 3
                row.update({f"psi{k + 1}_bias": mu - psi_true[k], f"psi{k + 1}_sd": sd, f"psi{k + 1}_mean": mu,
                            f"psi{k + 1}_median": float(med), f"psi{k + 1}_iqr": float(q75 - q25)})
            cov = [x.covered[name] for x in ok if x.covered.get(name) is not None]
            row["coverage"] = float(np.mean(cov)) if cov else float("nan")
            row["pot_mean"], row["pot_sd"] = _mean_sd([x.pot[name] for x in ok if name in x.pot])
            row["value_mean"], row["value_sd"] = _mean_sd([x.ext_value[name] for x in ok if name in x.ext_value])
            tables["thresholds"].append(row)

            # analytical vs Monte Carlo variance
            if EstimatorTag.parse(name).normalized:
                A = np.nanmean(np.stack([x.variances[name] for x in ok]), axis=0)
                am, asd = _mean_sd(A)
                mm, msd = _mean_sd(m["var"])
                both = np.isfinite(A) & np.isfinite(m["var"])
                tables["variance"].append({
                    "n": n, "estimator": name, "analytical_mean": am, "analytical_sd": asd,
                    "mc_mean": mm, "mc_sd": msd,
                    "ratio": float(A[both].mean() / m["var"][both].mean()) if both.any() else float("nan"),
                    "heuristic": EstimatorTag.parse(name).kind == "BAW",
                })

            if ref != name and ref in metrics:
                D = np.nanmean(np.stack([x.ess[name] - x.ess[ref] for x in ok]), axis=0)
                D = D[np.isfinite(D)]
                if D.size:
                    q = np.percentile(D, [0, 25, 50, 75, 100], method="linear")
                    tables["ess_diff"].append({
                        "n": n, "estimator": name, "reference": ref, "mean": float(D.mean()),
                        "min": float(q[0]), "q25": float(q[1]), "median": float(q[2]), "q75": float(q[3]),
                        "max": float(q[4]), "pct_positive": 100.0 * float(np.mean(D > 0)),
                    })

            if "bias_bound" in ok[0].extras.get(name, {}) and ref in metrics:
                gap = np.abs(np.stack([x.values[name] - x.values[ref] for x in ok]))
                bound = np.stack([x.extras[name]["bias_bound"] for x in ok])
                fin = np.isfinite(gap) & np.isfinite(bound)
                cell_gap = np.nanmean(np.where(fin, gap, np.nan), axis=0)
                cell_bound = np.nanmean(np.where(fin, bound, np.nan), axis=0)
                good = np.isfinite(cell_gap)
                tables["bias_bound"].append({
                    "n": n, "estimator": name, "reference": ref,
                    "bound_mean": float(np.nanmean(cell_bound)),
                    "gap_mean": float(np.nanmean(cell_gap)),
                    "pct_cells_within": 100.0 * float(np.mean(cell_gap[good] <= cell_bound[good])),
                    "pct_pairs_within": 100.0 * float(np.mean(gap[fin] <= bound[fin])),
                })
        for kind in ("IPW", "GAW", "BAW"):
            vals = [x.spreads[kind] for x in ok if kind in x.spreads]
            if vals:
                mu, sd = _mean_sd(vals)
                tables["weight_spread"].append({"n": n, "weights": kind, "spread_1_99_mean": mu, "spread_1_99_sd": sd})
    return tables


def run_study(cfg: StudyConfig, out_dir=None, threads: int = 1) -> dict:
    """Run every (n, replicate) job and aggregate.

    Replicate ``r`` at size ``n`` draws from the substream ``(seed, n, r)``, so
    outputs do not depend on ``threads``. When ``out_dir`` is given, every
    table is written as CSV next to ``manifest.json``.
    """
    results = _run_all(cfg, threads)
    tables = aggregate(cfg, results)
    tables["replicates"] = [
        {"n": x.n, "r": x.r, "c": x.c, "error": x.error or "",
         **{f"{k}_psi": v for k, v in x.optimum.items()}}
        for x in results
    ]
    if out_dir is not None:
        out = Path(out_dir)
        names = []
        for key, rows in tables.items():
            fname = f"{key}.csv"
            write_csv(out / fname, rows)
            names.append(fname)
        manifest = {**cfg.to_dict(), "outputs": sorted(names), "footer": FOOTER}
        write_json(out / "manifest.json", manifest)
    return tables


def load_manifest(path) -> StudyConfig:
    import json

    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d.pop("footer", None)
    for key in ("n", "axes", "grid_step", "estimators", "windows"):
        if d.get(key) is not None:
            d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
    return StudyConfig.from_dict(d)
