"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data error, 4 statistical error
(no adherers, separation, every window disqualified).
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

import numpy as np

from .core import BawConfig, Clause, DataError, Direction, DtrError, GawConfig, Regime
from .estimators import ESTIMATOR_NAMES, EstimatorTag
from .glm import FeatureSpec, Nuisance
from .io import dumps, ingest_csv, load_config, write_csv, write_json, write_panel
from .simgen import DgpSpec, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAT = 0, 2, 3, 4

_CLAUSE = re.compile(r"^x(\d+)_(\d+)\s*(<=|>=)\s*(\S+)$")


class UsageError(Exception):
    pass


def parse_regime(text: str, values: dict | None = None) -> Regime:
    """``"x1_1<=350;x2_1<=450"``: stages split by ``;``, clauses by ``&``.

    ``x{t}_{j}`` names covariate ``j`` of stage ``t`` (1-based) and must sit in
    the ``t``-th stage. Thresholds may be names looked up in ``values``.
    """
    stages = []
    for t, part in enumerate(text.split(";"), start=1):
        clauses = []
        for raw in part.split("&"):
            m = _CLAUSE.match(raw.strip())
            if not m:
                raise UsageError(f"cannot parse clause {raw.strip()!r}; expected e.g. x1_1<=350")
            stage, idx, op, thr = int(m.group(1)), int(m.group(2)), m.group(3), m.group(4)
            if stage != t:
                raise UsageError(f"clause {raw.strip()!r} refers to stage {stage} but sits in stage {t}")
            if values is not None and thr in values:
                v = values[thr]
            else:
                try:
                    v = float(thr)
                except ValueError:
                    raise UsageError(f"threshold {thr!r} is neither a number nor a grid name") from None
            clauses.append(Clause(idx - 1, v, Direction(op)))
        stages.append(tuple(clauses))
    return Regime(tuple(stages))


def template_names(text: str) -> list[str]:
    """Threshold placeholders of a regime template, in stage/clause order."""
    names = []
    for part in text.split(";"):
        for raw in part.split("&"):
            m = _CLAUSE.match(raw.strip())
            if m and not _is_number(m.group(4)):
                names.append(m.group(4))
    return names


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_range(text: str) -> np.ndarray:
    """``start:stop:step`` (inclusive) or a ``|``-separated list."""
    if ":" in text:
        try:
            a, b, s = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"bad range {text!r}; expected start:stop:step") from None
        if s <= 0 or b < a:
            raise UsageError(f"bad range {text!r}")
        k = int(np.floor((b - a) / s + 1e-9))
        return a + s * np.arange(k + 1)
    try:
        return np.array([float(v) for v in text.split("|")])
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None


def parse_grid(text: str) -> dict:
    """``psi1=150:500:5,psi2=200:600:5`` -> ``{name: values}``."""
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like name=start:stop:step")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_range(v.strip())
    return out


def parse_windows(text: str) -> tuple:
    """One window list per clause, comma separated: ``0:10:2,0:2:1``."""
    return tuple(tuple(parse_range(p.strip())) for p in text.split(","))


def parse_terms(text: str) -> tuple:
    """Per-stage feature terms: stages split by ``;``, terms by ``+``."""
    return tuple(FeatureSpec(tuple(t.strip() for t in st.split("+"))) for st in text.split(";"))


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("DTR_ENGINE_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--seed", type=int, default=None, help="random seed; printed when generated")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: $DTR_ENGINE_THREADS or 1)")
    common.add_argument("--config", default=None, help="flat 'section.key = value' file; flags override it")
    common.add_argument("--out-dir", default=".", help="directory for output files")

    p = argparse.ArgumentParser(prog="dtrweights", allow_abbrev=False, description="Value estimation for threshold treatment regimes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], allow_abbrev=False, help="draw a simulated panel to CSV")
    s.add_argument("--design", choices=("sim1", "sim2"), default="sim1")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--variance-params", action="store_true", help="read normal scale parameters as variances")
    s.add_argument("--out", default=None, help="CSV path (default: OUT_DIR/panel.csv)")

    def data_args(q):
        q.add_argument("--data", required=True, help="panel CSV (columns x{t}_{j}, a{t}, y)")
        q.add_argument("--missing", choices=("fail", "drop-row"), default="fail")
        q.add_argument("--propensity-terms", default=None, help="per-stage terms, e.g. '1+x1_1;1+x2_1+a1'")
        q.add_argument("--outcome-terms", default=None, help="per-stage outcome-model terms")

    def est_args(q):
        q.add_argument("--c", type=float, default=None)
        q.add_argument("--k", type=float, default=0.5)
        q.add_argument("--windows", default=None, help="window candidates per clause, e.g. 0:10:2,0:2:1")
        q.add_argument("--B", type=int, default=200)
        q.add_argument("--lambda-bias", type=float, default=1.0)
        q.add_argument("--refit", action="store_true", help="refit nuisance models inside each bootstrap replicate")

    e = sub.add_parser("estimate", parents=[common], allow_abbrev=False, help="value of one regime")
    data_args(e)
    est_args(e)
    e.add_argument("--regime", required=True, help="e.g. 'x1_1<=350;x2_1<=450'")
    e.add_argument("--estimator", default="nipw", help="comma list from: " + ",".join(ESTIMATOR_NAMES))

    f = sub.add_parser("surface", parents=[common], allow_abbrev=False, help="value surface over a threshold grid")
    data_args(f)
    est_args(f)
    f.add_argument("--template", required=True, help="e.g. 'x1_1<=psi1;x2_1<=psi2'")
    f.add_argument("--grid", required=True, help="e.g. psi1=150:500:5,psi2=200:600:5")
    f.add_argument("--estimator", default="nipw")

    w = sub.add_parser("select-window", parents=[common], allow_abbrev=False, help="bootstrap window selection at one regime")
    data_args(w)
    est_args(w)
    w.add_argument("--regime", required=True)
    w.add_argument("--augmented", action="store_true")
    w.add_argument("--unnormalized", action="store_true")

    st = sub.add_parser("study", parents=[common], allow_abbrev=False, help="simulation study with summary tables")
    st.add_argument("--manifest", default=None, help="re-run the study described by a manifest.json")
    st.add_argument("--design", choices=("sim1", "sim2"), default="sim1")
    st.add_argument("--n", default="1000", help="comma list of sample sizes")
    st.add_argument("--R", type=int, default=100)
    st.add_argument("--grid", default=None, help="explicit grid, e.g. psi1=150:500:25,psi2=200:600:25")
    st.add_argument("--grid-step", default=None, help="steps over the design's default ranges, e.g. 25,25")
    st.add_argument("--estimator", default="nipw,ngaw,nbaw")
    st.add_argument("--c", type=float, default=None)
    st.add_argument("--m", type=float, default=None, help="tune c = m / range of regime values")
    st.add_argument("--k", type=float, default=0.5)
    st.add_argument("--windows", default=None)
    st.add_argument("--B", type=int, default=200)
    st.add_argument("--lambda-bias", type=float, default=1.0)
    st.add_argument("--refit", action="store_true")
    st.add_argument("--n-ext", type=int, default=10_000)
    st.add_argument("--ci-B", type=int, default=0)
    st.add_argument("--true-ps", action="store_true", help="use generating propensities instead of fitted ones")
    st.add_argument("--variance-params", action="store_true")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    """Install config-file values as parser defaults, so flags still win."""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config", default=None)
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = load_config(known.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from exc
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = sub.choices.get(known.command)
    if target is None:
        return
    actions = {a.dest: a for a in target._actions}
    defaults = {}
    for key, value in cfg.items():
        section, name = key.split(".", 1)
        if section not in ("global", known.command):
            continue
        dest = name.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"config key {key!r} is not an option of {known.command!r}")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects true/false")
            defaults[dest] = value.lower() in ("true", "1", "yes")
        else:
            try:
                defaults[dest] = act.type(value) if act.type else value
            except ValueError:
                raise UsageError(f"config key {key!r}: bad value {value!r}") from None
            if act.choices and defaults[dest] not in act.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {sorted(act.choices)}")
    target.set_defaults(**defaults)
    for a in target._actions:
        if a.dest in defaults:
            a.required = False


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**31))
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _load(args):
    return ingest_csv(args.data, missing=args.missing)


def _nuisance(args, panel, augmented: bool) -> Nuisance:
    ps = parse_terms(args.propensity_terms) if args.propensity_terms else None
    qs = parse_terms(args.outcome_terms) if args.outcome_terms else None
    for specs in (ps, qs):
        if specs is not None and len(specs) != panel.T:
            raise UsageError(f"feature terms give {len(specs)} stages, panel has {panel.T}")
    return Nuisance.fit(panel, ps, qs, fit_q=augmented)


def _configs(args, tags, regime: Regime):
    gaw = baw = None
    if any(t.kind == "GAW" for t in tags):
        if args.c is None:
            raise UsageError("GAW estimators need --c")
        try:
            gaw = GawConfig(args.c, args.k)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if any(t.kind == "BAW" for t in tags) or args.command == "select-window":
        if args.windows is None:
            raise UsageError("windowed estimators need --windows")
        grids = parse_windows(args.windows)
        n_clauses = sum(len(c) for c in regime.stages)
        if len(grids) != n_clauses:
            raise UsageError(f"--windows gives {len(grids)} lists for {n_clauses} clauses")
        try:
            baw = BawConfig(grids, B=args.B, lambda_bias=args.lambda_bias, refit=args.refit)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return gaw, baw


def _tags(text: str):
    try:
        return [EstimatorTag.parse(e.strip()) for e in text.split(",")]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _estimate_json(est) -> dict:
    return {
        "estimator": est.estimator,
        "value": est.value,
        "variance": est.variance,
        "ess": est.ess,
        "diagnostics": est.diagnostics,
    }


def cmd_simulate(args) -> int:
    spec = DgpSpec(args.design, sd=not args.variance_params)
    panel = generate(spec, args.n, _seed(args))
    out = Path(args.out) if args.out else Path(args.out_dir) / "panel.csv"
    write_panel(out, panel)
    print(dumps({"command": "simulate", "design": spec.name, "n": args.n, "seed": args.seed, "path": str(out)}), end="")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .surface import evaluate_regime

    panel, report = _load(args)
    regime = parse_regime(args.regime)
    regime.check(panel)
    tags = _tags(args.estimator)
    gaw, baw = _configs(args, tags, regime)
    seed = _seed(args) if baw is not None else args.seed
    nuisance = _nuisance(args, panel, any(t.augmented for t in tags))
    res = evaluate_regime(panel, regime, tags, nuisance, gaw, baw, seed)
    errors = {k: v for k, v in res.items() if isinstance(v, DtrError)}
    body = {
        "command": "estimate",
        "regime": args.regime,
        "seed": seed,
        "ingest": report.as_dict(),
        "estimates": [_estimate_json(v) for v in res.values() if not isinstance(v, DtrError)],
    }
    if errors:
        body["errors"] = [{"estimator": k, "reason": v.reason, "message": str(v)} for k, v in errors.items()]
    write_json(Path(args.out_dir) / "estimate.json", body)
    print(dumps(body), end="")
    return EXIT_STAT if errors else EXIT_OK


def cmd_surface(args) -> int:
    from .surface import evaluate_surface

    panel, report = _load(args)
    grid = parse_grid(args.grid)
    names = template_names(args.template)
    if sorted(names) != sorted(grid):
        raise UsageError(f"template placeholders {names} do not match grid names {sorted(grid)}")
    template = parse_regime(args.template, {k: 0.0 for k in names})
    tags = _tags(args.estimator)
    gaw, baw = _configs(args, tags, template)
    seed = _seed(args) if baw is not None else args.seed
    nuisance = _nuisance(args, panel, any(t.augmented for t in tags))
    axes = [grid[k] for k in names]
    surf = evaluate_surface(panel, template, axes, tags, gaw, baw, seed, nuisance)
    rows = surf.rows()
    for r in rows:
        for k, name in enumerate(names):
            r[name] = r.pop(f"psi{k + 1}")
    out = Path(args.out_dir)
    write_csv(out / "surface.csv", rows, names + ["estimator", "value", "variance", "ess", "missing_reason"])
    optimum = {}
    for name in surf.estimators:
        psi, val = surf.optimum(name)
        optimum[name] = {"thresholds": dict(zip(names, psi)) if psi else None, "value": val,
                         "missing_cells": int(np.sum(surf.missing[name] != ""))}
    body = {"command": "surface", "template": args.template, "grid": args.grid, "seed": seed,
            "cells": int(np.prod(surf.shape)), "ingest": report.as_dict(), "optimum": optimum}
    write_json(out / "optimum.json", body)
    print(dumps(body), end="")
    return EXIT_OK


def cmd_select_window(args) -> int:
    from dataclasses import replace

    from .baw import select_window

    panel, report = _load(args)
    regime = parse_regime(args.regime)
    regime.check(panel)
    _, baw = _configs(args, [], regime)
    baw = replace(baw, augmented=args.augmented, normalized=not args.unnormalized)
    seed = _seed(args)
    nuisance = _nuisance(args, panel, args.augmented)
    res = select_window(panel, regime, baw, seed, nuisance=nuisance)
    out = Path(args.out_dir)
    write_csv(out / "windows.csv", res.rows())
    body = {
        "command": "select-window", "regime": args.regime, "seed": seed, "B": res.B,
        "lambda_bias": res.lambda_bias, "reference": res.reference, "delta_opt": list(res.delta_opt),
        "window_opt": [list(map(list, st)) for st in res.window_opt.bounds],
        "loss": float(res.loss[res.best]), "disqualified": int(res.disqualified.sum()),
    }
    write_json(out / "window.json", body)
    print(dumps(body), end="")
    return EXIT_OK


def cmd_study(args) -> int:
    from .study import StudyConfig, load_manifest, run_study

    if args.manifest:
        cfg = load_manifest(args.manifest)
    else:
        axes = grid_step = windows = None
        if args.grid and args.grid_step:
            raise UsageError("--grid and --grid-step are mutually exclusive")
        if args.grid:
            axes = tuple(tuple(v) for v in parse_grid(args.grid).values())
        if args.grid_step:
            grid_step = tuple(float(v) for v in args.grid_step.split(","))
        if args.windows:
            windows = parse_windows(args.windows)
        c = args.c
        if c is None and args.m is None:
            c = 0.18 if args.design == "sim1" else 1.0
        try:
            cfg = StudyConfig(
                design=args.design, sd=not args.variance_params, n=tuple(int(v) for v in args.n.split(",")),
                R=args.R, seed=_seed(args), axes=axes, grid_step=grid_step, estimators=tuple(args.estimator.split(",")),
                c=c, k=args.k, m=args.m, windows=windows, B=args.B, lambda_bias=args.lambda_bias, refit=args.refit,
                n_ext=args.n_ext, ci_B=args.ci_B, true_ps=args.true_ps,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    threads = args.threads if args.threads is not None else _default_threads()
    tables = run_study(cfg, args.out_dir, threads=threads)
    print(dumps({"command": "study", "out_dir": str(args.out_dir), "tables": sorted(tables)}), end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "surface": cmd_surface,
    "select-window": cmd_select_window,
    "study": cmd_study,
}


def _error(reason: str, message: str) -> None:
    print(dumps({"error": {"reason": reason, "message": message}}), end="")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        print(f"dtrweights: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dtrweights {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        _error(exc.reason, str(exc))
        return EXIT_DATA
    except DtrError as exc:
        _error(exc.reason, str(exc))
        return EXIT_STAT
    except (IndexError, ValueError) as exc:
        # regime/spec mismatches against the loaded data
        print(f"dtrweights {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
