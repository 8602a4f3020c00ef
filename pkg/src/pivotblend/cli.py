"""Command-line front end.

Exit codes: 0 success, 1 user or input error, 2 numerical non-convergence
(artifacts are still written), 3 internal invariant violation.

CSV input is pinned to one dialect: UTF-8, comma separated, '.' decimals, a
mandatory header row, and no missing values.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import simharness
from .densities import make_base
from .diagnostics import backward_blend, diagnostics_report, qq_pairs
from .errors import (ConfigError, DomainError, InternalError, NotConvergedError, OptimizationError, PartitionError,
                     PivotBlendError)
from .speus import FitOptions, SPFit, SpeusProblem, absorb_pivot, speus_fit

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3
NA_TOKENS = {"", "na", "nan", "null", "none", "n/a", "."}


class InputError(Exception):
    """Bad user input (file, CSV layout, flags)."""


# ---------------------------------------------------------------------------
# CSV in / out

def read_csv(path, response: str | None = None):
    """Parse a numeric CSV; returns ``(columns, matrix)`` or, with ``response``,
    ``(predictor_names, X, y)``."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    rows = list(csv.reader(io.StringIO(text), delimiter=","))
    if not rows or not any(c.strip() for c in rows[0]):
        raise InputError(f"{path}: empty file or missing header row")
    header = [c.strip() for c in rows[0]]
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names in header")
    try:
        [float(h) for h in header]
        raise InputError(f"{path}: the first row is numeric; a header row is required")
    except ValueError:
        pass
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
        vals = []
        for col, cell in enumerate(row, start=1):
            tok = cell.strip()
            if tok.lower() in NA_TOKENS:
                raise InputError(f"{path}: missing value at row {lineno}, column {col} ({header[col - 1]}); "
                                 "missing values are not imputed")
            try:
                v = float(tok)
            except ValueError:
                raise InputError(f"{path}: non-numeric value {tok!r} at row {lineno}, column {col}") from None
            if not math.isfinite(v):
                raise InputError(f"{path}: non-finite value at row {lineno}, column {col}")
            vals.append(v)
        data.append(vals)
    if not data:
        raise InputError(f"{path}: no data rows")
    M = np.array(data, dtype=float)
    if response is None:
        return header, M
    if response not in header:
        raise InputError(f"{path}: response column {response!r} not in header {header}")
    j = header.index(response)
    names = [h for k, h in enumerate(header) if k != j]
    return names, np.delete(M, j, axis=1), M[:, j]


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# shared builders

def _base(args):
    if args.base is None:
        # not set_defaults on the subparser: the action object is shared through the parent parser
        args.base = "huber" if args.command == "twopart" else "gaussian"
    params = {}
    if getattr(args, "delta", None) is not None:
        params["delta"] = args.delta
    return make_base(args.base, **params)


def _fit_opts(args) -> FitOptions:
    return FitOptions(m_fixed=args.m_fixed, equal_scales=args.equal_scales, tau_scale=args.tau,
                      tau_pivot=args.tau, seed=args.seed)


def _fit_record(fit: SPFit, names, response, include_intercept, residuals) -> dict:
    return {
        "columns": list(names),
        "response": response,
        "include_intercept": bool(include_intercept),
        "fit": fit.to_dict(),
        "absorb_pivot": absorb_pivot(fit, residuals),
    }


def _summary(fit: SPFit, names, absorb) -> str:
    lines = [f"status: {fit.status} (converged={fit.converged}, start={fit.init_used})"]
    for nm, b in zip(names, fit.beta):
        lines.append(f"  {nm:>12s}  {b: .6f}")
    lines.append(f"  {'(intercept)':>12s}  {fit.alpha: .6f}")
    sk = fit.skew
    lines.append(f"pivot m={sk.m:.6f}  sigma={sk.sigma:.6f}  nu={sk.nu:.6f}")
    lines.append(f"neg. log-likelihood {fit.neg_loglik:.6f}")
    if absorb["absorbable"]:
        lines.append(f"pivot absorbable into the intercept: alpha' = {absorb['alpha_prime']:.6f}")
    else:
        lines.append("pivot not absorbable: scales differ and the pivot splits the residuals")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args) -> int:
    names, X, y = read_csv(args.input, args.response)
    out = _outdir(args)
    base = _base(args)
    intercept = not args.no_intercept
    prob = SpeusProblem(X, y, base, include_intercept=intercept)
    fit = speus_fit(prob, _fit_opts(args))
    r = fit.residuals(X, y)
    rec = _fit_record(fit, names, args.response, intercept, r)
    write_json(out / "fit.json", rec)
    write_csv(out / "residuals.csv", ["row", "fitted", "residual"],
              [(i, float(y[i] - r[i]), float(r[i])) for i in range(y.size)])
    text = _summary(fit, names, rec["absorb_pivot"])
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if fit.converged else EXIT_NUMERIC


def _twopart_continuous_fit(prob, tfit):
    """The continuous half of a two-part fit as an ``SPFit`` (for diagnostics)."""
    return SPFit(beta=tfit.beta, alpha=tfit.alpha, skew=tfit.skew, neg_loglik=math.nan, objective=tfit.objective,
                 converged=tfit.converged, n_iter=tfit.n_outer, grad_norm=math.nan, init_used="two-part",
                 status="converged" if tfit.converged else "max_outer", base=prob.base)


def cmd_twopart(args) -> int:
    from .twopart import (TwoPartProblem, lambda_max, lambda_theory, s2_fit, s2_path,
                          select_lambda_scv)

    names, X, y = read_csv(args.input, args.response)
    out = _outdir(args)
    try:
        prob = TwoPartProblem(X, y, transform=args.transform, base=_base(args), tau=args.tau)
    except PartitionError as exc:
        raise InputError(f"{exc}. Use `pivotblend fit` for an all-positive response, or a plain logistic "
                         "model when every response is zero.") from None
    spec = args.lam
    path = None
    cv = None
    if spec == "scv":
        cv = select_lambda_scv(prob, args.folds, n_lambda=args.n_lambda, seed=args.seed)
        fit, path = cv.fit, cv.path
    elif spec == "path":
        path = s2_path(prob, args.n_lambda)
        fit = path[-1]
    elif spec == "theory":
        full = s2_fit(prob, 0.0)
        lam = lambda_theory(prob, q=args.q, A=args.A, skew=full.skew, B=args.B)
        fit = s2_fit(prob, lam)
    else:
        try:
            lam = float(spec)
        except ValueError:
            raise InputError(f"--lambda must be a number or one of path, scv, theory; got {spec!r}") from None
        if lam < 0:
            raise InputError("--lambda must be nonnegative")
        fit = s2_fit(prob, lam)
    if path is None:
        path = [fit]
    write_csv(out / "path.csv", ["lambda", "n_support", "objective", "converged", "support"],
              [(f.lambda_used, len(f.support), f.objective, int(f.converged), " ".join(names[k] for k in f.support))
               for f in path])
    if cv is not None:
        write_csv(out / "cv.csv", ["lambda", "mean", "se"] + [f"fold{k + 1}" for k in range(cv.cv_table.shape[0])],
                  [(float(cv.lambdas[j]), float(cv.mean[j]), float(cv.se[j]), *map(float, cv.cv_table[:, j]))
                   for j in range(cv.lambdas.size)])
    rec = {
        "columns": list(names),
        "response": args.response,
        "transform": prob.transform.to_dict(),
        "lambda_spec": spec,
        "lambda_max": float(lambda_max(prob)),
        "fit": fit.to_dict(),
        "support_names": [names[k] for k in fit.support],
    }
    if cv is not None:
        rec["scv"] = {"lambda_star": cv.lambda_star, "lambda_1se": cv.lambda_1se}
    write_json(out / "fit.json", rec)
    code = EXIT_OK if fit.converged else EXIT_NUMERIC
    sp = SpeusProblem(prob.Xc, prob.yt, prob.base)
    try:
        bundle = diagnostics_report(_twopart_continuous_fit(prob, fit), sp, level=args.level)
        write_json(out / "diagnostics.json", bundle.to_dict())
    except NotConvergedError:
        code = EXIT_NUMERIC
    print(f"lambda={fit.lambda_used:.6g}  support={rec['support_names']}  converged={fit.converged}")
    return code


def _load_fit_json(path, names):
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read fit file {path}: {exc}") from None
    if "fit" not in rec or "columns" not in rec:
        raise InputError(f"{path} is not a fit.json written by `pivotblend fit`")
    if list(rec["columns"]) != list(names):
        raise InputError(f"fit/data mismatch: fit columns {rec['columns']} vs data columns {list(names)}")
    return rec, SPFit.from_dict(rec["fit"])


def cmd_diagnose(args) -> int:
    names, X, y = read_csv(args.input, args.response)
    out = _outdir(args)
    if args.fit:
        rec, fit = _load_fit_json(args.fit, names)
        if rec.get("response") not in (None, args.response):
            raise InputError(f"fit/data mismatch: fit response {rec['response']!r} vs --response {args.response!r}")
        base = fit.base or _base(args)
        intercept = bool(rec.get("include_intercept", True))
    else:
        base = _base(args)
        intercept = not args.no_intercept
        fit = speus_fit(SpeusProblem(X, y, base, include_intercept=intercept), _fit_opts(args))
    prob = SpeusProblem(X, y, base, include_intercept=intercept)
    bundle = diagnostics_report(fit, prob, level=args.level)
    write_json(out / "diagnostics.json", bundle.to_dict())
    ws = backward_blend(fit.residuals(X, y), fit.skew)
    write_csv(out / "qq.csv", ["theoretical", "sample"], qq_pairs(ws, base))
    print(f"KS stat={bundle.ks['stat']:.4f}  p={bundle.ks['pvalue']:.4g}  verdict={'pass' if bundle.verdict else 'fail'}")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    names, X, y = read_csv(args.input, args.response)
    out = _outdir(args)
    base = _base(args)
    intercept = not args.no_intercept
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", simharness.UnreliableCIWarning)
        res = simharness.bootstrap(X, y, base, B=args.B, level=args.level, seed=args.seed, opts=_fit_opts(args),
                                   include_intercept=intercept)
    (out / "draws.csv").write_text(res.draws_csv(), encoding="utf-8")
    iv = res.intervals()
    iv["columns"] = list(names)
    write_json(out / "intervals.json", iv)
    for key in ("m", "sigma", "nu"):
        lo, hi = iv[key]
        print(f"{key:>5s}: [{lo:.6g}, {hi:.6g}]")
    for note in res.notes:
        print(f"warning: {note}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    target = args.preset
    if target.endswith(".toml"):
        spec = simharness.ExperimentSpec.from_toml(Path(target))
        if args.reps is not None or args.seed_given:
            spec = dataclasses.replace(spec, replications=args.reps or spec.replications,
                                       seed=args.seed if args.seed_given else spec.seed)
    else:
        if target not in simharness.PRESET_NAMES:
            raise InputError(f"unknown preset {target!r}; available presets: {', '.join(simharness.PRESET_NAMES)}")
        spec = simharness.preset(target, args.ratio, reps=args.reps or 50, seed=args.seed)
    out = _outdir(args)
    result = simharness.run_experiment(spec)
    simharness.write_run(result, out)
    m = result.metrics
    print(f"{spec.name}: Err(beta)={m.err_beta:.4f} Err(sigma)={m.err_sigma:.4f} Err(nu)={m.err_nu:.4f} "
          f"({m.n_ok} ok, {m.n_failed} failed)")
    return EXIT_OK if m.n_ok > 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--config", help="TOML file; keys override the flags they name")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", required=True)
    data.add_argument("--response", required=True)
    data.add_argument("--base", default=None, help="base density (default gaussian; huber for twopart)")
    data.add_argument("--delta", type=float, default=None, help="Huber threshold for --base huber")
    data.add_argument("--tau", type=float, default=None, help="penalty weight on scales and pivot")
    data.add_argument("--level", type=float, default=None)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--m-fixed", type=float, default=None)
    model.add_argument("--equal-scales", action="store_true")
    model.add_argument("--no-intercept", action="store_true")

    p = argparse.ArgumentParser(prog="pivotblend", description="Skewed pivot-blend regression tools.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, data, model], help="fit a skewed regression")
    tp = sub.add_parser("twopart", parents=[common, data], help="fit a sparse two-part model")
    tp.add_argument("--transform", default="log")
    tp.add_argument("--lambda", dest="lam", default="scv", help="number, path, scv or theory")
    tp.add_argument("--folds", type=int, default=5)
    tp.add_argument("--n-lambda", type=int, default=20)
    tp.add_argument("--q", type=float, default=2.0)
    tp.add_argument("--A", type=float, default=1.0)
    tp.add_argument("--B", type=float, default=1.0, help="additive constant in the theory penalty level")
    dg = sub.add_parser("diagnose", parents=[common, data, model], help="residual diagnostics")
    dg.add_argument("--fit", default=None, help="fit.json from a previous `fit` run")
    bs = sub.add_parser("bootstrap", parents=[common, data, model], help="pairs bootstrap intervals")
    bs.add_argument("--B", type=int, default=100)
    sm = sub.add_parser("simulate", parents=[common], help="run a simulation preset or TOML spec")
    sm.add_argument("preset", help=f"one of {', '.join(simharness.PRESET_NAMES)} or a .toml spec")
    sm.add_argument("--ratio", type=float, default=None)
    sm.add_argument("--reps", type=int, default=None)
    return p


_LEVEL_DEFAULTS = {"bootstrap": 0.90, "diagnose": 0.05, "twopart": 0.05}


def _apply_config(args, parser):
    if not args.config:
        return args
    try:
        data = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    data = data.get(args.command, data)
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest == "lambda":
            dest = "lam"
        if isinstance(val, dict):
            continue
        if not hasattr(args, dest):
            raise InputError(f"config key {key!r} is not a flag of `{args.command}`")
        setattr(args, dest, val)
        if dest == "seed":
            args.seed_given = True
    return args


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    handlers = {"fit": cmd_fit, "twopart": cmd_twopart, "diagnose": cmd_diagnose, "bootstrap": cmd_bootstrap,
                "simulate": cmd_simulate}
    try:
        args = _apply_config(args, parser)
        if getattr(args, "level", "absent") is None:
            args.level = _LEVEL_DEFAULTS.get(args.command, 0.05)
        if args.command == "simulate" and args.reps is not None and args.reps < 1:
            raise InputError("--reps must be at least 1")
        if args.command == "bootstrap" and args.B < 1:
            raise InputError("--B must be at least 1")
        return handlers[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (NotConvergedError, OptimizationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, ConfigError, PivotBlendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything unexpected is an invariant breach
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
