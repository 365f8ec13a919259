"""``gmse`` command-line interface.

Exit codes: 0 ok, 2 input error, 3 numerical fallback (ridge, pseudo-inverse
or an engine mismatch) unless ``--allow-fallback``, 4 nonconvergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .kronecker import KroneckerWorkspace, kf_gmse, kf_totals
from .linear import build_plugin_cache, gmse_lin_many, report_from_arrays
from .multinomial import Coefficients, FittedModel, SeparationError, fit
from .register import (
    CovariateSchema,
    Register,
    RegisterError,
    build_design_matrix,
    domain_partition,
    domain_vector,
    full_domain,
    read_register_csv,
    write_register_csv,
)
from .resampling import ResamplingError, ResamplingPlan, bootstrap_gmse, mc_oracle
from .simulation import ESTIMATORS, SealedTruth, generate_register, resolve_scenario, run_comparison

log = logging.getLogger("gmse")

EXIT_OK, EXIT_INPUT, EXIT_FALLBACK, EXIT_NONCONVERGED = 0, 2, 3, 4
EQUIVALENCE_RTOL = 1e-8


class InputError(Exception):
    pass


class Outcome(Exception):
    """Early termination with a specific exit code after outputs are written."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- shared helpers -----------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_inputs(args) -> tuple[Register, CovariateSchema]:
    for p in (args.register, args.schema):
        if not Path(p).is_file():
            raise InputError(f"no such file: {p}")
    schema = CovariateSchema.load(args.schema)
    return read_register_csv(args.register, schema), schema


def parse_domains(tokens, register: Register, schema: CovariateSchema):
    """``full``, ``column`` (one domain per level) or ``column=level``."""
    out = []
    for tok in tokens or ["full"]:
        tok = tok.strip()
        if tok == "full":
            out.append(full_domain(register))
            continue
        col, sep, level = tok.partition("=")
        if col not in register.columns:
            raise InputError(f"unknown domain column {col!r}")
        if not sep:
            out.extend(domain_partition(register, col, schema))
            continue
        if col in schema.names and schema[col].role != "identifier" and level not in schema[col].levels:
            raise InputError(f"unknown level {level!r} for domain column {col!r}")
        out.append(domain_vector(register, col, level, schema))
    return out


def _fit_options(args) -> dict:
    return {"tol": args.tol, "ridge": args.ridge}


def _fit_model(args, X, Y, lam, names, labels) -> tuple[FittedModel, dict]:
    coef_path = getattr(args, "coefficients", None)
    if coef_path:
        coefs = Coefficients.from_csv(coef_path)
        if coefs.column_names != tuple(names):
            raise InputError(f"{coef_path}: coefficient rows do not match the design columns")
        return FittedModel.from_coefficients(X, coefs), {"source": str(coef_path)}
    model = fit(X, Y, lam, column_names=names, category_labels=labels, **_fit_options(args))
    diag = {
        "iterations": model.iterations,
        "final_score_norm": model.final_score_norm,
        "score_tolerance": args.tol * model.n_sampled,
        "converged": model.converged,
        "ridge_used": model.ridge_used,
        "n_sampled": int(model.n_sampled),
    }
    return model, diag


def _workers(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


def _prepare(args):
    register, schema = _load_inputs(args)
    design = build_design_matrix(register, schema)
    Y = register.outcome_matrix()
    lam = register.sampled.astype(float)
    domains = parse_domains(args.domains, register, schema)
    t0 = time.perf_counter()
    model, diag = _fit_model(args, design.X, Y, lam, design.column_names, schema.category_labels)
    diag.update(N=register.N, K=schema.n_categories, J=design.J, fit_seconds=time.perf_counter() - t0)
    return register, schema, design, Y, lam, domains, model, diag


def _check_convergence(model: FittedModel, args) -> None:
    if not model.converged:
        raise Outcome(EXIT_NONCONVERGED, "model fit did not converge")
    if model.ridge_used and not args.allow_fallback:
        raise Outcome(EXIT_FALLBACK, "fit needed a regularised Newton step (use --allow-fallback to accept)")


def _linear_report(args, register, schema, design, Y, domains, model, diag, timing):
    """Run the selected engine(s); returns (report, flags)."""
    G = np.column_stack([d.gamma for d in domains])
    nkd = np.rint(G.T @ Y).astype(int)
    labels = schema.category_labels
    flags: list[str] = []
    results = {}
    if args.engine in ("standard", "both"):
        t0 = time.perf_counter()
        cache = build_plugin_cache(model, design.X, register.pi, ridge=args.ridge, allow_nonconverged=True)
        t1 = time.perf_counter()
        g = gmse_lin_many(cache, domains)
        t2 = time.perf_counter()
        timing.update(cache_build_seconds=t1 - t0, query_seconds=t2 - t1, queries=len(domains))
        results["standard"] = (G.T @ cache.P, g)
        diag["plugin"] = {"ridge_used": cache.ridge_used, "pseudo_inverse": cache.pseudo_inverse,
                          "notes": list(cache.diagnostics)}
        if cache.fallback:
            flags.extend(cache.diagnostics)
    if args.engine in ("kronecker", "both"):
        t0 = time.perf_counter()
        ws = KroneckerWorkspace(design.X, register.pi, schema.n_categories)
        gk = kf_gmse(ws, model.coefficients, G)
        results["kronecker"] = (kf_totals(ws, model.coefficients, G), gk)
        timing["kronecker_seconds"] = time.perf_counter() - t0
    if args.engine == "both":
        gs, gk = results["standard"][1], results["kronecker"][1]
        scale = np.maximum(np.abs(gs), np.finfo(float).eps * max(1.0, float(np.abs(gs).max())))
        rel = float(np.max(np.abs(gk - gs) / scale))
        diag["engine_max_relative_difference"] = rel
        if rel > EQUIVALENCE_RTOL:
            flags.append(f"engines disagree: max relative difference {rel:.3g}")
    theta, g = results["standard" if "standard" in results else "kronecker"]
    extra = G.T @ (model.fitted_probabilities * (1.0 - model.fitted_probabilities)) if args.draw else None
    return report_from_arrays(domains, theta, nkd, g, labels, extra), flags


def _print_report(report, limit: int = 40) -> None:
    print(f"{'domain':<20} {'category':<28} {'theta_hat':>12} {'n_kd':>6} {'gmse_lin':>14} {'cv':>9}")
    for r in report.rows[:limit]:
        cvs = "" if np.isnan(r.cv) else f"{100 * r.cv:.2f}%"
        print(f"{r.domain:<20} {r.category:<28} {r.theta_hat:12.1f} {r.n_kd:6d} {r.gmse_lin:14.1f} {cvs:>9}")
    if len(report.rows) > limit:
        print(f"... {len(report.rows) - limit} more rows in report.csv")


def _finish(args, flags) -> int:
    for f in flags:
        log.warning(f)
    if flags and not args.allow_fallback:
        raise Outcome(EXIT_FALLBACK, "numerical fallback flagged (use --allow-fallback to accept)")
    return EXIT_OK


# --- commands -------------------------------------------------------------------


def cmd_fit(args) -> int:
    register, schema = _load_inputs(args)
    design = build_design_matrix(register, schema)
    model, diag = _fit_model(args, design.X, register.outcome_matrix(), register.sampled.astype(float),
                             design.column_names, schema.category_labels)
    diag.update(N=register.N, K=schema.n_categories, J=design.J)
    out = Path(args.out)
    model.coefficients.to_csv(out / "coefficients.csv")
    _write_json(out / "diagnostics.json", diag)
    print(f"fit: {diag['iterations']} iterations, max|score| {diag['final_score_norm']:.3g}, "
          f"converged={diag['converged']}")
    _check_convergence(model, args)
    return EXIT_OK


def cmd_gmse(args) -> int:
    register, schema, design, Y, lam, domains, model, diag = _prepare(args)
    out = Path(args.out)
    if "iterations" in diag:
        model.coefficients.to_csv(out / "coefficients.csv")
    _check_convergence(model, args)
    timing = {"fit_seconds": diag.pop("fit_seconds")}
    report, flags = _linear_report(args, register, schema, design, Y, domains, model, diag, timing)
    report.to_csv(out / "report.csv", percent=args.percent)
    report.plot_data_csv(out / "plot_data.csv")
    _write_json(out / "diagnostics.json", diag)
    _write_json(out / "timing.json", timing)
    _print_report(report)
    return _finish(args, flags)


def _truth_probabilities(path: str, register: Register) -> np.ndarray:
    ids, truth = SealedTruth.from_csv(path)
    _, P = truth.unseal()
    pos = {u: i for i, u in enumerate(ids)}
    try:
        order = np.array([pos[u] for u in register.unit_ids])
    except KeyError as exc:
        raise InputError(f"{path}: no truth row for unit {exc.args[0]!r}") from None
    if P.shape[1] != register.n_categories:
        raise InputError(f"{path}: truth has {P.shape[1]} categories, register has {register.n_categories}")
    return P[order]


def cmd_validate(args) -> int:
    if args.mc and not args.truth:
        raise InputError("MC requires simulation truth (pass --truth)")
    register, schema, design, Y, lam, domains, model, diag = _prepare(args)
    _check_convergence(model, args)
    out = Path(args.out)
    timing = {"fit_seconds": diag.pop("fit_seconds")}
    report, flags = _linear_report(args, register, schema, design, Y, domains, model, diag, timing)
    G = np.column_stack([d.gamma for d in domains])
    plan = ResamplingPlan(B=args.B, G=args.G, M=args.M, seed=args.seed, workers=_workers(args), centre=args.centre)
    theta = G.T @ model.fitted_probabilities
    if args.B > 0:
        t0 = time.perf_counter()
        br = bootstrap_gmse(design.X, Y, lam, G, plan, theta_hat=theta, beta0=model.coefficients,
                            fit_options=_fit_options(args))
        timing["bootstrap_seconds"] = time.perf_counter() - t0
        diag["bootstrap_dropped"] = br.dropped
        for d, dom in enumerate(domains):
            report.attach("gmse_boot", dom.name, br.gmse[d])
            report.attach("cv_boot", dom.name, br.cv[d])
    if args.mc:
        p_true = _truth_probabilities(args.truth, register)
        t0 = time.perf_counter()
        mr = mc_oracle(design.X, p_true, register.pi, G, plan, beta0=model.coefficients,
                       fit_options=_fit_options(args))
        timing["mc_seconds"] = time.perf_counter() - t0
        diag["mc_dropped"] = mr.dropped
        for d, dom in enumerate(domains):
            report.attach("gmse_mc", dom.name, mr.gmse[d])
            report.attach("cv_mc", dom.name, mr.cv[d])
    report.to_csv(out / "report.csv", percent=args.percent)
    report.plot_data_csv(out / "plot_data.csv")
    _write_json(out / "diagnostics.json", diag)
    _write_json(out / "timing.json", timing)
    _print_report(report)
    return _finish(args, flags)


def cmd_simulate(args) -> int:
    try:
        scenario = resolve_scenario(args.scenario)
    except (FileNotFoundError, KeyError) as exc:
        raise InputError(f"cannot load scenario {args.scenario!r}: {exc}") from None
    if args.N:
        scenario = replace(scenario, N=args.N)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed, plan=replace(scenario.plan, seed=args.seed))
    plan = scenario.plan
    plan = replace(plan, B=args.B or plan.B, G=args.G or plan.G, M=args.M or plan.M)
    scenario = replace(scenario, plan=plan)
    out = Path(args.out)
    if args.write_register:
        register, truth = generate_register(scenario, 0)
        write_register_csv(register, out / "register.csv", scenario.schema.names)
        scenario.schema.save(out / "schema.json")
        scenario.true_beta.to_csv(out / "true_coefficients.csv")
        truth.to_csv(out / "truth.csv", register.unit_ids)
        print(f"wrote register (N={register.N}, n={register.n}) to {out}")
        return EXIT_OK
    estimators = args.estimators or list(ESTIMATORS)
    columns = args.domains or list(scenario.internal_domains + scenario.external_domains)
    t0 = time.perf_counter()
    study = run_comparison(scenario, S=args.S, estimators=estimators, domain_columns=columns,
                           workers=_workers(args), fit_options=_fit_options(args))
    elapsed = time.perf_counter() - t0
    study.to_csv(out / "study.csv")
    study.summary_csv(out / "summary.csv")
    _write_json(out / "timing.json", {"seconds": elapsed, "S": args.S or scenario.S, "estimators": estimators})
    print(f"{'category':<28} " + " ".join(f"{e + ' median':>12}" for e in estimators))
    summ = {(r["domain"], r["category"], r["estimator"]): r for r in study.summary()}
    for label in scenario.true_beta.category_labels:
        cells = [summ.get(("full", label, e)) for e in estimators]
        print(f"{label:<28} " + " ".join(f"{100 * c['median']:11.2f}%" if c else " " * 12 for c in cells))
    return EXIT_OK


def cmd_check(args) -> int:
    from . import selfcheck

    results = selfcheck.run(seed=args.seed)
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_FALLBACK


# --- parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("--register", required=True, help="register CSV")
        p.add_argument("--schema", required=True, help="covariate schema JSON")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--tol", type=float, default=1e-8, help="score tolerance, scaled by n")
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="worker processes for resampling")
    p.add_argument("--deterministic", action="store_true", help="serial execution")
    p.add_argument("--allow-fallback", action="store_true", help="exit 0 despite flagged numerical fallbacks")
    p.add_argument("-v", "--verbose", action="store_true")


def _report_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--domains", nargs="+", action="extend",
                   help="'full', a column (one domain per level) or column=level; repeatable")
    p.add_argument("--engine", choices=("standard", "kronecker", "both"), default="standard")
    p.add_argument("--coefficients", help="reuse a coefficients CSV instead of refitting")
    p.add_argument("--draw", action="store_true", help="add the multinomial-draw variant column")
    p.add_argument("--percent", action="store_true", help="write CVs as percentages")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmse", description="Linearised GMSE for mass-imputed register totals.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the multinomial model")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gmse", help="totals with linearised GMSE and CV per domain")
    _common(p)
    _report_opts(p)
    p.set_defaults(func=cmd_gmse)

    p = sub.add_parser("validate", help="add bootstrap (and Monte-Carlo) comparators to the report")
    _common(p)
    _report_opts(p)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--G", type=int, default=100)
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--mc", action="store_true", help="run the Monte-Carlo benchmark (needs --truth)")
    p.add_argument("--truth", help="truth CSV written by 'simulate --write-register'")
    p.add_argument("--centre", choices=("estimate", "mean"), default="estimate")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="synthetic-register comparison study")
    _common(p, data=False)
    p.add_argument("--scenario", required=True, help="packaged scenario name or .cfg path")
    p.add_argument("--S", type=int, default=None)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--G", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--N", type=int, default=None, help="override the register size")
    p.add_argument("--estimators", nargs="+", choices=ESTIMATORS)
    p.add_argument("--domains", nargs="+", action="extend", help="partition columns besides 'full'")
    p.add_argument("--write-register", action="store_true",
                   help="write one register, its schema and truth table instead of running the study")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="finite-difference and engine-equivalence self-tests")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is None and args.command in ("validate",):
        args.seed = 0
    if hasattr(args, "out"):
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except Outcome as exc:
        print(f"gmse: {exc}", file=sys.stderr)
        return exc.code
    except (InputError, RegisterError, FileNotFoundError, SeparationError) as exc:
        print(f"gmse: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ResamplingError as exc:
        print(f"gmse: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ValueError as exc:
        print(f"gmse: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
