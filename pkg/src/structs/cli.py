"""Command-line front end.

Exit codes: 0 success, 2 estimation or module error (including NoSolution),
3 bad input.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings

import numpy as np

from . import experiments, inference, io
from .errors import InputError, NoSolution, StructsError
from .estimator import SFit, fit_s
from .rho import RhoFunction
from .spherical import consistency_b0, constants_for, tune_cutoff

EXIT_OK, EXIT_MODULE, EXIT_INPUT = 0, 2, 3


def _b0(cfg):
    return consistency_b0(cfg.rho, cfg.st.k) if cfg.b0 is None else cfg.b0


def _manifest_path(out):
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return out + ".manifest.json"


def _fit_report(data, cfg, fit, with_inference):
    doc = fit.to_dict()
    if with_inference:
        res = inference.standardized_residuals(data, fit)
        doc["residuals"] = res.tolist()
        if cfg.rho.differentiable:
            rep = inference.sandwich(data, fit.xi, cfg.st, cfg.rho, fit.b0)
            doc["sandwich"] = rep.to_dict()
    return doc


def cmd_fit(args):
    started = io.now()
    cfg0 = io.load_config(args.config)
    seed = io.resolve_seed(args.seed, cfg0.solver.seed)
    cfg = io.load_config(args.config, seed)
    data = io.load_dataset(args.data, cfg.st.k)
    if data.k != cfg.st.k:
        raise InputError(f"{args.data}: k={data.k} does not match the structure (k={cfg.st.k})")
    code = EXIT_OK
    try:
        fit = fit_s(data, cfg.st, cfg.rho, _b0(cfg), cfg.solver)
        doc = _fit_report(data, cfg, fit, args.with_inference)
    except NoSolution as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.best is None:
            return EXIT_MODULE
        doc = exc.best.to_dict()
        code = EXIT_MODULE
    io.write_json(args.out, doc)
    io.write_manifest(_manifest_path(args.out), "fit", [args.data, args.config],
                      [args.out], vars(args), seed, started)
    return code


def cmd_constants(args):
    if args.k < 1:
        args.parser.error("--k must be a positive integer")
    if (args.bdp is None) == (args.c0 is None):
        args.parser.error("give exactly one of --bdp and --c0")
    c0 = args.c0 if args.c0 is not None else tune_cutoff(args.rho_kind, args.k, args.bdp)
    rho = RhoFunction(args.rho_kind, c0)
    if rho.differentiable:
        doc = constants_for(rho, args.k, args.b0).to_dict()
    else:
        b0 = consistency_b0(rho, args.k) if args.b0 is None else args.b0
        doc = {"k": args.k, "c0": c0, "b0": b0, "a0": rho.a0, "r": b0 / rho.a0}
    sys.stdout.write(io.dumps(doc))
    return EXIT_OK


def _sim_config(cfg, reps, seed):
    m = cfg.model
    try:
        return experiments.SimConfig(
            X=np.asarray(m["X"], dtype=float),
            st=cfg.st,
            beta0=np.asarray(m["beta0"], dtype=float),
            theta0=np.asarray(m["theta0"], dtype=float),
            rho=cfg.rho,
            n=int(m.get("n", 100)),
            reps=int(reps),
            seed=seed,
            solver=cfg.solver if "solver" in cfg.raw else experiments.MC_SOLVER,
            b0=cfg.b0,
        )
    except KeyError as exc:
        raise InputError(f"model section lacks {exc}") from exc
    except ValueError as exc:
        raise InputError(f"model: {exc}") from exc


def cmd_simulate(args):
    started = io.now()
    cfg = io.load_config(args.config)
    seed = io.resolve_seed(args.seed, cfg.raw.get("seed", 0))
    sim = _sim_config(cfg, args.reps, seed)
    os.makedirs(args.out, exist_ok=True)
    parallel = args.parallel if args.parallel is not None else experiments.default_workers()
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        res = experiments.run_replications(sim, parallel=parallel)
    json_path = os.path.join(args.out, "simresult.json")
    csv_path = os.path.join(args.out, "replications.csv")
    io.write_json(json_path, res.to_dict())
    res.write_csv(csv_path)
    io.write_manifest(os.path.join(args.out, "manifest.json"), "simulate", [args.config],
                      [json_path, csv_path], vars(args), seed, started)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_breakdown(args):
    started = io.now()
    cfg0 = io.load_config(args.config)
    seed = io.resolve_seed(args.seed, cfg0.solver.seed)
    cfg = io.load_config(args.config, seed)
    data = io.load_dataset(args.data, cfg.st.k)
    if not 0 <= args.m < data.n:
        raise InputError(f"--m must lie in [0, {data.n - 1}]")
    ts = None if args.t is None else [float(t) for t in args.t]
    out = experiments.breakdown_probe(data, cfg.st, cfg.rho, _b0(cfg), args.m, ts, cfg.solver)
    text = io.dumps(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        io.write_manifest(_manifest_path(args.out), "breakdown", [args.data, args.config],
                          [args.out], vars(args), seed, started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_influence(args):
    started = io.now()
    cfg0 = io.load_config(args.config)
    seed = io.resolve_seed(args.seed, cfg0.solver.seed)
    cfg = io.load_config(args.config, seed)
    data = io.load_dataset(args.data, cfg.st.k)
    if not cfg.rho.differentiable:
        raise InputError("influence functions need a differentiable rho")
    b0 = _b0(cfg)
    if args.fit:
        fit = SFit.from_dict(io.read_json(args.fit))
    else:
        fit = fit_s(data, cfg.st, cfg.rho, b0, cfg.solver)
    if args.point is not None:
        if not 0 <= args.point < data.n:
            raise InputError(f"--point must lie in [0, {data.n - 1}]")
        y0, X0 = data.y[args.point], data.X[args.point]
    else:
        if args.y is None or args.X is None:
            raise InputError("give --point or both --y and --X")
        y0 = np.asarray(args.y, dtype=float)
        X0 = np.asarray(args.X, dtype=float).reshape(data.k, data.q)
        if y0.shape != (data.k,):
            raise InputError(f"--y needs {data.k} values")
    D = inference.jacobian_empirical(data, fit.xi, cfg.st, cfg.rho, fit.b0)
    emp = inference.influence_function(y0, X0, fit.beta, fit.theta, cfg.st, cfg.rho,
                                       fit.b0, "empirical", D=D)
    const = constants_for(cfg.rho, cfg.st.k, fit.b0)
    ell = inference.influence_function(
        y0, X0, fit.beta, fit.theta, cfg.st, cfg.rho, fit.b0, "elliptical", const,
        EXtSinvX=inference.expected_xtsx(fit.V, data.X),
    )
    doc = {"empirical": emp.to_dict(), "elliptical": ell.to_dict()}
    text = io.dumps(doc)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        io.write_manifest(_manifest_path(args.out), "influence",
                          [args.data, args.config, args.fit], [args.out], vars(args),
                          seed, started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_residuals(args):
    started = io.now()
    data = io.load_dataset(args.data)
    try:
        fit = SFit.from_dict(io.read_json(args.fit))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.fit}: not a fit result ({exc})") from exc
    if fit.V.shape != (data.k, data.k) or fit.beta.size != data.q:
        raise InputError("fit dimensions do not match the data")
    res = inference.standardized_residuals(data, fit)
    order = np.argsort(-res, kind="stable")
    rank = np.empty(data.n, dtype=int)
    rank[order] = np.arange(1, data.n + 1)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "residual", "rank"])
        for i, (r, rk) in enumerate(zip(res, rank)):
            w.writerow([i, format(float(r), ".17g"), int(rk)])
    finally:
        if args.out:
            fh.close()
    if args.out:
        io.write_manifest(_manifest_path(args.out), "residuals", [args.data, args.fit],
                          [args.out], vars(args), fit.seed, started)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="structs", description="S-estimation for structured covariance models")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="compute the S-estimate")
    f.add_argument("--data", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--with-inference", action="store_true")
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("constants", help="print the normal-model constants")
    c.add_argument("--rho-kind", default="biweight", choices=["biweight", "hard_rejection"])
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--bdp", type=float)
    c.add_argument("--c0", type=float)
    c.add_argument("--b0", type=float)
    c.set_defaults(func=cmd_constants, parser=c)

    s = sub.add_parser("simulate", help="Monte Carlo replications")
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("breakdown", help="contamination probe")
    b.add_argument("--data", required=True)
    b.add_argument("--config", required=True)
    b.add_argument("--m", type=int, required=True)
    b.add_argument("--t", type=float, nargs="+")
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_breakdown)

    i = sub.add_parser("influence", help="influence function at a point")
    i.add_argument("--data", required=True)
    i.add_argument("--config", required=True)
    grp = i.add_mutually_exclusive_group()
    grp.add_argument("--point", type=int)
    grp.add_argument("--y", type=float, nargs="+")
    i.add_argument("--X", type=float, nargs="+", help="design entries, row-major")
    i.add_argument("--fit")
    i.add_argument("--out")
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_influence)

    r = sub.add_parser("residuals", help="standardized residuals of a fit")
    r.add_argument("--data", required=True)
    r.add_argument("--fit", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_residuals)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StructsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODULE


if __name__ == "__main__":
    sys.exit(main())
