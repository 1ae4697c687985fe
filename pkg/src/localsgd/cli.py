"""Command line interface: run, sweep, theory, verify, info.

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 failed
verification.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__, data, engine, methods, problems, theory, verify
from .schemas import ConfigError, ExperimentConfig, dump_config, load_config, parse_config

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3


# -- problem and method assembly ------------------------------------------------

def build_problem(pb) -> problems.GlobalProblem:
    if pb.kind == "quadratic":
        q = pb.quadratic
        qs = (data.instance_spec(pb.instance, q.n, q.d, q.mu, q.seed) if pb.instance is not None
              else data.QuadraticSpec(q.n, q.m, q.d, q.mu, q.seed))
        return data.make_quadratic(qs)
    ds = data.load_libsvm(pb.dataset)
    part = data.partition(ds, pb.n, pb.partition, pb.partition_seed)
    return problems.make_logistic(ds, part, pb.mu, normalize=pb.normalize)


def _x0(cfg, problem):
    if cfg.run.x0 is None:
        return np.zeros(problem.d)
    x0 = np.asarray(cfg.run.x0, dtype=np.float64)
    if x0.shape != (problem.d,):
        raise ConfigError(f"x0 has length {x0.size}, the problem has dimension {problem.d}")
    return x0


def _report(cfg, spec, problem, x0, seed):
    try:
        return theory.theory_for(spec, problem, x0, seed, cfg.theory.route)
    except theory.TheoryUnsupported:
        return None


def resolve_gamma(g, report) -> float:
    if g != "theory":
        return float(g)
    if report is None:
        raise ConfigError("gamma='theory' but no stepsize bound is available for this method")
    return report.gamma_max


def _eta(cfg, report, gamma, mu) -> float:
    if cfg.method.eta_weight != "theory":
        return float(cfg.method.eta_weight)
    if report is None:
        raise ConfigError("eta_weight='theory' needs theory constants for this method")
    return min(gamma * mu, report.key.contraction / 4.0) if mu > 0 else 0.0


def _cell_path(base: Path, tags: list[str]) -> Path:
    if not tags:
        return base
    return base.with_name(base.stem + "_" + "_".join(tags) + base.suffix)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sidecar(path: Path, items) -> None:
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k}={_fmt(v)}\n")


def read_sidecar(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            k, _, v = line.rstrip("\n").partition("=")
            out[k] = v
    return out


def _stats(problem):
    het = problems.measure_heterogeneity(problem, [np.zeros(problem.d)])
    return het


# -- run one cell ------------------------------------------------------------------

def run_cell(cfg: ExperimentConfig, problem, spec, gamma_cfg, seed: int, out: Path, threads: int):
    """One trajectory; writes CSV and sidecar.  Returns (trajectory, error)."""
    x0 = _x0(cfg, problem)
    report = _report(cfg, spec, problem, x0, seed) if cfg.theory.enabled or gamma_cfg == "theory" else None
    gamma = resolve_gamma(gamma_cfg, report)
    eta = _eta(cfg, report, gamma, problem.mu)
    rc = engine.RunConfig(spec, gamma, cfg.run.K, eta, x0, seed, cfg.run.record_every)
    err = None
    try:
        tr = engine.run(rc, problem, threads=threads, stop_gap=cfg.run.stop_gap)
    except engine.DivergenceError as exc:
        tr, err = None, exc
    het = _stats(problem)
    meta = [("version", __version__), ("preset", spec.name), ("gamma", gamma), ("K", cfg.run.K),
            ("seed", seed), ("eta_weight", eta), ("L", problem.L), ("maxLij", problem.maxLij),
            ("L_flagged", problem.L_flagged),
            ("zeta_star_sq", het.zeta_star_sq if het.zeta_star_sq is not None else math.nan),
            ("sigma_star_sq", het.sigma_star_sq if het.sigma_star_sq is not None else math.nan)]
    if report is not None:
        meta += [("gamma_max", report.gamma_max), ("theta", report.rate(gamma).theta),
                 ("theory_route", report.key.route)]
    else:
        meta += [("gamma_max", math.nan), ("theta", math.nan)]
    if err is not None:
        meta += [("status", "diverged"), ("diverged_at", err.k)]
    else:
        meta += [("status", "ok"), ("total_grad_evals", tr.total_grad_evals),
                 ("final_f_gap_virtual", tr.f_gap_virtual[-1]), ("final_f_gap_avg", tr.f_gap_avg[-1])]
        if tr.stopped_at is not None:
            meta.append(("stopped_at", tr.stopped_at))
    meta.append(("config", dump_config(cfg)))
    out.parent.mkdir(parents=True, exist_ok=True)
    if tr is not None:
        with open(out, "w", newline="") as fh:
            tr.to_csv(fh)
    write_sidecar(out.with_name(out.name + ".meta"), meta)
    return tr, err, gamma


def _cells(cfg: ExperimentConfig, use_sweep: bool):
    """(gamma, tau, p, seed, tags) for every cell of the experiment."""
    mb = cfg.method
    gammas = mb.gamma if isinstance(mb.gamma, list) else [mb.gamma]
    loops = [(mb.tau, mb.p)]
    sw = cfg.sweep if use_sweep else None
    if sw is not None:
        if sw.gamma is not None:
            gammas = sw.gamma
        if sw.tau is not None:
            loops = [(t, None) for t in sw.tau]
        elif sw.p is not None:
            loops = [(None, p) for p in sw.p]
    multi_g, multi_l, multi_s = len(gammas) > 1, len(loops) > 1, len(cfg.run.seeds) > 1
    for g, (t, p), s in product(gammas, loops, cfg.run.seeds):
        tags = []
        if multi_g:
            tags.append(f"gamma{g}")
        if multi_l:
            tags.append(f"tau{t}" if t is not None else f"p{p}")
        if multi_s:
            tags.append(f"seed{s}")
        yield g, t, p, s, tags


def _execute(cfg: ExperimentConfig, threads: int, use_sweep: bool, index: bool) -> int:
    problem = build_problem(cfg.problem)
    base = Path(cfg.run.output)
    rows, diverged = [], False
    for g, t, p, s, tags in _cells(cfg, use_sweep):
        spec = cfg.method.spec(m=problem.m, tau=t, p=p)
        methods.validate(spec, problem)
        out = _cell_path(base, tags)
        tr, err, gamma = run_cell(cfg, problem, spec, g, s, out, threads)
        status = "ok" if err is None else "diverged"
        diverged |= err is not None
        final = tr.f_gap_avg[-1] if tr is not None else math.nan
        print(f"{out}: gamma={gamma!r} seed={s} status={status} final_f_gap_avg={final!r}")
        if err is not None:
            print(f"  {err}", file=sys.stderr)
        rows.append((str(out), gamma, t if t is not None else "", p if p is not None else "", s, status, final))
    if index:
        idx = base.with_name(base.stem + "_index.csv")
        with open(idx, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "gamma", "tau", "p", "seed", "status", "final_f_gap_avg"])
            for r in rows:
                w.writerow([r[0], repr(r[1]), r[2], r[3], r[4], r[5], repr(r[6])])
        print(f"index: {idx}")
    return EXIT_DIVERGED if diverged else EXIT_OK


# -- config from flags ----------------------------------------------------------------

def _kv_list(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {part!r}")
        out[k.strip()] = json.loads(v) if v.strip()[:1] in "-0123456789" else v.strip()
    return out


def _config_from_args(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        return cfg
    if not args.preset:
        raise ConfigError("give --config or --preset with --quadratic / --dataset")
    if args.quadratic:
        problem = {"kind": "quadratic", "quadratic": _kv_list(args.quadratic)}
        if args.instance is not None:
            problem["instance"] = args.instance
    elif args.dataset:
        problem = {"kind": "logistic", "dataset": args.dataset, "n": args.n, "mu": args.mu,
                   "partition": args.partition}
    else:
        raise ConfigError("give --quadratic or --dataset")
    method = {"preset": args.preset, "gamma": args.gamma if args.gamma == "theory" else float(args.gamma)}
    for k in ("tau", "p", "q", "r", "noise", "coupled_updates"):
        v = getattr(args, k, None)
        if v is not None:
            method[k] = v
    if args.full_gradients:
        method["full_gradients"] = True
    run = {"K": args.K, "seeds": args.seed or [0], "record_every": args.record_every, "output": args.output}
    doc = {"problem": problem, "method": method, "run": run, "theory": {"epsilon": args.epsilon}}
    return parse_config(json.dumps(doc), "<flags>")


def _add_common(sp):
    sp.add_argument("--config", help="experiment JSON document")
    sp.add_argument("--preset", choices=methods.PRESETS)
    sp.add_argument("--quadratic", help="synthetic quadratic, e.g. n=10,m=20,d=30,mu=1e-3,seed=0")
    sp.add_argument("--instance", type=int, help="quadratic instance type 0-3")
    sp.add_argument("--dataset", help="LibSVM file for logistic regression")
    sp.add_argument("--n", type=int, help="client count for --dataset")
    sp.add_argument("--mu", type=float, default=1e-4, help="regularization for --dataset")
    sp.add_argument("--partition", default="random", choices=("random", "label_sorted"))
    sp.add_argument("--gamma", default="theory")
    sp.add_argument("--tau", type=int)
    sp.add_argument("--p", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--r", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--full-gradients", action="store_true")
    sp.add_argument("--coupled-updates", dest="coupled_updates", type=lambda s: s.lower() in ("1", "true", "yes"))
    sp.add_argument("--K", type=int, default=1000)
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--record-every", type=int, default=1)
    sp.add_argument("--output", default="run.csv")
    sp.add_argument("--epsilon", type=float, default=1e-6)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localsgd", description="Local SGD simulator and theory calculator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "simulate and write CSV"), ("sweep", "simulate a parameter grid"),
                      ("theory", "print constants and stepsize bounds"),
                      ("verify", "audit assumptions empirically"), ("info", "problem statistics")):
        sp = sub.add_parser(name, help=hlp)
        _add_common(sp)
        if name in ("run", "sweep"):
            sp.add_argument("--threads", type=int, default=None, help="worker threads per run")
        if name == "theory":
            sp.add_argument("--format", choices=("table", "kv"), default="table")
        if name == "verify":
            sp.add_argument("--states", type=int, default=10)
            sp.add_argument("--draws", type=int, default=10_000)
    return ap


# -- subcommands ----------------------------------------------------------------------

def cmd_run(args, sweep=False) -> int:
    cfg = _config_from_args(args)
    threads = args.threads if args.threads is not None else cfg.run.threads
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    return _execute(cfg, threads, use_sweep=sweep, index=sweep)


def cmd_theory(args) -> int:
    cfg = _config_from_args(args)
    problem = build_problem(cfg.problem)
    spec = cfg.method.spec(m=problem.m)
    methods.validate(spec, problem)
    seed = cfg.run.seeds[0]
    try:
        rep = theory.theory_for(spec, problem, _x0(cfg, problem), seed, cfg.theory.route)
    except theory.TheoryUnsupported as exc:
        raise ConfigError(f"theory declined: {exc}") from None
    g = cfg.method.gamma
    gamma = None if g == "theory" or isinstance(g, list) else float(g)
    items = [("preset", spec.name)] + rep.items(gamma, cfg.theory.epsilon)
    if args.format == "kv":
        for k, v in items:
            print(f"{k}={_fmt(v)}")
    else:
        w = max(len(k) for k, _ in items)
        for k, v in items:
            print(f"{k:<{w}}  {v:.6g}" if isinstance(v, float) else f"{k:<{w}}  {v}")
        if rep.rate(gamma).exceeds_max_stepsize:
            print("warning: gamma exceeds the stepsize bound; the rate is not guaranteed", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config_from_args(args)
    problem = build_problem(cfg.problem)
    spec = cfg.method.spec(m=problem.m)
    methods.validate(spec, problem)
    seed = cfg.run.seeds[0]
    g = cfg.method.gamma[0] if isinstance(cfg.method.gamma, list) else cfg.method.gamma
    gamma = resolve_gamma(g, _report(cfg, spec, problem, _x0(cfg, problem), seed))
    reports = verify.run_suite(spec, problem, gamma, seed=seed, states=args.states, draws=args.draws)
    for r in reports:
        print(r.line())
    for r in reports:
        key = r.name.replace("[", ".").replace("]", "")
        print(f"{key}.passed={str(r.passed).lower()}")
        print(f"{key}.observed={_fmt(r.observed)}")
        print(f"{key}.bound={_fmt(r.bound)}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_info(args) -> int:
    cfg = _config_from_args(args)
    pb = cfg.problem
    rows = []
    if pb.kind == "logistic":
        ds = data.load_libsvm(pb.dataset)
        part = data.partition(ds, pb.n, pb.partition, pb.partition_seed)
        rows += [("dataset", pb.dataset), ("rows", ds.count), ("features", ds.dim),
                 ("nonzeros", int(ds.indptr[-1])), ("clients", part.n), ("rows_per_client", part.m),
                 ("dropped_rows", ds.count - part.n * part.m),
                 ("positive_fraction", float((ds.labels > 0).mean()))]
        pos = [float((ds.labels[list(s)] > 0).mean()) for s in part.shards]
        rows += [("client_positive_fraction_min", min(pos)), ("client_positive_fraction_max", max(pos))]
    problem = build_problem(pb)
    het = _stats(problem)
    rows += [("kind", problem.kind), ("n", problem.n), ("m", problem.m), ("d", problem.d), ("mu", problem.mu),
             ("L", problem.L), ("maxLij", problem.maxLij), ("L_flagged", problem.L_flagged),
             ("zeta_sq_at_zero", het.zeta_sq_at)]
    if het.zeta_star_sq is not None:
        rows += [("zeta_star_sq", het.zeta_star_sq), ("sigma_star_sq", het.sigma_star_sq),
                 ("f_star", problem.optimum.f)]
    for k, v in rows:
        print(f"{k}={_fmt(v)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command in ("run", "sweep"):
            return cmd_run(args, sweep=args.command == "sweep")
        if args.command == "theory":
            return cmd_theory(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_info(args)
    except (ConfigError, methods.SpecError, data.ParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except problems.OptimumNotCertified as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
