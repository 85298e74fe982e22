"""Command-line front end: ``fedvar {run,verify,hetero,table2,fig1,stepsize}``.

Exit codes: 0 success, 1 a check or experiment failed, 2 usage or config error.
Data goes to stdout and output files, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import algorithms as alg
from .harness import (
    ExperimentFailure,
    RunConfig,
    aggregate,
    export_aggregate_csv,
    export_csv,
    load_document,
    reproduce_fig1,
    reproduce_table2,
    run_trials,
)
from .heterogeneity import EstimationError, heterogeneity_report
from .objectives import CertificationError
from .oracles import (
    ExactOracle,
    NoiseStream,
    NotFiniteSupportError,
    RefutationError,
    SignPerturbationOracle,
    check_unbiasedness,
    refute_relaxed_growth,
    verify_abc,
)
from .problems import problem_from_spec

DEFAULT_SEED = 42
TABLE2_HEADER = [
    "d", "zeta2_plus_psi2", "sigma_f_star", "fedavg_gap", "fedavg_se", "scaffold_gap", "scaffold_se",
    "fedavg_diverged", "scaffold_diverged",
]


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"fedvar: {msg}", file=sys.stderr)


def _seed(args, fallback: int | None = None) -> int:
    if args.seed is not None:
        s = args.seed
    elif os.environ.get("FEDVAR_SEED"):
        try:
            s = int(os.environ["FEDVAR_SEED"], 0)
        except ValueError:
            raise UsageError(f"FEDVAR_SEED is not an integer: {os.environ['FEDVAR_SEED']!r}")
    else:
        s = DEFAULT_SEED if fallback is None else fallback
    if not 0 <= s < 2**64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    return s


def _u64(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")


def _read_doc(path) -> dict:
    if path is None:
        raise UsageError("--config is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = load_document(p)
    except Exception as exc:  # any parse failure is a config error
        raise UsageError(f"cannot parse {p}: {exc}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a mapping")
    return doc


def _problem_doc(doc: dict) -> dict:
    spec = doc.get("problem", doc)
    if not isinstance(spec, dict) or not ("family" in spec or "agents" in spec):
        raise UsageError("config needs a problem with a 'family' or an 'agents' list")
    return spec


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# subcommands ----------------------------------------------------------------


def cmd_run(args) -> int:
    doc = _read_doc(args.config)
    try:
        cfg = RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    overrides = {"base_seed": _seed(args, cfg.base_seed)}
    if args.runs is not None:
        overrides["n_runs"] = args.runs
    try:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
        cfg.build_problem()
        cfg.policy()
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}")
    out = _out_dir(args)
    print(f"# seed={cfg.base_seed} fingerprint={cfg.fingerprint}")
    records = run_trials(cfg, args.jobs)
    export_csv(records, out / "trajectories.csv")
    try:
        agg = aggregate(records)
    except ExperimentFailure as exc:
        _err(str(exc))
        return 1
    export_aggregate_csv([agg], out / "aggregate.csv")
    print(f"final_mean_gap={agg.final_mean_gap!r} n_effective={agg.n_effective} n_diverged={agg.n_diverged}")
    return 0


def cmd_verify(args) -> int:
    doc = _read_doc(args.config)
    try:
        problem = problem_from_spec(_problem_doc(doc))
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid problem: {exc}")
    opts = doc.get("verify", {})
    lo, hi = opts.get("probe_range", (-10.0, 30.0))
    probes = np.linspace(float(lo), float(hi), int(opts.get("n_probes", 1000)))
    pairs = [tuple(map(float, p)) for p in opts.get("relaxed_growth_pairs", [(1, 1), (4, 4), (10, 10)])]
    seed = _seed(args)
    print(f"# seed={seed}")
    failed = 0
    for i, o in enumerate(problem.oracles):
        if problem.dim != 1:
            raise UsageError("verify works on one-dimensional problems")
        claim = o.claimed if o.claimed is not None else (0.0, 0.0)
        stream = NoiseStream(seed=seed, agent=i)
        reports = [verify_abc(o, claim[0], claim[1], probes, n_samples=None if o.finite_support else 1000, stream=stream)]
        reports.append(check_unbiasedness(o, probes[:: max(1, len(probes) // 50)], stream=stream))
        for r in reports:
            print(f"agent {i + 1:>2} [{o.noise_kind}] {r.line()}")
            failed += not r.passed
        if isinstance(o, SignPerturbationOracle):
            for s2, e2 in pairs:
                try:
                    x_w = refute_relaxed_growth(o, s2, e2)
                    print(f"agent {i + 1:>2} [{o.noise_kind}] PASS  relaxed growth (σ²={s2:g}, η²={e2:g}) refuted at x={x_w!r}")
                except (RefutationError, NotFiniteSupportError) as exc:
                    print(f"agent {i + 1:>2} [{o.noise_kind}] FAIL  relaxed growth (σ²={s2:g}, η²={e2:g}): {exc}")
                    failed += 1
        elif not isinstance(o, ExactOracle):
            print(f"agent {i + 1:>2} [{o.noise_kind}] SKIP  relaxed-growth refutation (sign-perturbation oracles only)")
    print(f"# {failed} failed check(s)")
    return 1 if failed else 0


def cmd_hetero(args) -> int:
    doc = _read_doc(args.config)
    spec = _problem_doc(doc)
    if args.d is not None:
        if len(args.d) != 1:
            raise UsageError("hetero takes a single --d")
        spec = {**spec, "d": args.d[0]}
    try:
        problem = problem_from_spec(spec)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid problem: {exc}")
    opts = doc.get("hetero", {})
    rho = opts.get("rho")
    try:
        rep = heterogeneity_report(
            problem,
            bgd=bool(opts.get("bgd", True)),
            rho=None if rho is None else (int(rho[0]), float(rho[1])),
            bgd_grid=int(opts.get("bgd_grid", 100_001)),
        )
    except (EstimationError, CertificationError, ValueError) as exc:
        _err(f"estimation failed: {exc}")
        return 1
    print(rep.to_json(labels=problem.labels, seed=_seed(args)))
    return 0 if rep.bound_check is None or rep.bound_check.passed else 1


def cmd_table2(args) -> int:
    seed = _seed(args)
    kw = {}
    if args.config:
        doc = _read_doc(args.config)
        allowed = {"d_values", "T", "Q", "alpha", "n_runs", "x0", "record_every", "bgd_grid"}
        extra = set(doc) - allowed
        if extra:
            raise UsageError(f"unknown table2 settings: {sorted(extra)}")
        kw.update(doc)
    if args.d is not None:
        kw["d_values"] = args.d
    if args.runs is not None:
        kw["n_runs"] = args.runs
    out = _out_dir(args)
    print(f"# seed={seed}")
    try:
        rows, records, aggs = reproduce_table2(base_seed=seed, jobs=args.jobs, **kw)
    except ExperimentFailure as exc:
        _err(str(exc))
        return 1
    with open(out / "table2.csv", "w") as fh:
        fh.write(",".join(TABLE2_HEADER) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[k]) for k in TABLE2_HEADER) + "\n")
    export_csv(records, out / "trajectories.csv")
    export_aggregate_csv(aggs, out / "aggregate.csv")
    print(f"{'d':>8} {'zeta2+psi2':>12} {'sigma_f*':>10} {'FedAvg gap':>14} {'SCAFFOLD gap':>14}")
    for r in rows:
        print(
            f"{r['d']:>8g} {r['zeta2_plus_psi2']:>12.6f} {r['sigma_f_star']:>10.6g} "
            f"{r['fedavg_gap']:>14.6g} {r['scaffold_gap']:>14.6g}"
        )
    return 0


def cmd_fig1(args) -> int:
    seed = _seed(args)
    kw = {}
    if args.config:
        doc = _read_doc(args.config)
        allowed = {"stepsizes", "T", "Q", "n_runs", "x0", "record_every", "control"}
        extra = set(doc) - allowed
        if extra:
            raise UsageError(f"unknown fig1 settings: {sorted(extra)}")
        kw.update(doc)
    if args.stepsizes is not None:
        kw["stepsizes"] = args.stepsizes
    if args.runs is not None:
        kw["n_runs"] = args.runs
    out = _out_dir(args)
    print(f"# seed={seed}")
    try:
        records, aggs = reproduce_fig1(base_seed=seed, jobs=args.jobs, **kw)
    except ExperimentFailure as exc:
        _err(str(exc))
        return 1
    export_csv(records, out / "trajectories.csv")
    export_aggregate_csv(aggs, out / "aggregate.csv")
    for a in aggs:
        print(f"{a.algorithm:>13} stepsize={a.stepsize} final_mean_gap={a.final_mean_gap:.6g}")
    return 0


def cmd_stepsize(args) -> int:
    L, C, Q, T, n = args.L, args.C, args.Q, args.T, args.n
    if L <= 0 or C < 0 or Q < 1 or T < 1 or n < 1 or args.eta_s <= 0:
        raise UsageError("need L > 0, C >= 0, Q, T, n >= 1 and eta_s > 0")
    kind = args.alg
    if kind == "fedavg":
        value = alg.stepsize_theorem1(L, C, Q, T, n)
        caps = alg.theorem1_caps(L, C, Q, T, n)
        print(f"alpha={value!r}")
    elif kind == "fedavg_c0":
        if C != 0:
            raise UsageError("fedavg_c0 assumes C = 0")
        value = alg.stepsize_corollary1(L, Q, T, n)
        caps = alg.theorem1_caps(L, 0.0, Q, T, n)
        print(f"alpha={value!r}")
    elif kind in ("scaffold", "scaffold_c0"):
        if kind == "scaffold_c0" and C != 0:
            raise UsageError("scaffold_c0 assumes C = 0")
        variant = "theorem3" if kind == "scaffold" else "corollary2"
        s = alg.stepsize_scaffold(L, C, Q, T, n, args.eta_s, variant)
        value = s.eta_tilde
        caps = alg.scaffold_caps(L, C, Q, T, n, args.eta_s)
        print(f"eta_tilde={s.eta_tilde!r} eta_a={s.eta_a!r} eta_s={s.eta_s!r}")
    else:
        caps = alg.diminishing_caps(L, C, Q)
        value = min(caps.values())
        print(f"alpha_cap={value!r}")
    ok = alg.caps_satisfied(value, caps)
    for name, cap in caps.items():
        print(f"  {'ok ' if ok[name] else 'VIOLATED'} {name} = {cap if math.isfinite(cap) else 'inf'}")
    return 0 if all(ok.values()) else 1


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", type=_u64, help=f"base seed (else $FEDVAR_SEED, else {DEFAULT_SEED})")
    common.add_argument("--jobs", type=int, default=1, help="worker processes; results do not depend on it")

    p = argparse.ArgumentParser(prog="fedvar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="run one experiment config and write CSVs")
    s.add_argument("--runs", type=int, help="override n_runs")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", parents=[common], help="check the oracles' variance claims")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("hetero", parents=[common], help="heterogeneity report as JSON")
    s.add_argument("--d", type=float, nargs="+", help="override the problem parameter d")
    s.set_defaults(func=cmd_hetero)

    s = sub.add_parser("table2", parents=[common], help="heterogeneity measures and gaps per d")
    s.add_argument("--d", type=float, nargs="+", help="d values (default -100 -50 -20 -2)")
    s.add_argument("--runs", type=int, help="trials per (algorithm, d)")
    s.set_defaults(func=cmd_table2)

    s = sub.add_parser("fig1", parents=[common], help="gap curves for a stepsize sweep")
    s.add_argument("--stepsizes", type=float, nargs="+")
    s.add_argument("--runs", type=int, help="trials per (algorithm, stepsize)")
    s.set_defaults(func=cmd_fig1)

    s = sub.add_parser("stepsize", help="theory stepsize and its caps")
    s.add_argument("--alg", choices=["fedavg", "fedavg_c0", "scaffold", "scaffold_c0", "diminishing"], default="fedavg")
    s.add_argument("--L", type=float, required=True)
    s.add_argument("--C", type=float, default=0.0)
    s.add_argument("--Q", type=int, required=True)
    s.add_argument("--T", type=int, default=1)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--eta-s", dest="eta_s", type=float, default=1.0)
    s.set_defaults(func=cmd_stepsize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    if getattr(args, "runs", None) is not None and args.runs < 1:
        parser.error("--runs must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
