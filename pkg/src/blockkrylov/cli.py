"""Command-line harness: solves, sweeps, kernel and overlap benchmarks, self-check.

Exit codes: 0 success, 1 non-convergence or failed check, 2 usage error,
3 input error (missing or malformed matrix/config), 4 solver breakdown.
Log verbosity comes from the ``BLOCKKRYLOV_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bicgstab import BicgstabConfig, bbicgstab_solve
from .blocklinalg import (
    RHS_GENERATOR,
    Kernels,
    MatrixMarketError,
    Preconditioner,
    SparseOperator,
    bdot_cost,
    baxpy_cost,
    bop_cost,
    generate_poisson2d,
    generate_rhs,
    intensity,
    load_matrixmarket,
)
from .cg import CG_VARIANTS, CgConfig, bcg_solve, canonical_variant
from .comms import LATENCY_MODELS, World, overlap_benchmark, parse_overlap
from .gmres import GmresConfig, OrthoStrategy, bgmres_solve
from .report import BreakdownError, SolverReport
from .salgebra import AlgebraSpec
from .testproblems import convdiff2d, lowrank_rhs, powergrid

log = logging.getLogger("blockkrylov")

EXIT_OK, EXIT_NOCONV, EXIT_USAGE, EXIT_INPUT, EXIT_BREAKDOWN = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every field of a run; config files use the same flat keys."""

    matrix: str | None = None
    generator: str = "poisson2d:50"
    s: int = 8
    algebra: str = "b"
    solver: str = "cg:classic"
    precond: str = "jacobi"
    eta: float | None = None
    tol: float = 1e-8
    norm: str = "max-column"
    restart: int = 100
    max_iter: int = 1000
    ranks: int = 1
    latency_model: str = "log2"
    overlap: str = "full"
    seed: int = 0
    rhs: str = "random"
    out: str | None = None

    def validate(self) -> "RunConfig":
        if self.s < 1:
            raise UsageError("--s must be positive")
        if self.ranks < 1:
            raise UsageError("--ranks must be positive")
        if self.latency_model not in LATENCY_MODELS:
            raise UsageError(f"unknown latency model '{self.latency_model}' (choose from {sorted(LATENCY_MODELS)})")
        try:
            parse_overlap(self.overlap)
            AlgebraSpec.parse(self.algebra, self.s)
            self.solver_spec()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if self.norm not in ("max-column", "frobenius"):
            raise UsageError(f"unknown norm '{self.norm}' (max-column, frobenius)")
        if self.tol <= 0 or self.max_iter < 1 or self.restart < 1:
            raise UsageError("--tol, --max-iter and --restart must be positive")
        return self

    def solver_spec(self) -> tuple[str, str]:
        family, _, variant = self.solver.partition(":")
        family = family.strip().lower()
        if family == "cg":
            return family, canonical_variant(variant or "classic")
        if family == "gmres":
            return family, OrthoStrategy.parse(variant or "modified").label()
        if family == "bicgstab":
            BicgstabConfig(variant=variant or "adaptive")
            return family, (variant or "adaptive").lower()
        raise ValueError(f"unknown solver family '{family}' (cg, gmres, bicgstab)")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if value is None:
        return None
    try:
        if kind == "int":
            return int(value)
        if kind in ("float", "float | None"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise InputError(f"config key '{key}': cannot interpret {value!r}") from None


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InputError(f"{p}: expected a flat JSON object")
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise InputError(f"{p}: unknown keys {unknown}")
    return {k: _coerce(k, v) for k, v in data.items()}


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(getattr(args, "config", None))
    for key in _FIELD_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "matrix", None) is not None:
        values["matrix"] = args.matrix
    return RunConfig(**values).validate()


# -- problem construction -----------------------------------------------------


def load_operator(cfg: RunConfig) -> tuple[SparseOperator, str]:
    if cfg.matrix:
        path = Path(cfg.matrix)
        if not path.is_file():
            raise InputError(f"matrix file not found: {path}")
        try:
            return load_matrixmarket(path), str(path)
        except MatrixMarketError as exc:
            raise InputError(str(exc)) from None
    return make_generator(cfg.generator), cfg.generator


def make_generator(spec: str) -> SparseOperator:
    name, *args = spec.split(":")
    try:
        if name == "poisson2d":
            return generate_poisson2d(int(args[0]) if args else 50)
        if name == "powergrid":
            n = int(args[0]) if args else 1138
            decades = float(args[1]) if len(args) > 1 else 4.0
            return powergrid(n, weight_decades=decades)
        if name == "convdiff":
            m = int(args[0]) if args else 40
            pe = float(args[1]) if len(args) > 1 else 200.0
            return convdiff2d(m, pe)
    except (ValueError, IndexError):
        raise UsageError(f"malformed generator spec '{spec}'") from None
    raise UsageError(f"unknown generator '{name}' (poisson2d:<m>, powergrid[:n[:decades]], convdiff[:m[:peclet]])")


def make_rhs(cfg: RunConfig, n: int) -> np.ndarray:
    if cfg.rhs == "random":
        return generate_rhs(n, cfg.s, cfg.seed)
    name, *args = cfg.rhs.split(":")
    if name == "lowrank" and len(args) == 2:
        try:
            return lowrank_rhs(n, cfg.s, int(args[0]), float(args[1]), cfg.seed)
        except ValueError:
            pass
    raise UsageError(f"unknown rhs spec '{cfg.rhs}' (random, lowrank:<rank>:<noise>)")


def run_solve(cfg: RunConfig) -> tuple[SolverReport, np.ndarray, SparseOperator, np.ndarray]:
    A, source = load_operator(cfg)
    B = make_rhs(cfg, A.n)
    try:
        M = Preconditioner.parse(cfg.precond, A)
        a = AlgebraSpec.parse(cfg.algebra, cfg.s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    world = World(cfg.ranks, latency=cfg.latency_model, overlap=cfg.overlap)
    family, variant = cfg.solver_spec()
    log.info("solving %s with %s:%s, algebra %s, s=%d", source, family, variant, a.label(), cfg.s)
    if family == "cg":
        sc = CgConfig(variant=variant, eta=1e4 if cfg.eta is None else cfg.eta, eps_tol=cfg.tol,
                      norm_kind=cfg.norm, max_iter=cfg.max_iter)
        X, rep = bcg_solve(A, B, M=M, algebra=a, cfg=sc, world=world)
    elif family == "gmres":
        gc = GmresConfig(strategy=OrthoStrategy.parse(variant), restart=cfg.restart,
                         eps_tol=cfg.tol, max_iter=cfg.max_iter)
        X, rep = bgmres_solve(A, B, M=M, algebra=a, cfg=gc, world=world)
    else:
        bc = BicgstabConfig(variant=variant, eta=100.0 if cfg.eta is None else cfg.eta, eps_tol=cfg.tol,
                            norm_kind=cfg.norm, max_iter=cfg.max_iter)
        X, rep = bbicgstab_solve(A, B, M=M, algebra=a, cfg=bc, world=world)
    rep.params["matrix"] = source
    rep.params["seed"] = cfg.seed
    rep.params["rhs"] = cfg.rhs
    return rep, X, A, B


def _status_code(rep: SolverReport) -> int:
    return EXIT_OK if rep.converged else EXIT_NOCONV


def _summary_line(rep: SolverReport) -> str:
    return (f"{rep.solver}:{rep.variant} algebra={rep.algebra} s={rep.s} n={rep.n} "
            f"status={rep.status} iterations={rep.iterations} reortho={rep.reortho_count} "
            f"rate={rep.convergence_rate():.6g} virtual_time_us={rep.virtual_time:.6g}")


# -- subcommands --------------------------------------------------------------


def cmd_solve(args) -> int:
    cfg = build_config(args)
    try:
        rep, *_ = run_solve(cfg)
    except BreakdownError as exc:
        print(f"breakdown: {exc}", file=sys.stderr)
        if cfg.out and exc.report is not None:
            exc.report.write(cfg.out)
        return EXIT_BREAKDOWN
    print(_summary_line(rep))
    if cfg.out:
        csv_path, json_path = rep.write(cfg.out)
        print(f"wrote {csv_path} and {json_path}")
    return _status_code(rep)


_SWEEP_KEYS = ("p", "eta", "solver", "ranks", "precond", "algebra", "s", "seed")


def parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, vals = text.partition("=")
    key = key.strip()
    if not sep or key not in _SWEEP_KEYS:
        raise UsageError(f"sweep must look like <key>=v1,v2,... with key in {', '.join(_SWEEP_KEYS)}")
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not values:
        raise UsageError("sweep needs at least one value")
    return key, values


def _apply_sweep(cfg: RunConfig, key: str, value: str) -> RunConfig:
    if key == "p":
        variant = cfg.algebra.split(":")[0]
        variant = variant if variant in ("bp", "bg") else "bp"
        return replace(cfg, algebra=f"{variant}:{int(value)}")
    return replace(cfg, **{key: _coerce(key, value)})


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    key, values = parse_sweep(args.sweep)
    rows = []
    worst = EXIT_OK
    for value in values:
        try:
            entry = _apply_sweep(cfg, key, value).validate()
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None
        try:
            rep, *_ = run_solve(entry)
            status, iters, ro, vt, rate = rep.status, rep.iterations, rep.reortho_count, rep.virtual_time, rep.convergence_rate()
            worst = max(worst, _status_code(rep))
        except BreakdownError as exc:
            rep = exc.report
            status, iters, ro, vt, rate = "breakdown", exc.iteration, (rep.reortho_count if rep else 0), \
                (rep.virtual_time if rep else 0.0), (rep.convergence_rate() if rep else 0.0)
            worst = max(worst, EXIT_BREAKDOWN)
        if cfg.out and rep is not None:
            rep.write(f"{cfg.out}_{key}{value}")
        params = entry.as_dict()
        params.pop("out")
        rows.append({"sweep_key": key, "sweep_value": value, **params, "status": status,
                     "iterations": iters, "reortho": ro, "virtual_time_us": repr(float(vt)),
                     "rate": repr(float(rate))})
        print(f"{key}={value}: status={status} iterations={iters} reortho={ro}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    table = buf.getvalue()
    if cfg.out:
        Path(f"{cfg.out}_sweep.csv").parent.mkdir(parents=True, exist_ok=True)
        Path(f"{cfg.out}_sweep.csv").write_text(table)
        print(f"wrote {cfg.out}_sweep.csv")
    else:
        sys.stdout.write(table)
    return worst


def bench_kernels(n: int, s: int, p_list: list[int], repeats: int = 3, seed: int = 0) -> list[dict]:
    """Measured seconds per right-hand side next to the model's counts."""
    m = max(int(round(n ** 0.5)), 2)
    A = generate_poisson2d(m)
    n = A.n
    X = generate_rhs(n, s, seed)
    Y = generate_rhs(n, s, seed + 1)
    rows = []
    for p in p_list:
        a = AlgebraSpec.block_parallel(s, p)
        k = Kernels()
        c = k.bdot(X, Y, a)
        timings = {}
        for kind, fn in (("bop", lambda: k.bop(A, X)), ("bdot", lambda: k.bdot(X, Y, a)),
                         ("baxpy", lambda: k.baxpy(Y, X, c))):
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            timings[kind] = best
        for kind, cost in (("bop", bop_cost(s, n, A.z)), ("bdot", bdot_cost(n, a)), ("baxpy", baxpy_cost(n, a))):
            f, lo, st = cost
            rows.append({"kernel": kind, "n": n, "s": s, "p": p, "q": a.q, "flops": f,
                         "words": lo + st, "intensity": intensity(kind, a, n, A.z),
                         "seconds_per_rhs": timings[kind] / s})
    return rows


def cmd_bench_kernels(args) -> int:
    s = args.s or 256
    p_list = [int(v) for v in args.p_list.split(",")] if args.p_list else [d for d in range(1, s + 1) if s % d == 0]
    bad = [p for p in p_list if p < 1 or s % p]
    if bad:
        raise UsageError(f"p values {bad} do not divide s={s}")
    rows = bench_kernels(args.n, s, p_list, args.repeats, args.seed or 0)
    _emit_table(rows, args.out)
    return EXIT_OK


def cmd_bench_overlap(args) -> int:
    try:
        rows = overlap_benchmark(args.ranks or 16, latency=args.latency_model or "log2",
                                 overlap=args.overlap or "full")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = [{"t_base": r.t_base, "t_work": r.t_work, "t_iter": r.t_iter, "t_ovhd": r.t_ovhd,
            "t_avail": r.t_avail, "avail_fraction": r.available_fraction} for r in rows]
    if not out:
        print("reduction latency is zero for this world; nothing to overlap")
        return EXIT_OK
    _emit_table(out, args.out)
    return EXIT_OK


def _emit_table(rows: list[dict], out: str | None) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(buf.getvalue())
        print(f"wrote {out}")
    else:
        sys.stdout.write(buf.getvalue())


def cmd_check(args) -> int:
    from .selfcheck import run_suite

    seed = args.seed or 0
    first = run_suite(seed)
    second = run_suite(seed)
    identical = first.text == second.text
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "check_run1.txt").write_text(first.text)
        (Path(args.out) / "check_run2.txt").write_text(second.text)
    for name, ok in first.results:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"{'PASS' if identical else 'FAIL'} reruns byte-identical ({len(first.text)} bytes)")
    return EXIT_OK if identical and first.ok else EXIT_NOCONV


# -- argument parsing ---------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file with run settings (flags win)")
    p.add_argument("--matrix", help="MatrixMarket file")
    p.add_argument("--generator", help="poisson2d:<m> | powergrid[:n[:decades]] | convdiff[:m[:peclet]]")
    p.add_argument("--s", type=int, help="number of right-hand sides")
    p.add_argument("--algebra", help="p | g | b | bp:<p> | bg:<p>")
    p.add_argument("--solver", help="cg:<variant> | gmres:<ortho> | bicgstab:<variant>")
    p.add_argument("--precond", help="none | jacobi | ssor[:omega[:sweeps]] | ilu0")
    p.add_argument("--eta", type=float, help="re-orthonormalization parameter (0 disables)")
    p.add_argument("--tol", type=float, help="relative residual tolerance")
    p.add_argument("--norm", help="max-column | frobenius")
    p.add_argument("--restart", type=int, help="GMRES restart length")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--ranks", type=int, help="simulated rank count")
    p.add_argument("--latency-model", dest="latency_model", help="log2 | zero")
    p.add_argument("--overlap", help="full | none | factor in [0, 1]")
    p.add_argument("--seed", type=int, help=f"RHS seed ({RHS_GENERATOR})")
    p.add_argument("--rhs", help="random | lowrank:<rank>:<noise>")
    p.add_argument("--out", help="output stem for CSV/JSON reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockkrylov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="run one solve")
    _add_run_flags(p)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("sweep", help="run one solve per value of a parameter")
    _add_run_flags(p)
    p.add_argument("--sweep", required=True, help=f"<key>=v1,v2,... with key in {', '.join(_SWEEP_KEYS)}")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("bench-kernels", help="kernel timings next to the cost model")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--s", type=int)
    p.add_argument("--p-list", dest="p_list", help="comma-separated p values (default: divisors of s)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_kernels)
    p = sub.add_parser("bench-overlap", help="doubling-protocol overlap table on the virtual clock")
    p.add_argument("--ranks", type=int)
    p.add_argument("--latency-model", dest="latency_model")
    p.add_argument("--overlap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_overlap)
    p = sub.add_parser("check", help="run the invariant self-test twice and compare outputs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for the two run transcripts")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("BLOCKKRYLOV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BreakdownError as exc:
        print(f"breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN


if __name__ == "__main__":
    sys.exit(main())
