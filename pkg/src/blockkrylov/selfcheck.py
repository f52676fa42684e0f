"""Deterministic invariant self-test used by ``blockkrylov check``.

Every section appends its numbers (as ``repr`` floats) and its report CSVs to
one transcript, so two runs with the same seed can be compared byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bicgstab import BICGSTAB_VARIANTS, BicgstabConfig, bbicgstab_solve
from .blocklinalg import Preconditioner, generate_poisson2d, generate_rhs
from .cg import CG_VARIANTS, CgConfig, bcg_solve
from .comms import World, overlap_benchmark, t_red_log2, tsqr
from .gmres import GmresConfig, OrthoStrategy, bgmres_solve
from .salgebra import AlgebraSpec, block_inner_product, normalize
from .testproblems import convdiff2d

ALGEBRAS = ("p", "g", "b", "bp:2", "bg:2")
TABLE_SYNCS = {"classic": 3, "two-reduction": 2, "one-reduction": 1, "gropp": 2, "pipelined": 1, "ghysels": 1}
TABLE_ALLOCS = {"classic": 4, "two-reduction": 4, "one-reduction": 6, "gropp": 6, "pipelined": 8, "ghysels": 10}


@dataclass
class SuiteResult:
    lines: list[str] = field(default_factory=list)
    results: list[tuple[str, bool]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    @property
    def ok(self) -> bool:
        return all(ok for _, ok in self.results)

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.results.append((name, bool(ok)))
        self.lines.append(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}".rstrip())


def _dump(rep) -> str:
    return json.dumps(rep.summary(include_wall=False), sort_keys=True, default=lambda o: repr(o))


def run_suite(seed: int = 0) -> SuiteResult:
    out = SuiteResult()
    rng = np.random.Generator(np.random.Philox(seed))

    for label in ALGEBRAS:
        a = AlgebraSpec.parse(label, 4)
        X, Y = rng.standard_normal((2, 40, 4))
        ip = block_inner_product(X, Y, a)
        sym = np.max(np.abs(ip.coeffs - block_inner_product(Y, X, a).coeffs.T))
        norm = abs(np.trace(ip.coeffs) - np.sum(X * Y))
        Q, sig = normalize(X, a)
        orth = np.max(np.abs(block_inner_product(Q, Q, a).coeffs - np.eye(4)))
        rec = np.max(np.abs(Q @ sig.coeffs - X))
        out.check(f"salgebra {label}", max(sym, norm, orth, rec) < 1e-12,
                  f"sym={sym!r} normality={norm!r} orth={orth!r} recon={rec!r}")

    A = generate_poisson2d(12)
    M = Preconditioner.jacobi(A)
    B = generate_rhs(A.n, 4, seed)
    hist = {}
    for v in CG_VARIANTS:
        X, rep = bcg_solve(A, B, M=M, algebra=AlgebraSpec.block(4),
                           cfg=CgConfig(variant=v, eta=0.0, eps_tol=1e-10), world=World(4))
        hist[v] = rep.frobenius_history()
        steady = rep.records[2]
        out.check(f"cg {v} table", steady.syncs == TABLE_SYNCS[v] and rep.allocations == TABLE_ALLOCS[v],
                  f"syncs={steady.syncs} overlapped={steady.overlapped} allocations={rep.allocations}")
        out.lines.append(rep.csv_text())
        out.lines.append(_dump(rep))
    ref = hist["classic"]
    for v, h in hist.items():
        k = min(len(h), len(ref), 15)
        dev = float(np.max(np.abs(h[:k] - ref[:k]) / ref[:k]))
        out.check(f"cg {v} equivalence", dev < 1e-8, f"max_rel_dev={dev!r}")

    N = convdiff2d(10, 20.0)
    Bn = generate_rhs(N.n, 4, seed + 1)
    ghist = {}
    for st in ("modified", "classical(2)", "pipelined(2)", "localized"):
        X, rep = bgmres_solve(N, Bn, algebra=AlgebraSpec.block(4),
                              cfg=GmresConfig(strategy=OrthoStrategy.parse(st), restart=100, eps_tol=1e-8),
                              world=World(2))
        h = rep.frobenius_history()
        ghist[st] = h
        mono = bool(np.all(np.diff(h) <= 1e-12 * h[0]))
        res = float(np.linalg.norm(Bn - N.apply(X)) / np.linalg.norm(Bn))
        out.check(f"gmres {st}", rep.converged and mono and res < 1e-6, f"iterations={rep.iterations} residual={res!r}")
        out.lines.append(rep.csv_text())
    for st, h in ghist.items():
        k = min(len(h), len(ghist["modified"]))
        dev = float(np.max(np.abs(h[:k] - ghist["modified"][:k]) / ghist["modified"][:k]))
        out.check(f"gmres {st} equivalence", dev < 1e-6, f"max_rel_dev={dev!r}")

    for v in BICGSTAB_VARIANTS:
        X, rep = bbicgstab_solve(N, Bn, algebra=AlgebraSpec.block(4), cfg=BicgstabConfig(variant=v),
                                 world=World(4))
        res = float(np.max(np.linalg.norm(Bn - N.apply(X), axis=0) / np.linalg.norm(Bn, axis=0)))
        out.check(f"bicgstab {v}", rep.converged and res < 1e-7, f"iterations={rep.iterations} residual={res!r}")
        out.lines.append(rep.csv_text())

    for P in (1, 2, 4, 8):
        X = rng.standard_normal((256, 8))
        for label in ("b", "bp:4", "bg:2"):
            a = AlgebraSpec.parse(label, 8)
            Q, sig = tsqr(World(P), X, a)
            orth = float(np.max(np.abs(block_inner_product(Q, Q, a).coeffs - np.eye(8))))
            rec = float(np.linalg.norm(Q @ sig.coeffs - X) / np.linalg.norm(X))
            out.check(f"tsqr P={P} {label}", orth < 1e-12 and rec < 1e-12, f"orth={orth!r} recon={rec!r}")

    out.check("latency model", t_red_log2(16) == 8.0 and round(t_red_log2(380000)) == 37,
              f"t_red(16)={t_red_log2(16)!r} t_red(380000)={t_red_log2(380000)!r}")
    for policy in ("full", "none", 0.99):
        rows = overlap_benchmark(16, overlap=policy)
        ok = all(r.t_ovhd == r.t_iter - r.t_work and r.t_avail == r.t_base - r.t_ovhd for r in rows)
        out.check(f"overlap {policy}", ok and bool(rows),
                  " ".join(f"({r.t_work!r},{r.t_iter!r},{r.t_avail!r})" for r in rows))
    return out
