"""Block GMRES with pluggable block Gram-Schmidt orthogonalization.

The Arnoldi basis is kept S-orthonormal by one of four strategies:

* ``modified``: interleaved products and updates, one reduction per basis vector;
* ``classical(it)``: all products fused in one reduction, repeated ``it`` times;
* ``pipelined(r)``: products started ``r`` ahead of the updates, with up to
  ``r + 1`` reductions in flight;
* ``localized``: local modified Gram-Schmidt on every rank, then a single tree
  reduction and back-propagation of the coefficient vectors.

The block Hessenberg matrix is triangulated on the fly with 2x2 block Givens
transforms, so the Frobenius norm of the last transformed right-hand side
block equals the (preconditioned) residual norm at every step.
"""

from __future__ import annotations

import math
import re
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blocklinalg import Preconditioner, SparseOperator
from .comms import ReductionTreeState, World
from .report import BreakdownError, SolverReport, Tracker
from .salgebra import (
    AlgebraSpec,
    SElement,
    SingularElementError,
    apply_right,
    finalize_products,
    normalize,
    partial_products,
)

__all__ = [
    "OrthoStrategy",
    "Orthogonalizer",
    "GivensFactor",
    "block_givens",
    "apply_givens",
    "arnoldi",
    "GmresConfig",
    "bgmres_solve",
]

RANK_DEFICIENCY_TOL = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class OrthoStrategy:
    """``kind`` is one of modified, classical, pipelined, localized."""

    kind: str = "modified"
    iters: int = 2
    r: int = 3

    def __post_init__(self):
        if self.kind not in ("modified", "classical", "pipelined", "localized"):
            raise ValueError(f"unknown orthogonalization '{self.kind}'")
        if self.kind == "classical" and self.iters not in (1, 2):
            raise ValueError("classical Gram-Schmidt supports 1 or 2 iterations")
        if self.kind == "pipelined" and self.r < 1:
            raise ValueError("pipelined depth r must be at least 1")

    @classmethod
    def parse(cls, text: str) -> "OrthoStrategy":
        """Accepts ``modified``, ``classical``, ``classical(1)``, ``classical:1``,
        ``pipelined(3)``, ``pipelined:3`` and ``localized``."""
        m = re.fullmatch(r"\s*([a-z]+)\s*(?:[(:]\s*(\d+)\s*\)?)?\s*", text.lower())
        if not m:
            raise ValueError(f"cannot parse orthogonalization '{text}'")
        kind, arg = m.group(1), m.group(2)
        kind = {"mgs": "modified", "cgs": "classical", "local": "localized"}.get(kind, kind)
        if kind == "classical":
            return cls(kind, iters=int(arg) if arg else 2)
        if kind == "pipelined":
            return cls(kind, r=int(arg) if arg else 3)
        if arg is not None:
            raise ValueError(f"'{kind}' takes no parameter")
        return cls(kind)

    def label(self) -> str:
        if self.kind == "classical":
            return f"classical({self.iters})"
        if self.kind == "pipelined":
            return f"pipelined({self.r})"
        return self.kind


class Orthogonalizer:
    """Builds an S-orthonormal basis one block vector at a time.

    ``start(X)`` normalizes the first vector; ``extend(W)`` orthonormalizes
    ``W`` against the basis and returns ``(h, gamma)`` with
    ``W = sum_j V^j h_j + V^{new} gamma``.
    """

    def __init__(self, a: AlgebraSpec, strategy: OrthoStrategy, world: World):
        self.a = a
        self.strategy = strategy
        self.world = world
        self.V: list[np.ndarray] = []
        self.events: list[dict] = []
        self._local: list[list[np.ndarray]] = []
        self._tree: ReductionTreeState | None = None

    # -- public -----------------------------------------------------------
    def start(self, X: np.ndarray) -> SElement:
        self.V = []
        if self.strategy.kind == "localized":
            self._tree = ReductionTreeState(self.world, self.a)
            self._local = [[] for _ in range(self.world.P)]
            h, Vn = self._localized(X, first=True)
            rho = h[0]
        else:
            Vn, rho = self.world.normalize(X, self.a, label="arnoldi-normalize")
        self._check_rank(rho, 0)
        self.V.append(Vn)
        return rho

    def extend(self, W: np.ndarray) -> tuple[list[SElement], SElement]:
        kind = self.strategy.kind
        W = np.array(W, dtype=float, copy=True)
        if not np.all(np.isfinite(W)):
            raise FloatingPointError("non-finite entries in the new Arnoldi direction")
        if kind == "localized":
            hh, Vn = self._localized(W, first=False)
            h, gamma = hh[:-1], hh[-1]
        else:
            if kind == "modified":
                h = self._modified(W)
            elif kind == "classical":
                h = self._classical(W, self.strategy.iters)
            else:
                h = self._pipelined(W, self.strategy.r)
            Vn, gamma = self.world.normalize(W, self.a, label="arnoldi-normalize")
        self._check_rank(gamma, len(self.V), h)
        self.V.append(Vn)
        return h, gamma

    # -- strategies -------------------------------------------------------
    def _modified(self, W: np.ndarray) -> list[SElement]:
        k, a, h = self.world.kernels, self.a, []
        for Vj in self.V:
            c = self.world.dot(Vj, W, a, label="mgs")
            k.baxpy(W, Vj, c, alpha=-1.0, out=W)
            h.append(c)
        return h

    def _classical(self, W: np.ndarray, iters: int) -> list[SElement]:
        k, a = self.world.kernels, self.a
        h = [a.zero() for _ in self.V]
        for _ in range(iters):
            prods = self.world.idot([(Vj, W) for Vj in self.V], a, label="cgs").result()[0]
            for j, (Vj, c) in enumerate(zip(self.V, prods)):
                k.baxpy(W, Vj, c, alpha=-1.0, out=W)
                h[j] = h[j] + c
        return h

    def _pipelined(self, W: np.ndarray, r: int) -> list[SElement]:
        k, a = self.world.kernels, self.a
        m = len(self.V)
        depth = min(r, m)
        h: list[SElement | None] = [None] * m
        inflight: deque = deque()

        def retire():
            j, fut = inflight.popleft()
            c = fut.result()[0][0]
            k.baxpy(W, self.V[j], c, alpha=-1.0, out=W)
            h[j] = c

        for i, Vi in enumerate(self.V):
            inflight.append((i, self.world.idot([(Vi, W)], a, label="pgs")))
            if len(inflight) > depth:
                retire()
        while inflight:
            retire()
        return h  # type: ignore[return-value]

    def _localized(self, W: np.ndarray, first: bool) -> tuple[list[SElement], np.ndarray]:
        world, a, kern = self.world, self.a, self.world.kernels
        parts = world.bind(W.shape[0])
        leaf_vectors = []
        fresh = []
        for r, (lo, hi) in enumerate(parts):
            Wr = W[lo:hi]
            coeffs = []
            for Pj in self._local[r]:
                c = finalize_products(partial_products(Pj, Wr, a), a)
                Wr = Wr - apply_right(Pj, c)
                coeffs.append(c.coeffs)
            Pn, z = normalize(Wr, a)
            coeffs.append(z.coeffs)
            fresh.append(Pn)
            leaf_vectors.append(np.stack(coeffs))
        m = len(self._local[0]) if self._local else 0
        n = W.shape[0]
        kern.charge_bdot(n, a, m)
        kern.charge_baxpy(n, a, m)
        kern.normalize_cost(n, a)
        for r in range(world.P):
            self._local[r].append(fresh[r])
        rho, leaves = self._tree.ireduce_backprop(leaf_vectors, label="localized").result()
        Vn = np.empty_like(W)
        for r, (lo, hi) in enumerate(parts):
            acc = np.zeros((hi - lo, a.s))
            for Pj, g in zip(self._local[r], leaves[r]):
                acc += apply_right(Pj, SElement(a, g, check=False))
            Vn[lo:hi] = acc
        kern.charge_baxpy(n, a, m + 1)
        return [SElement(a, c, check=False) for c in rho], Vn

    def _check_rank(self, gamma: SElement, index: int, h: list[SElement] = ()) -> None:
        # The basis is orthonormal, so sum ||h_j||^2 + ||gamma||^2 = ||W||^2.
        d = np.abs(np.diagonal(gamma.blocks(), axis1=1, axis2=2))
        scale = np.sqrt(sum(c.frobenius_norm() ** 2 for c in h) + gamma.frobenius_norm() ** 2)
        if np.min(d) <= RANK_DEFICIENCY_TOL * scale:
            self.events.append({"basis_index": index, "kind": "rank-deficient",
                                "min_pivot": float(np.min(d)), "max_pivot": float(np.max(d))})


# -- block Givens -------------------------------------------------------------


@dataclass(frozen=True)
class GivensFactor:
    """Orthogonal ``2x2`` block transform stored as four algebra elements."""

    q11: SElement
    q12: SElement
    q21: SElement
    q22: SElement

    def apply_t(self, top: SElement, bottom: SElement) -> tuple[SElement, SElement]:
        """``Q^T (top, bottom)``."""
        new_top = self.q11.T.multiply(top) + self.q21.T.multiply(bottom)
        new_bottom = self.q12.T.multiply(top) + self.q22.T.multiply(bottom)
        return new_top, new_bottom


def block_givens(h: SElement, gamma: SElement) -> tuple[GivensFactor, SElement]:
    """Full QR ``(h; gamma) = Q (rho; 0)`` per block, with ``diag(rho) >= 0``.

    A vanishing ``gamma`` block keeps the identity transform.
    """
    a = h.algebra
    p = a.p
    hb, gb = h.blocks(), gamma.blocks()
    ngroups = hb.shape[0]
    Q = np.empty((ngroups, 2 * p, 2 * p))
    R = np.empty((ngroups, p, p))
    for g in range(ngroups):
        if not np.any(gb[g]):
            Q[g] = np.eye(2 * p)
            R[g] = hb[g]
            continue
        qg, rg = np.linalg.qr(np.vstack([hb[g], gb[g]]), mode="complete")
        signs = np.where(np.diag(rg[:p]) < 0, -1.0, 1.0)
        qg[:, :p] *= signs
        Q[g] = qg
        R[g] = rg[:p] * signs[:, None]
    part = lambda rs, cs: SElement.from_blocks(a, Q[:, rs, cs])  # noqa: E731
    top, bot = slice(0, p), slice(p, 2 * p)
    fac = GivensFactor(part(top, top), part(top, bot), part(bot, top), part(bot, bot))
    return fac, SElement.from_blocks(a, R)


def apply_givens(column: list[SElement], factors: list[GivensFactor]) -> list[SElement]:
    """Apply the stored transforms to a new Hessenberg column in order."""
    col = list(column)
    for j, fac in enumerate(factors):
        col[j], col[j + 1] = fac.apply_t(col[j], col[j + 1])
    return col


def arnoldi(A: SparseOperator, V0: np.ndarray, steps: int, a: AlgebraSpec,
            strategy: OrthoStrategy, world: World | None = None,
            M: Preconditioner | None = None):
    """Run ``steps`` block Arnoldi steps without triangulation.

    Returns ``(V, H, rho0)`` where ``V`` is the list of basis vectors and
    ``H[j][k]`` the Hessenberg entry coupling ``V^j`` into column ``k``.
    """
    world = world or World(1)
    world.bind(A.n)
    orth = Orthogonalizer(a, strategy, world)
    rho0 = orth.start(V0)
    H: list[list[SElement]] = [[a.zero() for _ in range(steps)] for _ in range(steps + 1)]
    for k in range(steps):
        W = world.kernels.bop(A, orth.V[k])
        if M is not None:
            W = world.kernels.precond(M, W)
        h, gamma = orth.extend(W)
        for j, c in enumerate(h):
            H[j][k] = c
        H[k + 1][k] = gamma
    return orth.V, H, rho0


# -- driver -------------------------------------------------------------------


@dataclass
class GmresConfig:
    strategy: OrthoStrategy = OrthoStrategy("modified")
    restart: int = 100
    eps_tol: float = 1e-8
    max_iter: int = 1000

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = OrthoStrategy.parse(self.strategy)
        if self.restart < 1:
            raise ValueError("restart must be at least 1")


def _back_substitute(R: list[list[SElement]], sigma: list[SElement], k: int, it: int) -> list[SElement]:
    y: list[SElement | None] = [None] * k
    for l in range(k - 1, -1, -1):
        acc = sigma[l]
        for j in range(l + 1, k):
            acc = acc - R[l][j].multiply(y[j])
        try:
            y[l] = R[l][l].invert().multiply(acc)
        except SingularElementError as exc:
            raise BreakdownError(it, f"singular diagonal block {l} in back-substitution ({exc})") from None
    return y  # type: ignore[return-value]


def bgmres_solve(A: SparseOperator, B: np.ndarray, X0: np.ndarray | None = None,
                 M: Preconditioner | None = None, algebra: AlgebraSpec | None = None,
                 cfg: GmresConfig | None = None, world: World | None = None,
                 callback: Callable[[int, dict], None] | None = None):
    """Solve ``A X = B`` with left-preconditioned restarted block GMRES.

    The stopping test compares the Frobenius norm of the preconditioned
    residual with ``eps_tol`` times its initial value.  ``callback(k, state)``
    receives ``sigma_norm`` (the recurrence residual) and ``solution``, a
    function returning the current iterate.

    Returns ``(X, report)``; raises :class:`BreakdownError` on a singular
    back-substitution pivot or non-finite values.
    """
    B = np.ascontiguousarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[0] != A.n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, operator has {A.n}")
    s = B.shape[1]
    a = algebra or AlgebraSpec.block(s)
    if a.s != s:
        raise ValueError(f"algebra has s={a.s} but B has {s} columns")
    cfg = cfg or GmresConfig()
    M = M or Preconditioner.identity(A.n)
    world = world or World(1)
    world.bind(A.n)
    kern = world.kernels
    t0 = time.perf_counter()
    report = SolverReport(
        solver="gmres", variant=cfg.strategy.label(), algebra=a.label(), s=s, n=A.n,
        world=world.describe(),
        params={"restart": cfg.restart, "eps_tol": cfg.eps_tol, "max_iter": cfg.max_iter,
                "precond": repr(M), "residual": "preconditioned"},
        allocations=cfg.restart + 2,
    )
    tracker = Tracker(world, report)
    X = np.zeros_like(B) if X0 is None else np.array(X0, dtype=float)
    it = 0
    ref = None
    cycle = 0

    def fail(msg):
        tracker.finish(False, "breakdown")
        report.events.append({"iteration": it, "kind": "breakdown", "detail": msg})
        return BreakdownError(it, msg, report)

    while True:
        R0 = kern.precond(M, B - kern.bop(A, X))
        if not np.all(np.isfinite(R0)):
            raise fail("non-finite residual")
        orth = Orthogonalizer(a, cfg.strategy, world)
        sigma0 = orth.start(R0)
        sig = [sigma0]
        if ref is None:
            ref = sigma0.frobenius_norm()
            tracker.record(0, sigma0.column_norms())
            if ref == 0.0:
                tracker.finish(True, "converged")
                report.wall_time = time.perf_counter() - t0
                return X, report
        Rcols: list[list[SElement]] = []
        factors: list[GivensFactor] = []
        converged = False
        k = 0
        while k < cfg.restart and it < cfg.max_iter:
            W = kern.precond(M, kern.bop(A, orth.V[k]))
            try:
                h, gamma = orth.extend(W)
            except FloatingPointError as exc:
                raise fail(str(exc)) from None
            col = apply_givens(h + [a.zero()], factors)
            fac, diag = block_givens(col[k], gamma)
            col[k] = diag
            factors.append(fac)
            Rcols.append(col[: k + 1])
            sig_k, sig_next = fac.apply_t(sig[k], a.zero())
            sig[k] = sig_k
            sig.append(sig_next)
            k += 1
            it += 1
            colnorms = sig_next.column_norms()
            if not np.all(np.isfinite(colnorms)):
                raise fail("non-finite residual norm")
            tracker.record(it, colnorms, events=[e["kind"] for e in orth.events if e["basis_index"] == k])
            if callback is not None:
                Rk = [[Rcols[j][l] if l <= j else a.zero() for j in range(k)] for l in range(k)]
                kk, Vs, sg = k, list(orth.V), list(sig)

                def solution(Rk=Rk, kk=kk, Vs=Vs, sg=sg, X=X.copy()):
                    y = _back_substitute(Rk, sg, kk, it)
                    out = X.copy()
                    for Vj, yj in zip(Vs, y):
                        out += apply_right(Vj, yj)
                    return out

                callback(it, {"sigma_norm": sig_next.frobenius_norm(), "cycle": cycle,
                              "solution": solution})
            if sig_next.frobenius_norm() <= cfg.eps_tol * ref:
                converged = True
                break
        Rk = [[Rcols[j][l] if l <= j else a.zero() for j in range(k)] for l in range(k)]
        try:
            y = _back_substitute(Rk, sig, k, it)
        except BreakdownError as exc:
            raise fail(str(exc)) from None
        for Vj, yj in zip(orth.V, y):
            kern.baxpy(X, Vj, yj, out=X)
        for e in orth.events:
            report.events.append(dict(e, cycle=cycle))
        if converged or it >= cfg.max_iter:
            break
        cycle += 1
    tracker.finish(converged, "converged" if converged else "max_iter")
    report.params["cycles"] = cycle + 1
    report.wall_time = time.perf_counter() - t0
    return X, report
