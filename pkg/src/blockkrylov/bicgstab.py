"""Block BiCGStab with adaptive residual re-orthonormalization.

Two variants share the arithmetic:

* ``adaptive``: three blocking reduction groups per iteration (the ``lambda``
  group, the fused ``omega``/``beta`` group and the residual norm);
* ``pipelined``: two reduction groups, the first overlapped with
  ``Z = M^-1 Q`` and the second with ``W = M^-1 U``.  The second group also
  carries the full Gram matrices of ``S`` and ``U`` so that the next residual
  Gram matrix, and with it the column norms and the re-orthonormalization
  trigger, are available without another reduction.

The scalar ``omega`` minimizes the Frobenius norm of ``S - omega U``.  Only
forward applications of ``A`` and ``M`` are used.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blocklinalg import Preconditioner, SparseOperator, generate_rhs
from .comms import World
from .report import BreakdownError, SolverReport, StagnationError, Tracker, residual_measure
from .salgebra import AlgebraSpec, SElement, SingularElementError, finalize_products, kappa_diag_scaled

__all__ = ["BICGSTAB_VARIANTS", "BicgstabConfig", "bbicgstab_solve", "project_gram"]

EPS = np.finfo(float).eps
BICGSTAB_VARIANTS = ("adaptive", "pipelined")
SHADOW_CHOICES = ("preconditioned", "random")


@dataclass
class BicgstabConfig:
    variant: str = "adaptive"
    eta: float = 100.0
    eps_tol: float = 1e-8
    norm_kind: str = "max-column"
    max_iter: int = 1000
    shadow: str = "preconditioned"
    shadow_seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.strip().lower()
        if self.variant not in BICGSTAB_VARIANTS:
            raise ValueError(f"unknown BiCGStab variant '{self.variant}' (choose from {', '.join(BICGSTAB_VARIANTS)})")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.shadow not in SHADOW_CHOICES:
            raise ValueError(f"unknown shadow choice '{self.shadow}' (choose from {', '.join(SHADOW_CHOICES)})")
        if self.norm_kind not in ("max-column", "frobenius"):
            raise ValueError(f"unknown norm kind '{self.norm_kind}'")


def project_gram(G: np.ndarray, a: AlgebraSpec) -> SElement:
    """Restrict a full ``s x s`` Gram matrix to the algebra's block product."""
    p, q = a.p, a.q
    raw = np.stack([G[g * p:(g + 1) * p, g * p:(g + 1) * p] for g in range(q)])
    return finalize_products(raw, a)


def _trigger(eta: float, chi: SElement) -> bool:
    if eta <= 0:
        return False
    try:
        kappa = kappa_diag_scaled(chi)
    except ValueError:
        return True
    return eta * math.sqrt(EPS) * kappa > 1.0


def bbicgstab_solve(A: SparseOperator, B: np.ndarray, X0: np.ndarray | None = None,
                    M: Preconditioner | None = None, algebra: AlgebraSpec | None = None,
                    cfg: BicgstabConfig | None = None, world: World | None = None,
                    callback: Callable[[int, dict], None] | None = None):
    """Solve ``A X = B`` for a general invertible ``A``.

    Returns ``(X, report)``.  Raises :class:`BreakdownError` if the shadow
    product with ``Q`` (or initially with ``R``) is singular, and
    :class:`StagnationError` if ``U`` vanishes while ``S`` does not.
    ``callback(k, state)`` receives ``X`` and the residual column norms.
    """
    B = np.ascontiguousarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[0] != A.n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, operator has {A.n}")
    n, s = B.shape
    a = algebra or AlgebraSpec.block(s)
    if a.s != s:
        raise ValueError(f"algebra has s={a.s} but B has {s} columns")
    cfg = cfg or BicgstabConfig()
    M = M or Preconditioner.identity(n)
    world = world or World(1)
    world.bind(n)
    k, W = world.kernels, world
    pipelined = cfg.variant == "pipelined"
    full = AlgebraSpec.block(s)
    t0 = time.perf_counter()
    report = SolverReport(
        solver="bicgstab", variant=cfg.variant, algebra=a.label(), s=s, n=n,
        world=world.describe(),
        params={"eta": cfg.eta, "eps_tol": cfg.eps_tol, "norm": cfg.norm_kind,
                "max_iter": cfg.max_iter, "shadow": cfg.shadow, "precond": repr(M)},
        allocations=11 if pipelined else 10,
    )
    tracker = Tracker(world, report)
    it = 0

    def fail(msg, cls=BreakdownError):
        tracker.finish(False, "stagnation" if cls is StagnationError else "breakdown")
        report.events.append({"iteration": it, "kind": tracker.report.status, "detail": msg})
        return cls(it, msg, report)

    def done(converged):
        tracker.finish(converged, "converged" if converged else "max_iter")
        report.wall_time = time.perf_counter() - t0
        return X, report

    X = np.zeros_like(B) if X0 is None else np.array(X0, dtype=float)
    R = B - k.bop(A, X)
    norms0 = W.colnorms(R, label="norm0")
    tracker.record(0, norms0)
    if callback is not None:
        callback(0, {"X": X, "colnorms": norms0})
    if not np.any(norms0):
        return done(True)
    sigma = a.identity()
    scaled = False
    if cfg.eta > 0:
        R, sigma = W.normalize(R, a, label="normalize0")
        scaled = True
    P = k.precond(M, R)
    if cfg.shadow == "preconditioned":
        Rt = P.copy()
    else:
        Rt = generate_rhs(n, s, cfg.shadow_seed)
    V = P.copy()
    prods = W.idot([(Rt, R), (R, R)], a, label="shadow-check").result()[0]
    try:
        prods[0].invert()
    except SingularElementError:
        raise fail("shadow residual is orthogonal to the initial residual") from None
    chi = prods[1]
    tracker.absorb()

    for _ in range(cfg.max_iter):
        it += 1
        Q = k.bop(A, P)
        if pipelined:
            fut = W.idot([(Rt, Q), (Rt, R)], a, label="lambda")
            Z = k.precond(M, Q)
            g_q, g_r = fut.result()[0]
        else:
            g_q, g_r, chi = W.idot([(Rt, Q), (Rt, R), (R, R)], a, label="lambda").result()[0]
            Z = k.precond(M, Q)
        try:
            g_q_inv = g_q.invert()
        except SingularElementError as exc:
            raise fail(f"<shadow, Q> is singular ({exc})") from None
        lam = g_q_inv.multiply(g_r)
        S = k.baxpy(R, Q, lam, alpha=-1.0)
        reortho = _trigger(cfg.eta, chi)
        if reortho:
            fut = W.inormalize(S, a, label="reortho")
            if pipelined:
                k.baxpy(X, P, lam.multiply(sigma), out=X)
                S, gamma = fut.result()
            else:
                S, gamma = fut.result()
                k.baxpy(X, P, lam.multiply(sigma), out=X)
            sigma = gamma.multiply(sigma)
            scaled = True
            T = k.precond(M, S)
        else:
            k.baxpy(X, P, lam.multiply(sigma), out=X)
            T = k.baxpy(V, Z, lam, alpha=-1.0)
        U = k.bop(A, T)
        if pipelined:
            fut = W.idot([(Rt, U), (S, S), (U, S), (U, U)], full, label="omega-beta-gram")
            Wv = k.precond(M, U)
            grams = [g.coeffs for g in fut.result()[0]]
            g_ru = project_gram(grams[0], a)
            G_ss, G_us, G_uu = grams[1:]
            us, uu, ss = float(np.trace(G_us)), float(np.trace(G_uu)), float(np.trace(G_ss))
        else:
            prods, fro, _ = W.idot([(Rt, U)], a, frobenius=[(U, S), (U, U), (S, S)],
                                   label="omega-beta").result()
            g_ru = prods[0]
            us, uu, ss = fro
        if uu == 0.0:
            if ss != 0.0:
                raise fail("<U, U>_F vanished with a nonzero intermediate residual", StagnationError)
            omega = 0.0
        else:
            omega = us / uu
        k.baxpy(X, T, sigma.scale(omega), out=X)
        R = k.axpy(S, U, -omega)
        if pipelined:
            G_rr = G_ss - omega * (G_us + G_us.T) + omega * omega * G_uu
            G_rr = 0.5 * (G_rr + G_rr.T)
            chi = project_gram(G_rr, a)
            sc = sigma.coeffs
            colnorms = np.sqrt(np.maximum(np.einsum("ij,ik,kj->j", sc, G_rr, sc), 0.0))
        else:
            colnorms = W.colnorms(k.bscale(R, sigma) if scaled else R, label="norm")
        if not np.all(np.isfinite(colnorms)):
            raise fail("non-finite residual norm")
        tracker.record(it, colnorms, reortho)
        if callback is not None:
            callback(it, {"X": X, "colnorms": colnorms, "omega": omega, "S": S, "U": U})
        if residual_measure(colnorms, norms0, cfg.norm_kind) <= cfg.eps_tol:
            return done(True)
        if pipelined:
            V = k.axpy(T, Wv, -omega)
        else:
            V = k.precond(M, R)
        beta = g_q_inv.multiply(g_ru).scale(-1.0)
        P = k.baxpy(V, k.axpy(P, Z, -omega), beta)
    return done(False)

