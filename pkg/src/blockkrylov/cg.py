"""Block conjugate gradients with adaptive residual re-orthonormalization.

Six arithmetically equivalent variants are provided; they differ in how the
block inner products are grouped into reductions and whether those reductions
overlap with operator or preconditioner applications:

============== ===== ========== ======= ============
variant        syncs overlapped updates block vectors
============== ===== ========== ======= ============
classic        3     no         3       4
two-reduction  2     no         3       4
one-reduction  1     no         4       6
gropp          2     yes        5       6
pipelined      1     yes        6       8
ghysels        1     yes        8       10
============== ===== ========== ======= ============

The residual is carried in transformed form ``R = Rbar sigma``.  Whenever
``eta * sqrt(eps) * kappa_D(alpha) > 1`` the residual is re-orthonormalized
and the transform accumulated in ``sigma``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .blocklinalg import Preconditioner, SparseOperator
from .comms import World
from .report import BreakdownError, SolverReport, Tracker, residual_measure
from .salgebra import AlgebraSpec, SElement, SingularElementError, kappa_diag_scaled

__all__ = [
    "CG_VARIANTS",
    "CgConfig",
    "Workspace",
    "bcg_solve",
    "reortho_needed",
    "chebyshev_bound",
    "blockglobal_rate_check",
]

EPS = np.finfo(float).eps

CG_VARIANTS = ("classic", "two-reduction", "one-reduction", "gropp", "pipelined", "ghysels")
_ALIASES = {"bcg": "classic", "2r": "two-reduction", "1r": "one-reduction", "ppbcg": "pipelined"}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    key = _ALIASES.get(key, key)
    if key not in CG_VARIANTS:
        raise ValueError(f"unknown CG variant '{name}' (choose from {', '.join(CG_VARIANTS)})")
    return key


@dataclass
class CgConfig:
    """Solver settings.

    ``eps_tol`` is relative: the run stops once the chosen residual measure
    falls below ``eps_tol`` times its initial value (per column for
    ``max-column``).
    """

    variant: str = "classic"
    eta: float = 1e4
    eps_tol: float = 1e-8
    norm_kind: str = "max-column"
    max_iter: int = 1000

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.norm_kind not in ("max-column", "frobenius"):
            raise ValueError(f"unknown norm kind '{self.norm_kind}'")


def reortho_needed(eta: float, alpha: SElement) -> bool:
    """Adaptive trigger: ``eta * sqrt(eps) * kappa_D(alpha) > 1``."""
    if eta <= 0:
        return False
    try:
        kappa = kappa_diag_scaled(alpha)
    except ValueError:
        return True
    return eta * math.sqrt(EPS) * kappa > 1.0


class Workspace:
    """Named block-vector buffers; aliases share memory with an earlier buffer."""

    def __init__(self, n: int, s: int):
        self.n, self.s = n, s
        self._buf: dict[str, np.ndarray] = {}
        self._owner: dict[str, str] = {}

    def alloc(self, *names: str) -> None:
        for name in names:
            self._buf[name] = np.zeros((self.n, self.s))
            self._owner[name] = name

    def alias(self, name: str, target: str) -> None:
        self._owner[name] = self._owner[target]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._buf[self._owner[name]]

    def put(self, name: str, value: np.ndarray) -> np.ndarray:
        buf = self[name]
        np.copyto(buf, value)
        return buf

    @property
    def count(self) -> int:
        return len(self._buf)


_LAYOUT = {
    "classic": (("X", "R", "P", "Q"), {"Z": "Q"}),
    "two-reduction": (("X", "R", "P", "Q"), {"Z": "Q"}),
    "one-reduction": (("X", "R", "P", "Q", "Z", "U"), {}),
    "gropp": (("X", "R", "P", "Q", "Z", "V"), {"U": "V"}),
    "pipelined": (("X", "R", "P", "Q", "Z", "U", "V", "W"), {}),
    "ghysels": (("X", "R", "P", "Q", "Z", "U", "V", "W", "S", "T"), {}),
}


class _Run:
    """Shared state and helpers for one block CG solve."""

    def __init__(self, A, M, B, X0, a, cfg, world, callback):
        self.A, self.M, self.a, self.cfg = A, M, a, cfg
        self.world = world
        self.k = world.kernels
        self.callback = callback
        n, s = B.shape
        self.n, self.s = n, s
        world.bind(n)
        names, aliases = _LAYOUT[cfg.variant]
        self.ws = Workspace(n, s)
        self.ws.alloc(*names)
        for name, target in aliases.items():
            self.ws.alias(name, target)
        self.report = SolverReport(
            solver="cg", variant=cfg.variant, algebra=a.label(), s=s, n=n,
            world=world.describe(),
            params={"eta": cfg.eta, "eps_tol": cfg.eps_tol, "norm": cfg.norm_kind,
                    "max_iter": cfg.max_iter, "precond": repr(M)},
            allocations=self.ws.count,
        )
        self.tracker = Tracker(world, self.report)
        self.I = a.identity()
        self.sigma = self.I
        self.sigma_is_identity = True
        self.it = 0
        ws = self.ws
        if X0 is not None:
            ws.put("X", X0)
        R = ws.put("R", B - self.k.bop(A, ws["X"]))
        self.norms0 = world.colnorms(R)
        if cfg.eta > 0:
            Rbar, self.sigma = world.normalize(R, a)
            ws.put("R", Rbar)
            self.sigma_is_identity = False
        self.tracker.record(0, self.norms0)
        self._notify()

    # -- helpers ----------------------------------------------------------
    def fail(self, msg: str) -> BreakdownError:
        self.tracker.finish(False, "breakdown")
        self.report.events.append({"iteration": self.it, "kind": "breakdown", "detail": msg})
        return BreakdownError(self.it, msg, self.report)

    def solve_left(self, c: SElement, rhs: SElement, what: str) -> SElement:
        try:
            return c.invert().multiply(rhs)
        except SingularElementError as exc:
            raise self.fail(f"{what} is singular ({exc})") from None

    def scaled_residual(self) -> np.ndarray:
        R = self.ws["R"]
        return R if self.sigma_is_identity else self.k.bscale(R, self.sigma)

    def reorthonormalize(self):
        """Replace Rbar by its normalizer factor; returns gamma."""
        Rbar, gamma = self.world.normalize(self.ws["R"], self.a, label="reortho")
        self.ws.put("R", Rbar)
        self.sigma = gamma.multiply(self.sigma)
        self.sigma_is_identity = False
        return gamma

    def check(self, colnorms: np.ndarray, reortho: bool) -> bool:
        """Record the iteration and evaluate the stopping test."""
        if not np.all(np.isfinite(colnorms)):
            raise self.fail("non-finite residual norm")
        self.tracker.record(self.it, colnorms, reortho)
        self._notify()
        return residual_measure(colnorms, self.norms0, self.cfg.norm_kind) <= self.cfg.eps_tol

    def _notify(self):
        if self.callback is not None:
            ws = self.ws
            self.callback(self.it, {"X": ws["X"], "Rbar": ws["R"], "sigma": self.sigma, "P": ws["P"]})

    def update_x(self, lam: SElement, sigma_old: SElement) -> None:
        ws = self.ws
        self.k.baxpy(ws["X"], ws["P"], lam.multiply(sigma_old), out=ws["X"])

    def update_r(self, lam: SElement) -> None:
        ws = self.ws
        self.k.baxpy(ws["R"], ws["Q"], lam, alpha=-1.0, out=ws["R"])

    def beta(self, rho_old: SElement, gamma: SElement, rho_new: SElement) -> SElement:
        return self.solve_left(rho_old, gamma.transpose().multiply(rho_new), "rho")

    def finish(self, converged: bool):
        self.tracker.finish(converged, "converged" if converged else "max_iter")
        return self.ws["X"].copy(), self.report


def _classic(r: _Run, two_reduction: bool):
    A, M, a, k, ws, W = r.A, r.M, r.a, r.k, r.ws, r.world
    ws.put("P", k.precond(M, ws["R"]))
    rho = W.dot(ws["P"], ws["R"], a, label="rho")
    r.tracker.absorb()
    for _ in range(r.cfg.max_iter):
        r.it += 1
        ws.put("Q", k.bop(A, ws["P"]))
        alpha = W.dot(ws["P"], ws["Q"], a, label="alpha")
        lam = r.solve_left(alpha, rho, "alpha")
        sigma_old = r.sigma
        if not two_reduction:
            r.update_x(lam, sigma_old)
        r.update_r(lam)
        reortho = reortho_needed(r.cfg.eta, alpha)
        if reortho:
            gamma = r.reorthonormalize()
            colnorms = r.sigma.column_norms()
        else:
            gamma = r.I
        if two_reduction:
            r.update_x(lam, sigma_old)
            ws.put("Z", k.precond(M, ws["R"]))
            fut = W.idot([(ws["Z"], ws["R"])], a,
                         colnorms=[] if reortho else [r.scaled_residual()], label="rho+norm")
            prods, _, cols = fut.result()
            rho_new = prods[0]
            if not reortho:
                colnorms = np.sqrt(cols[0])
            if r.check(colnorms, reortho):
                return r.finish(True)
        else:
            if not reortho:
                colnorms = W.colnorms(r.scaled_residual(), label="norm")
            if r.check(colnorms, reortho):
                return r.finish(True)
            ws.put("Z", k.precond(M, ws["R"]))
            rho_new = W.dot(ws["Z"], ws["R"], a, label="rho")
            r.tracker.absorb()
        beta = r.beta(rho, gamma, rho_new)
        k.baxpy(ws["Z"], ws["P"], beta, out=ws["P"])
        rho = rho_new
    return r.finish(False)


def _one_reduction(r: _Run):
    A, M, a, k, ws, W = r.A, r.M, r.a, r.k, r.ws, r.world
    ws.put("P", k.precond(M, ws["R"]))
    ws.put("Q", k.bop(A, ws["P"]))
    prods, _, _ = W.idot([(ws["P"], ws["R"]), (ws["P"], ws["Q"])], a, label="rho+alpha").result()
    rho, alpha = prods
    r.tracker.absorb()
    for _ in range(r.cfg.max_iter):
        r.it += 1
        lam = r.solve_left(alpha, rho, "alpha")
        sigma_old = r.sigma
        r.update_r(lam)
        reortho = reortho_needed(r.cfg.eta, alpha)
        if reortho:
            gamma = r.reorthonormalize()
            colnorms = r.sigma.column_norms()
        else:
            gamma = r.I
        r.update_x(lam, sigma_old)
        ws.put("Z", k.precond(M, ws["R"]))
        ws.put("U", k.bop(A, ws["Z"]))
        fut = W.idot([(ws["Z"], ws["R"]), (ws["Z"], ws["U"])], a,
                     colnorms=[] if reortho else [r.scaled_residual()], label="rho+delta+norm")
        prods, _, cols = fut.result()
        rho_new, delta = prods
        if not reortho:
            colnorms = np.sqrt(cols[0])
        if r.check(colnorms, reortho):
            return r.finish(True)
        beta = r.beta(rho, gamma, rho_new)
        k.baxpy(ws["Z"], ws["P"], beta, out=ws["P"])
        k.baxpy(ws["U"], ws["Q"], beta, out=ws["Q"])
        alpha = delta - beta.transpose().multiply(alpha).multiply(beta)
        rho = rho_new
    return r.finish(False)


def _gropp(r: _Run):
    A, M, a, k, ws, W = r.A, r.M, r.a, r.k, r.ws, r.world
    ws.put("P", k.precond(M, ws["R"]))
    ws.put("Q", k.bop(A, ws["P"]))
    ws.put("Z", ws["P"])
    rho = W.dot(ws["P"], ws["R"], a, label="rho")
    r.tracker.absorb()
    for _ in range(r.cfg.max_iter):
        r.it += 1
        fut = W.idot([(ws["P"], ws["Q"])], a, label="alpha")
        ws.put("V", k.precond(M, ws["Q"]))
        alpha = fut.result()[0][0]
        lam = r.solve_left(alpha, rho, "alpha")
        sigma_old = r.sigma
        r.update_r(lam)
        reortho = reortho_needed(r.cfg.eta, alpha)
        if reortho:
            gamma = r.reorthonormalize()
            colnorms = r.sigma.column_norms()
            ws.put("Z", k.precond(M, ws["R"]))
        else:
            gamma = r.I
            k.baxpy(ws["Z"], ws["V"], lam, alpha=-1.0, out=ws["Z"])
        r.update_x(lam, sigma_old)
        fut = W.idot([(ws["Z"], ws["R"])], a,
                     colnorms=[] if reortho else [r.scaled_residual()], label="rho+norm")
        ws.put("U", k.bop(A, ws["Z"]))
        prods, _, cols = fut.result()
        rho_new = prods[0]
        if not reortho:
            colnorms = np.sqrt(cols[0])
        if r.check(colnorms, reortho):
            return r.finish(True)
        beta = r.beta(rho, gamma, rho_new)
        k.baxpy(ws["Z"], ws["P"], beta, out=ws["P"])
        k.baxpy(ws["U"], ws["Q"], beta, out=ws["Q"])
        rho = rho_new
    return r.finish(False)


def _pipelined(r: _Run, ghysels: bool):
    A, M, a, k, ws, W = r.A, r.M, r.a, r.k, r.ws, r.world
    ws.put("P", k.precond(M, ws["R"]))
    ws.put("Z", ws["P"])
    ws.put("Q", k.bop(A, ws["P"]))
    ws.put("V", k.precond(M, ws["Q"]))
    if ghysels:
        ws.put("U", ws["Q"])
        ws.put("S", k.bop(A, ws["V"]))
    prods, _, _ = W.idot([(ws["P"], ws["R"]), (ws["P"], ws["Q"])], a, label="rho+alpha").result()
    rho, alpha = prods
    r.tracker.absorb()
    for _ in range(r.cfg.max_iter):
        r.it += 1
        lam = r.solve_left(alpha, rho, "alpha")
        sigma_old = r.sigma
        r.update_r(lam)
        reortho = reortho_needed(r.cfg.eta, alpha)
        if reortho:
            gamma = r.reorthonormalize()
            colnorms = r.sigma.column_norms()
            ws.put("Z", k.precond(M, ws["R"]))
            if ghysels:
                ws.put("U", k.bop(A, ws["Z"]))
        else:
            gamma = r.I
            k.baxpy(ws["Z"], ws["V"], lam, alpha=-1.0, out=ws["Z"])
            if ghysels:
                k.baxpy(ws["U"], ws["S"], lam, alpha=-1.0, out=ws["U"])
        r.update_x(lam, sigma_old)
        if not ghysels:
            ws.put("U", k.bop(A, ws["Z"]))
        fut = W.idot([(ws["Z"], ws["R"]), (ws["Z"], ws["U"])], a,
                     colnorms=[] if reortho else [r.scaled_residual()], label="rho+delta+norm")
        ws.put("W", k.precond(M, ws["U"]))
        if ghysels:
            ws.put("T", k.bop(A, ws["W"]))
        prods, _, cols = fut.result()
        rho_new, delta = prods
        if not reortho:
            colnorms = np.sqrt(cols[0])
        if r.check(colnorms, reortho):
            return r.finish(True)
        beta = r.beta(rho, gamma, rho_new)
        k.baxpy(ws["Z"], ws["P"], beta, out=ws["P"])
        k.baxpy(ws["U"], ws["Q"], beta, out=ws["Q"])
        k.baxpy(ws["W"], ws["V"], beta, out=ws["V"])
        if ghysels:
            k.baxpy(ws["T"], ws["S"], beta, out=ws["S"])
        alpha = delta - beta.transpose().multiply(alpha).multiply(beta)
        rho = rho_new
    return r.finish(False)


def bcg_solve(A: SparseOperator, B: np.ndarray, X0: np.ndarray | None = None,
              M: Preconditioner | None = None, algebra: AlgebraSpec | None = None,
              cfg: CgConfig | None = None, world: World | None = None,
              callback: Callable[[int, dict], None] | None = None):
    """Solve ``A X = B`` for symmetric positive definite ``A``.

    Parameters
    ----------
    A : SparseOperator
    B : ndarray, shape (n, s)
    X0 : ndarray, optional
        Initial guess (zero by default).
    M : Preconditioner, optional
        Symmetric positive definite preconditioner (identity by default).
    algebra : AlgebraSpec, optional
        Coefficient algebra (Block by default).
    cfg : CgConfig, optional
    world : World, optional
        Simulated machine (one rank by default).
    callback : callable, optional
        Called as ``callback(k, state)`` after every recorded iteration with
        views of ``X``, ``Rbar``, ``P`` and the transform ``sigma``.

    Returns
    -------
    X : ndarray
    report : SolverReport

    Raises
    ------
    BreakdownError
        On a singular coefficient or a non-finite residual.
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
    cfg = cfg or CgConfig()
    M = M or Preconditioner.identity(A.n)
    world = world or World(1)
    t0 = time.perf_counter()
    run = _Run(A, M, B, X0, a, cfg, world, callback)
    if residual_measure(run.norms0, run.norms0, cfg.norm_kind) == 0.0:
        X, rep = run.finish(True)
    elif cfg.variant in ("classic", "two-reduction"):
        X, rep = _classic(run, cfg.variant == "two-reduction")
    elif cfg.variant == "one-reduction":
        X, rep = _one_reduction(run)
    elif cfg.variant == "gropp":
        X, rep = _gropp(run)
    else:
        X, rep = _pipelined(run, cfg.variant == "ghysels")
    rep.wall_time = time.perf_counter() - t0
    return X, rep


# -- convergence theory checks -----------------------------------------------


def chebyshev_bound(kappa: float, k: int, e0_norm: float) -> float:
    """``2 ((sqrt(kappa) - 1) / (sqrt(kappa) + 1))^k e0`` energy-error bound."""
    if kappa < 1:
        raise ValueError("condition number must be at least 1")
    if k == 0:
        return 2.0 * e0_norm
    rk = math.sqrt(kappa)
    return 2.0 * ((rk - 1.0) / (rk + 1.0)) ** k * e0_norm


@dataclass
class RateCheck:
    measured_rate: float
    predicted_rate: float
    predicted_index: int
    kappa_hat: float
    iterations: int
    history: list[float] = field(default_factory=list)


def blockglobal_rate_check(A: SparseOperator, s: int, p: int, seed: int = 0,
                           iterations: int = 30) -> RateCheck:
    """Compare the block-global CG rate with ``(sqrt(k)-1)/(sqrt(k)+1)``.

    The rate class is governed by ``kappa_hat = lambda_n / lambda_m`` with
    ``m = ceil(p / q)``.  The measured rate is the geometric mean reduction
    of the energy error over the run.
    """
    from .blocklinalg import generate_rhs

    a = AlgebraSpec.block_global(s, p)
    dense = A.to_dense()
    lam = np.linalg.eigvalsh(dense)
    idx = math.ceil(p / a.q)
    kappa_hat = lam[-1] / lam[idx - 1]
    B = generate_rhs(A.n, s, seed)
    Xs = np.linalg.solve(dense, B)
    errs: list[float] = []

    def cb(_k, st):
        E = Xs - st["X"]
        errs.append(math.sqrt(max(np.sum(E * (dense @ E)), 0.0)))

    cfg = CgConfig(eta=0.0, eps_tol=1e-300, norm_kind="frobenius", max_iter=iterations)
    try:
        bcg_solve(A, B, algebra=a, cfg=cfg, callback=cb)
    except BreakdownError:
        pass
    useful = [e for e in errs if e > 1e-12 * errs[0]]
    n_it = len(useful) - 1
    measured = (useful[-1] / useful[0]) ** (1.0 / n_it) if n_it > 0 else 0.0
    rk = math.sqrt(kappa_hat)
    return RateCheck(measured, (rk - 1) / (rk + 1), idx, kappa_hat, n_it, errs)
