"""Coefficient algebras for block Krylov methods.

A block Krylov method with ``s`` right-hand sides combines block vectors with
``s x s`` coefficient matrices drawn from a *-subalgebra ``S``.  This module
provides the five algebra variants, their block inner products, coefficient
arithmetic, normalizers (an S-valued QR factorization) and a few diagnostics.

Every algebra is either block-parallel (``q = s/p`` independent ``p x p``
diagonal blocks) or block-global (one ``p x p`` block replicated ``q`` times):

* Parallel    = BlockParallel(p=1)
* Block       = BlockParallel(p=s)
* Global      = BlockGlobal(p=1)
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

__all__ = [
    "Variant",
    "AlgebraSpec",
    "SElement",
    "SingularElementError",
    "apply_right",
    "householder_qr",
    "block_inner_product",
    "partial_products",
    "finalize_products",
    "normalize",
    "normalize_stacked",
    "kappa_diag_scaled",
    "contains",
    "embed",
]

EPS = np.finfo(float).eps
SINGULAR_FACTOR = 1e3
DROP_FACTOR = 16.0


class SingularElementError(ArithmeticError):
    """Raised when a coefficient element cannot be inverted."""

    def __init__(self, pivot: float, threshold: float):
        self.pivot = float(pivot)
        self.threshold = float(threshold)
        super().__init__(
            f"singular coefficient element: pivot magnitude {self.pivot:.3e} "
            f"below threshold {self.threshold:.3e}"
        )


class Variant(enum.Enum):
    PARALLEL = "p"
    GLOBAL = "g"
    BLOCK = "b"
    BLOCK_PARALLEL = "bp"
    BLOCK_GLOBAL = "bg"


@dataclass(frozen=True)
class AlgebraSpec:
    """Description of a *-subalgebra of the ``s x s`` matrices.

    ``p`` is forced to 1 for Parallel and Global and to ``s`` for Block.
    """

    variant: Variant
    s: int
    p: int = 1

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant(self.variant))
        if int(self.s) < 1:
            raise ValueError(f"s must be positive, got {self.s}")
        object.__setattr__(self, "s", int(self.s))
        if self.variant in (Variant.PARALLEL, Variant.GLOBAL):
            object.__setattr__(self, "p", 1)
        elif self.variant is Variant.BLOCK:
            object.__setattr__(self, "p", self.s)
        p = int(self.p)
        if p < 1 or self.s % p != 0:
            raise ValueError(f"p={self.p} must be a positive divisor of s={self.s}")
        object.__setattr__(self, "p", p)

    # -- constructors -----------------------------------------------------
    @classmethod
    def parallel(cls, s: int) -> "AlgebraSpec":
        return cls(Variant.PARALLEL, s)

    @classmethod
    def global_(cls, s: int) -> "AlgebraSpec":
        return cls(Variant.GLOBAL, s)

    @classmethod
    def block(cls, s: int) -> "AlgebraSpec":
        return cls(Variant.BLOCK, s, s)

    @classmethod
    def block_parallel(cls, s: int, p: int) -> "AlgebraSpec":
        return cls(Variant.BLOCK_PARALLEL, s, p)

    @classmethod
    def block_global(cls, s: int, p: int) -> "AlgebraSpec":
        return cls(Variant.BLOCK_GLOBAL, s, p)

    @classmethod
    def parse(cls, text: str, s: int) -> "AlgebraSpec":
        """Parse ``p``, ``g``, ``b``, ``bp:<p>`` or ``bg:<p>``."""
        key, _, arg = text.strip().lower().partition(":")
        if key in ("p", "g", "b"):
            if arg:
                raise ValueError(f"algebra '{text}' takes no block size")
            return cls(Variant(key), s)
        if key in ("bp", "bg"):
            if not arg:
                raise ValueError(f"algebra '{text}' needs a block size, e.g. {key}:4")
            return cls(Variant(key), s, int(arg))
        raise ValueError(f"unknown algebra '{text}' (expected p, g, b, bp:<p>, bg:<p>)")

    # -- derived ----------------------------------------------------------
    @property
    def q(self) -> int:
        return self.s // self.p

    @property
    def is_global(self) -> bool:
        """True when all diagonal blocks are tied together."""
        return self.variant in (Variant.GLOBAL, Variant.BLOCK_GLOBAL) and self.q > 1

    @property
    def key(self) -> tuple[str, int, int]:
        """Canonical identity: two specs with equal keys are the same algebra."""
        return ("bg" if self.is_global else "bp", self.s, self.p)

    @property
    def dim(self) -> int:
        return self.p * self.p * (1 if self.is_global else self.q)

    def label(self) -> str:
        if self.variant in (Variant.BLOCK_PARALLEL, Variant.BLOCK_GLOBAL):
            return f"{self.variant.value}:{self.p}"
        return self.variant.value

    def same(self, other: "AlgebraSpec") -> bool:
        return self.key == other.key

    def mask(self) -> np.ndarray:
        m = np.zeros((self.s, self.s), dtype=bool)
        for g in range(self.q):
            sl = slice(g * self.p, (g + 1) * self.p)
            m[sl, sl] = True
        return m

    def identity(self) -> "SElement":
        return SElement(self, np.eye(self.s), check=False)

    def zero(self) -> "SElement":
        return SElement(self, np.zeros((self.s, self.s)), check=False)

    def basis(self) -> list[np.ndarray]:
        """A basis of the algebra as a vector space of ``s x s`` matrices."""
        out = []
        p, q = self.p, self.q
        if self.is_global:
            for i in range(p):
                for j in range(p):
                    e = np.zeros((p, p))
                    e[i, j] = 1.0
                    out.append(np.kron(np.eye(q), e))
        else:
            for g in range(q):
                for i in range(p):
                    for j in range(p):
                        e = np.zeros((self.s, self.s))
                        e[g * p + i, g * p + j] = 1.0
                        out.append(e)
        return out

    def __str__(self) -> str:
        return f"{self.label()} (s={self.s})"


def _blocks(c: np.ndarray, p: int, q: int) -> np.ndarray:
    """Diagonal ``p x p`` blocks of ``c`` as a ``(q, p, p)`` copy."""
    r = c.reshape(q, p, q, p)
    idx = np.arange(q)
    return r[idx, :, idx, :].copy()


def _assemble(blocks: np.ndarray, s: int) -> np.ndarray:
    q, p, _ = blocks.shape
    out = np.zeros((s, s))
    r = out.reshape(q, p, q, p)
    idx = np.arange(q)
    r[idx, :, idx, :] = blocks
    return out


class SElement:
    """An immutable element of a coefficient algebra, stored densely."""

    __slots__ = ("algebra", "coeffs")

    def __init__(self, algebra: AlgebraSpec, coeffs, check: bool = True):
        c = np.array(coeffs, dtype=float, copy=True)
        if c.shape != (algebra.s, algebra.s):
            raise ValueError(f"coefficients of shape {c.shape} do not match s={algebra.s}")
        if check:
            _check_pattern(algebra, c)
        c.flags.writeable = False
        object.__setattr__(self, "algebra", algebra)
        object.__setattr__(self, "coeffs", c)

    def __setattr__(self, name, value):
        raise AttributeError("SElement is immutable")

    @classmethod
    def from_blocks(cls, algebra: AlgebraSpec, blocks) -> "SElement":
        b = np.asarray(blocks, dtype=float)
        if algebra.is_global:
            if b.ndim == 2:
                b = b[None]
            b = np.broadcast_to(b[:1], (algebra.q, algebra.p, algebra.p))
        return cls(algebra, _assemble(np.asarray(b), algebra.s), check=False)

    def blocks(self) -> np.ndarray:
        return _blocks(self.coeffs, self.algebra.p, self.algebra.q)

    # -- arithmetic -------------------------------------------------------
    def _other(self, other: "SElement") -> np.ndarray:
        if not isinstance(other, SElement):
            raise TypeError(f"expected SElement, got {type(other).__name__}")
        if not self.algebra.same(other.algebra):
            raise ValueError(f"algebra mismatch: {self.algebra} vs {other.algebra}")
        return other.coeffs

    def multiply(self, other: "SElement") -> "SElement":
        return SElement(self.algebra, self._mul(self.coeffs, self._other(other)), check=False)

    def _mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        alg = self.algebra
        if alg.p == 1:
            return np.diag(np.diag(a) * np.diag(b))
        if alg.q == 1:
            return a @ b
        if alg.is_global:
            blk = a[: alg.p, : alg.p] @ b[: alg.p, : alg.p]
            return np.kron(np.eye(alg.q), blk)
        return _assemble(np.matmul(_blocks(a, alg.p, alg.q), _blocks(b, alg.p, alg.q)), alg.s)

    def __matmul__(self, other: "SElement") -> "SElement":
        return self.multiply(other)

    def add(self, other: "SElement") -> "SElement":
        return SElement(self.algebra, self.coeffs + self._other(other), check=False)

    def __add__(self, other: "SElement") -> "SElement":
        return self.add(other)

    def subtract(self, other: "SElement") -> "SElement":
        return SElement(self.algebra, self.coeffs - self._other(other), check=False)

    def __sub__(self, other: "SElement") -> "SElement":
        return self.subtract(other)

    def scale(self, factor: float) -> "SElement":
        return SElement(self.algebra, float(factor) * self.coeffs, check=False)

    def __neg__(self) -> "SElement":
        return self.scale(-1.0)

    def transpose(self) -> "SElement":
        return SElement(self.algebra, self.coeffs.T, check=False)

    @property
    def T(self) -> "SElement":
        return self.transpose()

    def invert(self) -> "SElement":
        """Inverse element; raises :class:`SingularElementError` on a tiny pivot."""
        alg = self.algebra
        threshold = SINGULAR_FACTOR * EPS * np.linalg.norm(self.coeffs)
        if alg.p == 1:
            d = np.diag(self.coeffs)
            piv = np.min(np.abs(d))
            if not piv >= threshold or piv == 0.0:
                raise SingularElementError(piv, threshold)
            return SElement(alg, np.diag(1.0 / d), check=False)
        nblk = 1 if alg.is_global else alg.q
        blocks = self.blocks()[:nblk]
        inv = np.empty_like(blocks)
        for g in range(nblk):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(blocks[g], check_finite=False)
            pmin = np.min(np.abs(np.diag(lu)))
            if not pmin >= threshold or pmin == 0.0:
                raise SingularElementError(pmin, threshold)
            inv[g] = sla.lu_solve((lu, piv), np.eye(alg.p), check_finite=False)
        return SElement.from_blocks(alg, inv)

    def solve_left(self, other: "SElement") -> "SElement":
        """Return ``self^{-1} @ other``."""
        return self.invert().multiply(other)

    # -- norms ------------------------------------------------------------
    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def column_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coeffs * self.coeffs, axis=0))

    def max_column_norm(self) -> float:
        return float(np.max(self.column_norms()))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        return bool(np.max(np.abs(self.coeffs - self.coeffs.T), initial=0.0) <= tol)

    def __repr__(self) -> str:
        return f"SElement({self.algebra.label()}, s={self.algebra.s})"


def _check_pattern(algebra: AlgebraSpec, c: np.ndarray) -> None:
    if np.any(c[~algebra.mask()] != 0.0):
        raise ValueError(f"coefficients have entries outside the {algebra} pattern")
    if algebra.is_global:
        b = _blocks(c, algebra.p, algebra.q)
        if np.any(b != b[:1]):
            raise ValueError("block-global element must repeat one diagonal block")


def apply_right(X: np.ndarray, c: SElement) -> np.ndarray:
    """Right multiplication ``X @ c`` exploiting the block pattern."""
    alg = c.algebra
    X = np.asarray(X)
    if X.shape[1] != alg.s:
        raise ValueError(f"block vector has {X.shape[1]} columns, algebra has s={alg.s}")
    if alg.p == 1:
        return X * np.diag(c.coeffs)
    if alg.q == 1:
        return X @ c.coeffs
    n = X.shape[0]
    if alg.is_global:
        blk = c.coeffs[: alg.p, : alg.p]
        return (X.reshape(n * alg.q, alg.p) @ blk).reshape(n, alg.s)
    xr = X.reshape(n, alg.q, alg.p).transpose(1, 0, 2)
    return np.matmul(xr, c.blocks()).transpose(1, 0, 2).reshape(n, alg.s)




# -- inner products -------------------------------------------------------


def partial_products(X: np.ndarray, Y: np.ndarray, a: AlgebraSpec) -> np.ndarray:
    """Unscaled group products ``X_g^T Y_g`` as a ``(q, p, p)`` array.

    Partials from disjoint row ranges add up to the partial of the
    concatenation, which is what distributed reductions rely on.  Diagonal
    entries always come from the same column-dot kernel so that the Parallel
    product is exactly the diagonal of any coarser product.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError(f"block vector shapes differ: {X.shape} vs {Y.shape}")
    if X.ndim != 2 or X.shape[1] != a.s:
        raise ValueError(f"block vectors must be n x {a.s}, got {X.shape}")
    n, p, q = X.shape[0], a.p, a.q
    diag = np.sum(X * Y, axis=0)
    if p == 1:
        return diag.reshape(q, 1, 1)
    if q == 1:
        out = (X.T @ Y)[None]
    else:
        xr = X.reshape(n, q, p).transpose(1, 2, 0)
        yr = Y.reshape(n, q, p).transpose(1, 0, 2)
        out = np.matmul(xr, yr)
    idx = np.arange(p)
    out[:, idx, idx] = diag.reshape(q, p)
    return out


def finalize_products(raw: np.ndarray, a: AlgebraSpec) -> SElement:
    """Turn summed partial products into an algebra element."""
    if a.is_global:
        blk = raw.sum(axis=0) / a.q
        return SElement.from_blocks(a, blk)
    return SElement.from_blocks(a, raw)


def block_inner_product(X: np.ndarray, Y: np.ndarray, a: AlgebraSpec) -> SElement:
    """Block inner product ``<X, Y>_S`` of two ``n x s`` block vectors."""
    return finalize_products(partial_products(X, Y, a), a)


# -- normalizers ----------------------------------------------------------


def householder_qr(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with a nonnegative diagonal of ``R``.

    Rank-deficient input is handled canonically: a column whose remainder
    after the previous reflections is below ``DROP_FACTOR * sqrt(m) * eps``
    times its own norm gets a zero row in ``R`` and an orthonormal padding
    column in ``Q``.  The other rows are then the unique ``R`` factor of the
    independent columns, so distributed and local factorizations agree.
    Requires ``m >= k``.
    """
    A = np.array(X, dtype=float, copy=True)
    m, k = A.shape
    if m < k:
        raise ValueError(f"Householder QR needs at least as many rows as columns ({m} < {k})")
    tol = DROP_FACTOR * np.sqrt(m) * EPS * np.sqrt(np.sum(A * A, axis=0))
    vs: list[np.ndarray] = []
    pivots: list[int] = []
    r = 0
    for j in range(k):
        x = A[r:, j]
        normx = np.linalg.norm(x)
        if normx <= tol[j]:
            A[r:, j] = 0.0
            continue
        alpha = -normx if x[0] >= 0 else normx
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        A[r:, j:] -= 2.0 * np.outer(v, v @ A[r:, j:])
        A[r, j] = alpha
        A[r + 1 :, j] = 0.0
        vs.append(v)
        pivots.append(j)
        r += 1
    full = np.zeros((m, k))
    full[np.arange(k), np.arange(k)] = 1.0
    for i in range(r - 1, -1, -1):
        v = vs[i]
        full[i:, :] -= 2.0 * np.outer(v, v @ full[i:, :])
    R = np.zeros((k, k))
    Q = np.empty((m, k))
    R[pivots, :] = A[:r, :]
    dropped = sorted(set(range(k)) - set(pivots))
    Q[:, pivots] = full[:, :r]
    Q[:, dropped] = full[:, r:]
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


def _check_finite(X: np.ndarray) -> None:
    if not np.all(np.isfinite(X)):
        raise ValueError("block vector contains NaN or Inf")


def normalize(X: np.ndarray, a: AlgebraSpec) -> tuple[np.ndarray, SElement]:
    """Normalizer ``X = Q sigma`` with ``<Q, Q>_S = I``.

    Block-parallel algebras factor each ``p``-column group independently.
    Block-global algebras factor the ``(q n) x p`` stack of the groups and
    rescale by ``sqrt(q)`` so that the averaged product is the identity.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != a.s:
        raise ValueError(f"block vector must be n x {a.s}, got {X.shape}")
    _check_finite(X)
    n, p, q = X.shape[0], a.p, a.q
    if a.is_global:
        stacked = X.reshape(n, q, p).transpose(1, 0, 2).reshape(q * n, p)
        Yt, rho = householder_qr(stacked)
        Q = np.sqrt(q) * Yt.reshape(q, n, p).transpose(1, 0, 2).reshape(n, a.s)
        return Q, SElement.from_blocks(a, rho / np.sqrt(q))
    if p == 1:
        norms = np.sqrt(np.sum(X * X, axis=0))
        Q = np.empty_like(X)
        nz = norms > 0
        Q[:, nz] = X[:, nz] / norms[nz]
        for j in np.flatnonzero(~nz):
            Q[:, j] = 0.0
            Q[0, j] = 1.0
        return Q, SElement(a, np.diag(norms), check=False)
    Q = np.empty_like(X)
    blocks = np.empty((q, p, p))
    for g in range(q):
        sl = slice(g * p, (g + 1) * p)
        Q[:, sl], blocks[g] = householder_qr(X[:, sl])
    return Q, SElement.from_blocks(a, blocks)


def normalize_stacked(Z: Sequence[SElement] | np.ndarray, a: AlgebraSpec) -> tuple[np.ndarray, SElement]:
    """Normalize a vector of algebra elements.

    The product of two such vectors is ``sum_i z_i^T w_i`` restricted to the
    pattern (no ``1/q`` averaging).  ``Z`` is a sequence of elements or an
    ``(m, s, s)`` array of their coefficients; the orthonormal factor is
    returned as an ``(m, s, s)`` array.
    """
    if isinstance(Z, np.ndarray):
        arr = np.asarray(Z, dtype=float)
    else:
        arr = np.stack([z.coeffs for z in Z])
    m, s, p, q = arr.shape[0], a.s, a.p, a.q
    if a.is_global:
        stack = arr[:, :p, :p].reshape(m * p, p)
        Qs, rho = householder_qr(stack)
        out = np.stack([np.kron(np.eye(q), blk) for blk in Qs.reshape(m, p, p)])
        return out, SElement.from_blocks(a, rho)
    if p == 1:
        d = np.diagonal(arr, axis1=1, axis2=2)
        norms = np.sqrt(np.sum(d * d, axis=0))
        qd = np.zeros_like(d)
        nz = norms > 0
        qd[:, nz] = d[:, nz] / norms[nz]
        qd[0, ~nz] = 1.0
        out = np.zeros_like(arr)
        idx = np.arange(s)
        out[:, idx, idx] = qd
        return out, SElement(a, np.diag(norms), check=False)
    out = np.zeros_like(arr)
    rblocks = np.empty((q, p, p))
    for g in range(q):
        sl = slice(g * p, (g + 1) * p)
        Qg, rblocks[g] = householder_qr(arr[:, sl, sl].reshape(m * p, p))
        out[:, sl, sl] = Qg.reshape(m, p, p)
    return out, SElement.from_blocks(a, rblocks)


# -- diagnostics ----------------------------------------------------------


def kappa_diag_scaled(c: SElement) -> float:
    """Condition number of ``c`` after symmetric diagonal scaling."""
    a = c.algebra
    d = np.diag(c.coeffs)
    if np.any(~(d > 0)):
        raise ValueError("coefficient element lost definiteness: nonpositive diagonal entry")
    if a.p == 1:
        return 1.0
    nblk = 1 if a.is_global else a.q
    blocks = c.blocks()[:nblk]
    dd = np.sqrt(np.diagonal(blocks, axis1=1, axis2=2))
    scaled = blocks / dd[:, :, None] / dd[:, None, :]
    scaled = 0.5 * (scaled + scaled.transpose(0, 2, 1))
    ev = np.linalg.eigvalsh(scaled)
    lo, hi = ev.min(), ev.max()
    if lo <= 0.0:
        return float("inf")
    return float(hi / lo)


def contains(small: AlgebraSpec, big: AlgebraSpec) -> bool:
    """Whether ``small`` is a subalgebra of ``big``."""
    if small.s != big.s:
        raise ValueError(f"algebras act on different sizes: s={small.s} vs s={big.s}")
    if big.p % small.p != 0:
        return False
    if not big.is_global:
        return True
    return small.is_global


def embed(c: SElement, big: AlgebraSpec) -> SElement:
    """Re-express ``c`` as an element of the larger algebra ``big``."""
    if not contains(c.algebra, big):
        raise ValueError(f"{c.algebra} is not contained in {big}")
    return SElement(big, c.coeffs, check=False)
