"""Block vectors, sparse operators, instrumented kernels and preconditioners.

Block vectors are plain ``n x s`` C-ordered float arrays (row-major, as in the
kernels' memory model).  The three kernels are

* BOP   ``Y = A X``            2 s z flops, 2 z + 2 s n words moved
* BDOT  ``<X, Y>_S``          2 n p^2 q flops, 2 n s words loaded
* BAXPY ``Y + X c``           2 n p^2 q flops, 3 n s words moved

and :class:`Kernels` keeps exact integer counters for them.  A word is one
64-bit value; a column index is assumed to occupy one word as well.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .salgebra import AlgebraSpec, SElement, apply_right, block_inner_product

__all__ = [
    "CHUNK_ROWS",
    "SparseOperator",
    "KernelCounters",
    "Kernels",
    "PrecondKind",
    "Preconditioner",
    "check_bsa",
    "BlockGrade",
    "block_grade_bruteforce",
    "MatrixMarketError",
    "load_matrixmarket",
    "write_matrixmarket",
    "generate_poisson2d",
    "generate_rhs",
    "RHS_GENERATOR",
]

# Row chunk length of the reference kernel loops.  The vectorized kernels
# below hand whole arrays to BLAS, so this only matters for `chunked_bdot`.
CHUNK_ROWS = 4

RHS_GENERATOR = "Philox4x64-10"


class SparseOperator:
    """A square sparse matrix in CSR form exposing only forward application."""

    __slots__ = ("_csr",)

    def __init__(self, matrix):
        csr = sp.csr_matrix(matrix, dtype=float)
        if csr.shape[0] != csr.shape[1]:
            raise ValueError(f"operator must be square, got shape {csr.shape}")
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        self._csr = csr

    @property
    def n(self) -> int:
        return self._csr.shape[0]

    @property
    def z(self) -> int:
        return int(self._csr.nnz)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.shape[0] != self.n:
            raise ValueError(f"operator of size {self.n} applied to block vector with {X.shape[0]} rows")
        return np.ascontiguousarray(self._csr @ X)

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal().copy()

    def csr_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Copies of ``(row offsets, column indices, values)``."""
        c = self._csr
        return c.indptr.copy(), c.indices.copy(), c.data.copy()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def _matrix(self) -> sp.csr_matrix:
        return self._csr

    def __repr__(self) -> str:
        return f"SparseOperator(n={self.n}, z={self.z})"


class WorkSink(Protocol):
    def register_work(self, flops: int, words: int) -> None: ...


@dataclass
class KernelCounters:
    """Exact kernel counters.  Word counts are in 64-bit values."""

    flops: int = 0
    words_loaded: int = 0
    words_stored: int = 0
    calls: dict[str, int] = field(default_factory=dict)

    @property
    def words_transferred(self) -> int:
        return self.words_loaded + self.words_stored

    def record(self, kind: str, flops: int, loaded: int, stored: int) -> None:
        self.flops += int(flops)
        self.words_loaded += int(loaded)
        self.words_stored += int(stored)
        self.calls[kind] = self.calls.get(kind, 0) + 1

    def snapshot(self) -> "KernelCounters":
        return KernelCounters(self.flops, self.words_loaded, self.words_stored, dict(self.calls))

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "words_loaded": self.words_loaded,
            "words_stored": self.words_stored,
            "calls": dict(sorted(self.calls.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def bop_cost(s: int, n: int, z: int) -> tuple[int, int, int]:
    return 2 * s * z, 2 * z + s * n, s * n


def bdot_cost(n: int, a: AlgebraSpec) -> tuple[int, int, int]:
    return 2 * n * a.p * a.p * a.q, 2 * n * a.s, 0


def baxpy_cost(n: int, a: AlgebraSpec) -> tuple[int, int, int]:
    return 2 * n * a.p * a.p * a.q, 2 * n * a.s, n * a.s


def intensity(kind: str, a: AlgebraSpec, n: int = 1, z: int = 0) -> float:
    """Model arithmetic intensity in flops per word."""
    if kind == "bop":
        f, lo, st = bop_cost(a.s, n, z)
    elif kind == "bdot":
        f, lo, st = bdot_cost(n, a)
    elif kind == "baxpy":
        f, lo, st = baxpy_cost(n, a)
    else:
        raise ValueError(f"unknown kernel '{kind}'")
    return f / (lo + st)


class Kernels:
    """Kernel entry points that keep :class:`KernelCounters` up to date.

    When a ``sink`` is attached (a simulated machine), every kernel also
    reports its cost so the virtual clock advances.
    """

    def __init__(self, counters: KernelCounters | None = None, sink: WorkSink | None = None):
        self.counters = counters if counters is not None else KernelCounters()
        self.sink = sink

    def _charge(self, kind: str, flops: int, loaded: int, stored: int) -> None:
        self.counters.record(kind, flops, loaded, stored)
        if self.sink is not None:
            self.sink.register_work(flops, loaded + stored)

    def bop(self, A: SparseOperator, X: np.ndarray) -> np.ndarray:
        Y = A.apply(X)
        self._charge("bop", *bop_cost(X.shape[1], A.n, A.z))
        return Y

    def bdot(self, X: np.ndarray, Y: np.ndarray, a: AlgebraSpec) -> SElement:
        out = block_inner_product(X, Y, a)
        self._charge("bdot", *bdot_cost(X.shape[0], a))
        return out

    def charge_bdot(self, n: int, a: AlgebraSpec, count: int = 1) -> None:
        """Account for ``count`` block products computed elsewhere."""
        for _ in range(count):
            self._charge("bdot", *bdot_cost(n, a))

    def charge_baxpy(self, n: int, a: AlgebraSpec, count: int = 1) -> None:
        """Account for ``count`` vector updates computed elsewhere."""
        for _ in range(count):
            self._charge("baxpy", *baxpy_cost(n, a))

    def baxpy(self, Y: np.ndarray, X: np.ndarray, c: SElement, alpha: float = 1.0,
              out: np.ndarray | None = None) -> np.ndarray:
        """``out = Y + alpha * X c``; ``out`` may alias ``Y``."""
        upd = apply_right(X, c)
        if alpha != 1.0:
            upd *= alpha
        if out is None:
            out = Y + upd
        else:
            np.add(Y, upd, out=out)
        self._charge("baxpy", *baxpy_cost(X.shape[0], c.algebra))
        return out

    def axpy(self, Y: np.ndarray, X: np.ndarray, alpha: float) -> np.ndarray:
        """Scalar update ``Y + alpha X``, counted as a vector update."""
        n, s = X.shape
        self._charge("baxpy", 2 * n * s, 2 * n * s, n * s)
        return Y + alpha * X

    def bscale(self, X: np.ndarray, c: SElement, out: np.ndarray | None = None) -> np.ndarray:
        """``out = X c`` (a transform, not counted as a vector update)."""
        res = apply_right(X, c)
        f, lo, st = baxpy_cost(X.shape[0], c.algebra)
        self._charge("bscale", f, lo - X.shape[0] * c.algebra.s, st)
        if out is None:
            return res
        out[...] = res
        return out

    def precond(self, M: "Preconditioner", X: np.ndarray) -> np.ndarray:
        Y = M.apply(X)
        self._charge("precond", *M.cost(X.shape[1]))
        return Y

    def normalize_cost(self, n: int, a: AlgebraSpec) -> None:
        # Householder QR of n x p panels: about 4 n p^2 flops per group.
        self._charge("normalize", 4 * n * a.p * a.p * a.q, n * a.s, n * a.s)

    def colnorm_cost(self, n: int, s: int) -> None:
        self._charge("colnorm", 2 * n * s, n * s, 0)


def chunked_bdot(X: np.ndarray, Y: np.ndarray, a: AlgebraSpec, chunk: int = CHUNK_ROWS) -> SElement:
    """Reference BDOT over row chunks combined by a fixed pairwise tree."""
    from .salgebra import finalize_products, partial_products

    n = X.shape[0]
    parts = [partial_products(X[i:i + chunk], Y[i:i + chunk], a) for i in range(0, n, chunk)]
    if not parts:
        parts = [np.zeros((a.q, a.p, a.p))]
    return finalize_products(pairwise_sum(parts), a)


def pairwise_sum(parts: list[np.ndarray]) -> np.ndarray:
    """Sum with a fixed balanced binary tree (left subtree takes the ceiling half)."""
    if len(parts) == 1:
        return parts[0].copy()
    mid = (len(parts) + 1) // 2
    return pairwise_sum(parts[:mid]) + pairwise_sum(parts[mid:])


__all__ += ["chunked_bdot", "pairwise_sum", "intensity", "bop_cost", "bdot_cost", "baxpy_cost"]


# -- preconditioners ------------------------------------------------------


class PrecondKind(enum.Enum):
    IDENTITY = "identity"
    JACOBI = "jacobi"
    SSOR = "ssor"
    ILU0 = "ilu0"


class Preconditioner:
    """Applies ``M^{-1}`` to block vectors.

    Build with :meth:`identity`, :meth:`jacobi`, :meth:`ssor`, :meth:`ilu0`
    or :meth:`parse`.  SSOR is the symmetric forward/backward sweep, so it is
    symmetric positive definite whenever ``A`` is.
    """

    def __init__(self, kind: PrecondKind, n: int, **state):
        self.kind = kind
        self.n = n
        self._state = state
        self.omega = state.get("omega")
        self.sweeps = state.get("sweeps", 1)

    def __repr__(self) -> str:
        if self.kind is PrecondKind.SSOR:
            return f"Preconditioner(ssor, omega={self.omega}, sweeps={self.sweeps})"
        return f"Preconditioner({self.kind.value})"

    # -- builders ---------------------------------------------------------
    @classmethod
    def identity(cls, n: int) -> "Preconditioner":
        return cls(PrecondKind.IDENTITY, n)

    @classmethod
    def jacobi(cls, A: SparseOperator) -> "Preconditioner":
        d = A.diagonal()
        _require_diagonal(d)
        return cls(PrecondKind.JACOBI, A.n, inv_diag=1.0 / d, z=A.n)

    @classmethod
    def ssor(cls, A: SparseOperator, omega: float = 1.0, sweeps: int = 1) -> "Preconditioner":
        if not 0.0 < omega < 2.0:
            raise ValueError(f"SSOR relaxation must lie in (0, 2), got {omega}")
        if sweeps < 1:
            raise ValueError("SSOR needs at least one sweep")
        mat = A._matrix()
        d = mat.diagonal()
        _require_diagonal(d)
        D = sp.diags(d)
        lower = (D / omega + sp.tril(mat, k=-1)).tocsc()
        upper = (D / omega + sp.triu(mat, k=1)).tocsc()
        return cls(
            PrecondKind.SSOR, A.n, omega=float(omega), sweeps=int(sweeps),
            lower=_TriangularSolver(lower), upper=_TriangularSolver(upper),
            diag=d, A=mat, z=A.z,
        )

    @classmethod
    def ilu0(cls, A: SparseOperator) -> "Preconditioner":
        L, U = ilu0_factor(A)
        return cls(PrecondKind.ILU0, A.n, L=L, U=U,
                   lower=_TriangularSolver(L.tocsc()), upper=_TriangularSolver(U.tocsc()), z=A.z)

    @classmethod
    def parse(cls, text: str, A: SparseOperator) -> "Preconditioner":
        """``identity``, ``jacobi``, ``ilu0`` or ``ssor[:omega[:sweeps]]``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        if kind in ("identity", "none", "i"):
            return cls.identity(A.n)
        if kind == "jacobi":
            return cls.jacobi(A)
        if kind == "ilu0":
            return cls.ilu0(A)
        if kind == "ssor":
            omega = float(parts[1]) if len(parts) > 1 else 1.0
            sweeps = int(parts[2]) if len(parts) > 2 else 1
            return cls.ssor(A, omega, sweeps)
        raise ValueError(f"unknown preconditioner '{text}' (identity, jacobi, ssor[:w[:k]], ilu0)")

    # -- application ------------------------------------------------------
    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.n:
            raise ValueError(f"preconditioner of size {self.n} applied to {X.shape[0]} rows")
        k = self.kind
        if k is PrecondKind.IDENTITY:
            return X.copy()
        if k is PrecondKind.JACOBI:
            return X * self._state["inv_diag"][:, None]
        if k is PrecondKind.ILU0:
            return self._state["upper"].solve(self._state["lower"].solve(X))
        return self._ssor_apply(X)

    def _ssor_once(self, X: np.ndarray) -> np.ndarray:
        st = self._state
        w = st["omega"]
        Y = st["lower"].solve(X)
        Y *= (st["diag"] / w)[:, None]
        Y = st["upper"].solve(Y)
        return Y * (2.0 - w)

    def _ssor_apply(self, X: np.ndarray) -> np.ndarray:
        Y = self._ssor_once(X)
        A = self._state["A"]
        for _ in range(self.sweeps - 1):
            Y += self._ssor_once(X - A @ Y)
        return np.ascontiguousarray(Y)

    def apply_forward(self, X: np.ndarray) -> np.ndarray:
        """Apply ``M`` itself (single-sweep forms only)."""
        k = self.kind
        if k is PrecondKind.IDENTITY:
            return X.copy()
        if k is PrecondKind.JACOBI:
            return X / self._state["inv_diag"][:, None]
        if k is PrecondKind.ILU0:
            return self._state["L"] @ (self._state["U"] @ X)
        if self.sweeps != 1:
            raise NotImplementedError("forward application of multi-sweep SSOR")
        st = self._state
        w = st["omega"]
        lo = st["lower"].matrix
        up = st["upper"].matrix
        return lo @ ((up @ X) / (st["diag"] / w)[:, None]) / (2.0 - w)

    def cost(self, s: int) -> tuple[int, int, int]:
        """Model cost of one application, treated like an operator application."""
        if self.kind is PrecondKind.IDENTITY:
            return 0, 0, 0
        z = self._state["z"]
        if self.kind is PrecondKind.SSOR:
            z = z * (2 * self.sweeps - 1)
        return bop_cost(s, self.n, z)


def _require_diagonal(d: np.ndarray) -> None:
    bad = np.flatnonzero(d == 0.0)
    if bad.size:
        raise ValueError(f"zero diagonal entry at row {int(bad[0])}: preconditioner cannot be built")


class _TriangularSolver:
    """Sparse triangular solves through a natural-order LU of a triangular matrix."""

    def __init__(self, tri_csc: sp.csc_matrix):
        self.matrix = tri_csc.tocsr()
        self._lu = spla.splu(tri_csc, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})

    def solve(self, X: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(X, dtype=float))


def ilu0_factor(A: SparseOperator) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Incomplete LU without fill in natural ordering.

    Returns unit lower ``L`` and upper ``U`` whose combined pattern equals the
    pattern of ``A``.
    """
    indptr, indices, data = A.csr_arrays()
    n = A.n
    vals = data.copy()
    diag_pos = np.full(n, -1)
    for i in range(n):
        row = indices[indptr[i]:indptr[i + 1]]
        hit = np.flatnonzero(row == i)
        if hit.size == 0:
            raise ValueError(f"zero diagonal entry at row {i}: ILU(0) cannot be built")
        diag_pos[i] = indptr[i] + hit[0]
    for i in range(1, n):
        lo, hi = indptr[i], indptr[i + 1]
        cols = indices[lo:hi]
        where = {int(c): lo + t for t, c in enumerate(cols)}
        for t in range(lo, hi):
            k = int(indices[t])
            if k >= i:
                break
            piv = vals[diag_pos[k]]
            if piv == 0.0:
                raise ValueError(f"zero pivot at row {k} during ILU(0)")
            vals[t] /= piv
            lik = vals[t]
            for u in range(diag_pos[k] + 1, indptr[k + 1]):
                j = int(indices[u])
                pos = where.get(j)
                if pos is not None:
                    vals[pos] -= lik * vals[u]
    for i in range(n):
        if vals[diag_pos[i]] == 0.0:
            raise ValueError(f"zero pivot at row {i} during ILU(0)")
    full = sp.csr_matrix((vals, indices, indptr), shape=(n, n))
    L = (sp.tril(full, k=-1) + sp.identity(n)).tocsr()
    U = sp.triu(full).tocsr()
    return L, U


__all__ += ["ilu0_factor"]


# -- diagnostics ----------------------------------------------------------


@dataclass
class BsaReport:
    residual: float
    operator_residual: float
    precond_residual: float
    trials: int

    @property
    def is_self_adjoint(self) -> bool:
        return self.residual <= 1e-10


def check_bsa(A: SparseOperator, M: Preconditioner, a: AlgebraSpec, trials: int = 5,
              seed: int = 0) -> BsaReport:
    """Probabilistic test that ``M^{-1} A`` is block self-adjoint in the M-product.

    With ``M`` symmetric positive definite, self-adjointness of ``M^{-1}A``
    with respect to ``<M., .>_S`` is equivalent to symmetry of both ``A`` and
    ``M^{-1}``; both are probed with random block vectors and the larger
    relative defect is reported.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    worst_a = worst_m = 0.0
    for _ in range(trials):
        X = rng.uniform(-1, 1, (A.n, a.s))
        Y = rng.uniform(-1, 1, (A.n, a.s))
        X /= np.linalg.norm(X)
        Y /= np.linalg.norm(Y)
        AX, AY = A.apply(X), A.apply(Y)
        lhs = block_inner_product(AX, Y, a).coeffs
        rhs = block_inner_product(X, AY, a).coeffs
        scale = max(np.linalg.norm(AX), np.linalg.norm(AY), np.finfo(float).tiny)
        worst_a = max(worst_a, np.linalg.norm(lhs - rhs) / scale)
        MX, MY = M.apply(X), M.apply(Y)
        lhs = block_inner_product(MX, Y, a).coeffs
        rhs = block_inner_product(X, MY, a).coeffs
        scale = max(np.linalg.norm(MX), np.linalg.norm(MY), np.finfo(float).tiny)
        worst_m = max(worst_m, np.linalg.norm(lhs - rhs) / scale)
    return BsaReport(max(worst_a, worst_m), worst_a, worst_m, trials)


__all__ += ["BsaReport"]


@dataclass
class BlockGrade:
    """Result of :func:`block_grade_bruteforce`.

    ``nu`` and ``xi`` are exact when the matching ``*_exact`` flag is set and
    lower bounds otherwise.  ``dims[k]`` is the dimension of the k-th space.
    """

    nu: int
    xi: int
    nu_exact: bool
    xi_exact: bool
    dims: list[int]
    solution_contained: bool | None = None

    def __iter__(self) -> Iterator[int]:
        return iter((self.nu, self.xi))


def block_grade_bruteforce(A, R: np.ndarray, a: AlgebraSpec, kmax: int,
                           solution: np.ndarray | None = None) -> BlockGrade:
    """Block grade ``nu`` and first growth deficit ``xi`` by explicit spans.

    Diagnostic only: limited to ``n * s <= 512``.  When ``solution`` (the
    exact correction ``X* - X0``) is given, also checks that it lies in the
    Krylov space of dimension ``nu``.
    """
    dense = A.to_dense() if isinstance(A, SparseOperator) else np.asarray(A, dtype=float)
    R = np.asarray(R, dtype=float)
    n, s = R.shape
    if n * s > 512:
        raise ValueError(f"block grade diagnostic limited to n*s <= 512, got {n * s}")
    basis = a.basis()
    dim_s = len(basis)
    dims = [0]
    rows: list[np.ndarray] = []
    cur = R.copy()
    spans = []
    for k in range(1, kmax + 2):
        nrm = np.linalg.norm(cur)
        if nrm > 0:
            cur = cur / nrm
        rows.extend((cur @ E).ravel() for E in basis)
        stack = np.array(rows)
        dims.append(int(np.linalg.matrix_rank(stack)))
        spans.append(stack)
        cur = dense @ cur
    nu = next((k for k in range(1, kmax + 1) if dims[k] == dims[k + 1]), None)
    xi = next((k for k in range(1, kmax + 2) if dims[k] < k * dim_s), None)
    res = BlockGrade(
        nu=nu if nu is not None else kmax + 1,
        xi=xi if xi is not None else kmax + 2,
        nu_exact=nu is not None,
        xi_exact=xi is not None,
        dims=dims,
    )
    if solution is not None and nu is not None:
        span = spans[nu - 1]
        target = np.asarray(solution, dtype=float).ravel()
        coef, *_ = np.linalg.lstsq(span.T, target, rcond=None)
        defect = np.linalg.norm(span.T @ coef - target)
        res.solution_contained = bool(defect <= 1e-8 * max(1.0, np.linalg.norm(target)))
    return res


# -- input / generators ---------------------------------------------------


class MatrixMarketError(ValueError):
    """Malformed or unsupported MatrixMarket input."""

    def __init__(self, path, line: int | None, msg: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {msg}")


_BANNER = re.compile(r"^%%matrixmarket\s+(\S+)\s+(\S+)\s+(\S+)\s+(\S+)\s*$", re.IGNORECASE)


def load_matrixmarket(path) -> SparseOperator:
    """Read a real coordinate MatrixMarket file (general or symmetric)."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise MatrixMarketError(path, None, f"cannot read file ({exc})") from exc
    lines = text.splitlines()
    if not lines:
        raise MatrixMarketError(path, 1, "empty file")
    m = _BANNER.match(lines[0].strip())
    if not m:
        raise MatrixMarketError(path, 1, "missing '%%MatrixMarket matrix coordinate <field> <symmetry>' banner")
    obj, fmt, fld, sym = (g.lower() for g in m.groups())
    if obj != "matrix":
        raise MatrixMarketError(path, 1, f"unsupported object '{obj}'")
    if fmt != "coordinate":
        raise MatrixMarketError(path, 1, f"unsupported format '{fmt}' (only coordinate)")
    if fld not in ("real", "integer", "double"):
        raise MatrixMarketError(path, 1, f"unsupported field '{fld}' (pattern and complex matrices are rejected)")
    if sym not in ("general", "symmetric"):
        raise MatrixMarketError(path, 1, f"unsupported symmetry '{sym}'")
    idx = 1
    while idx < len(lines) and (not lines[idx].strip() or lines[idx].lstrip().startswith("%")):
        idx += 1
    if idx >= len(lines):
        raise MatrixMarketError(path, idx + 1, "missing size line")
    try:
        nrows, ncols, nnz = (int(t) for t in lines[idx].split())
    except ValueError:
        raise MatrixMarketError(path, idx + 1, f"bad size line '{lines[idx].strip()}'") from None
    if nrows != ncols:
        raise MatrixMarketError(path, idx + 1, f"matrix must be square, got {nrows}x{ncols}")
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    count = 0
    for ln in range(idx + 1, len(lines)):
        raw = lines[ln].strip()
        if not raw or raw.startswith("%"):
            continue
        toks = raw.split()
        if len(toks) != 3:
            raise MatrixMarketError(path, ln + 1, f"expected 'row col value', got '{raw}'")
        if count >= nnz:
            raise MatrixMarketError(path, ln + 1, f"more entries than the declared {nnz}")
        try:
            i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
        except ValueError:
            raise MatrixMarketError(path, ln + 1, f"cannot parse entry '{raw}'") from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise MatrixMarketError(path, ln + 1, f"index ({i}, {j}) outside {nrows}x{ncols}")
        rows[count], cols[count], vals[count] = i - 1, j - 1, v
        count += 1
    if count != nnz:
        raise MatrixMarketError(path, len(lines), f"declared {nnz} entries, found {count}")
    if sym == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]),
                            np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    return SparseOperator(sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)).tocsr())


def write_matrixmarket(path, A: SparseOperator) -> None:
    """Write ``A`` as a general real coordinate file with round-trip precision."""
    indptr, indices, data = A.csr_arrays()
    out = ["%%MatrixMarket matrix coordinate real general", f"{A.n} {A.n} {A.z}"]
    for i in range(A.n):
        for t in range(indptr[i], indptr[i + 1]):
            out.append(f"{i + 1} {indices[t] + 1} {float(data[t])!r}")
    Path(path).write_text("\n".join(out) + "\n")


def generate_poisson2d(m: int) -> SparseOperator:
    """Five-point Laplacian on an ``m x m`` grid with Dirichlet boundary (n = m^2)."""
    if m < 1:
        raise ValueError("grid size must be positive")
    e = np.ones(m)
    T = sp.diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1])
    I = sp.identity(m)
    return SparseOperator((sp.kron(I, T) + sp.kron(T, I)).tocsr())


def generate_rhs(n: int, s: int, seed: int) -> np.ndarray:
    """i.i.d. uniform(-1, 1) entries from the Philox4x64-10 counter-based generator."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return rng.uniform(-1.0, 1.0, size=(n, s))


def poisson2d_eigenvalues(m: int) -> np.ndarray:
    """Exact spectrum of :func:`generate_poisson2d` (sorted ascending)."""
    k = np.arange(1, m + 1)
    t = 2.0 - 2.0 * np.cos(k * math.pi / (m + 1))
    return np.sort((t[:, None] + t[None, :]).ravel())


__all__ += ["poisson2d_eigenvalues"]
