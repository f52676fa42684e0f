"""Deterministic synthetic test matrices.

* ``powergrid``: a weighted graph Laplacian of a sparse, mostly tree-shaped
  network with line weights spanning several orders of magnitude plus a tiny
  grounding shift.  It mimics the conditioning of power-network matrices.
* ``convdiff2d``: a five-point upwind convection-diffusion operator on the unit
  square; strongly nonsymmetric for large Peclet numbers.
* ``graded_columns``: Vandermonde-type column sets for orthogonalization
  stability studies.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .blocklinalg import SparseOperator, generate_rhs

__all__ = ["powergrid", "convdiff2d", "graded_columns", "diag_operator", "lowrank_rhs"]


def powergrid(n: int = 1138, extra_edges: int = 300, weight_decades: float = 4.0,
              shift: float = 1e-6, seed: int = 0) -> SparseOperator:
    """SPD graph Laplacian ``L + shift * I`` of a random connected network."""
    rng = np.random.Generator(np.random.Philox(seed))
    parent = np.array([rng.integers(0, max(i, 1)) for i in range(1, n)])
    child = np.arange(1, n)
    ei = rng.integers(0, n, extra_edges)
    ej = rng.integers(0, n, extra_edges)
    keep = ei != ej
    rows = np.concatenate([child, ei[keep]])
    cols = np.concatenate([parent, ej[keep]])
    w = 10.0 ** rng.uniform(-weight_decades / 2, weight_decades / 2, rows.size)
    W = sp.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    W = W + W.T
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    return SparseOperator((L + shift * sp.identity(n)).tocsr())


def convdiff2d(m: int, peclet: float = 50.0, angle: float = 0.3) -> SparseOperator:
    """Upwind discretization of ``-Lap u + b . grad u`` on an ``m x m`` grid.

    ``b = peclet * (cos angle, sin angle)``; the mesh width is ``1/(m+1)``.
    """
    h = 1.0 / (m + 1)
    bx, by = peclet * np.cos(angle), peclet * np.sin(angle)
    e = np.ones(m)

    def one_dim(b):
        diff = sp.diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1]) / (h * h)
        if b >= 0:
            conv = sp.diags([-e[:-1], e], [-1, 0]) * (b / h)
        else:
            conv = sp.diags([-e, e[:-1]], [0, 1]) * (b / h)
        return diff + conv

    I = sp.identity(m)
    A = sp.kron(I, one_dim(bx)) + sp.kron(one_dim(by), I)
    return SparseOperator(A.tocsr())


def diag_operator(values) -> SparseOperator:
    return SparseOperator(sp.diags(np.asarray(values, dtype=float)).tocsr())


def graded_columns(n: int, count: int, s: int, seed: int = 0) -> list[np.ndarray]:
    """``count`` block vectors whose columns are successive monomials
    ``t^j`` on ``n`` points in ``[0, 1]``, lightly perturbed.

    The concatenated set is numerically rank-deficient for large ``count*s``.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    t = np.linspace(0.0, 1.0, n)
    cols = np.stack([t ** j for j in range(count * s)], axis=1)
    cols += 1e-14 * rng.standard_normal(cols.shape)
    return [np.ascontiguousarray(cols[:, i * s:(i + 1) * s]) for i in range(count)]


def lowrank_rhs(n: int, s: int, rank: int, noise: float, seed: int = 0) -> np.ndarray:
    """Right-hand sides of numerical rank ``rank`` plus ``noise``-scaled full-rank part."""
    G = generate_rhs(n, rank, seed)
    C = generate_rhs(rank, s, seed + 1)
    return G @ C + noise * generate_rhs(n, s, seed + 2)
