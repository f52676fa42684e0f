import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from blockkrylov.blocklinalg import (
    Kernels,
    MatrixMarketError,
    Preconditioner,
    SparseOperator,
    block_grade_bruteforce,
    check_bsa,
    generate_poisson2d,
    generate_rhs,
    ilu0_factor,
    intensity,
    load_matrixmarket,
    poisson2d_eigenvalues,
    write_matrixmarket,
)
from blockkrylov.salgebra import AlgebraSpec, SElement, apply_right


def tridiag(n):
    return SparseOperator(sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr())


def test_bop_examples():
    k = Kernels()
    X = generate_rhs(5, 3, 0)
    np.testing.assert_array_equal(k.bop(SparseOperator(sp.identity(5, format="csr")), X), X)
    Y = Kernels().bop(tridiag(3), np.ones((3, 2)))
    np.testing.assert_array_equal(Y, np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]]))


def test_bop_flops_and_dimension_check():
    A = SparseOperator(sp.random(6, 6, density=0.2, random_state=1, format="csr") + sp.identity(6))
    A = SparseOperator(sp.csr_matrix(A.to_dense() * (np.abs(A.to_dense()) > 0)))
    k = Kernels()
    k.bop(A, np.ones((6, 4)))
    assert k.counters.flops == 2 * 4 * A.z
    with pytest.raises(ValueError):
        k.bop(A, np.ones((5, 4)))


def test_ten_nonzeros_four_columns():
    A = SparseOperator(sp.csr_matrix(np.diag(np.arange(1.0, 11.0))))
    assert A.z == 10
    k = Kernels()
    k.bop(A, np.ones((10, 4)))
    assert k.counters.flops == 80


def test_counter_exactness_over_many_bops():
    A = generate_poisson2d(7)
    k = Kernels()
    X = generate_rhs(A.n, 3, 1)
    for _ in range(9):
        X = k.bop(A, X)
    assert k.counters.flops == 2 * 3 * A.z * 9


def test_bdot_baxpy_costs_and_intensity():
    a = AlgebraSpec.block_parallel(8, 4)
    k = Kernels()
    X, Y = generate_rhs(100, 8, 2), generate_rhs(100, 8, 3)
    k.bdot(X, Y, a)
    assert k.counters.flops == 6400
    k.baxpy(Y, X, a.identity())
    assert k.counters.flops == 12800
    assert k.counters.words_loaded == 2 * 100 * 8 * 2
    assert k.counters.words_stored == 100 * 8
    assert intensity("bdot", a, n=100) == pytest.approx(4.0)
    assert intensity("baxpy", a, n=100) == pytest.approx(8.0 / 3.0)


def test_baxpy_zero_coefficient():
    X, Y = generate_rhs(20, 4, 4), generate_rhs(20, 4, 5)
    out = Kernels().baxpy(Y, X, AlgebraSpec.block(4).zero())
    np.testing.assert_array_equal(out, Y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["p", "b", "bp:2", "bg:2"]))
def test_bop_linearity(seed, label):
    A = generate_poisson2d(6)
    a = AlgebraSpec.parse(label, 4)
    rng = np.random.Generator(np.random.Philox(seed))
    X, Y = rng.standard_normal((2, A.n, 4))
    if a.is_global:
        blk = rng.standard_normal((a.p, a.p))
        alpha = SElement.from_blocks(a, np.stack([blk] * a.q))
    else:
        alpha = SElement(a, rng.standard_normal((4, 4)) * a.mask())
    lhs = A.apply(apply_right(X, alpha) + Y)
    rhs = apply_right(A.apply(X), alpha) + A.apply(Y)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_preconditioner_examples():
    D = SparseOperator(sp.diags([2.0, 4.0]).tocsr())
    X = np.array([[2.0], [4.0]])
    np.testing.assert_array_equal(Preconditioner.identity(2).apply(X), X)
    np.testing.assert_array_equal(Preconditioner.jacobi(D).apply(X), np.ones((2, 1)))
    with pytest.raises(ValueError):
        Preconditioner.jacobi(SparseOperator(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 2.0]]))))


def test_parse_preconditioner():
    A = generate_poisson2d(4)
    for text in ("identity", "none", "jacobi", "ilu0", "ssor:1.2:2"):
        Preconditioner.parse(text, A)
    with pytest.raises(ValueError):
        Preconditioner.parse("amg", A)


def test_ilu0_pattern_and_apply():
    A = generate_poisson2d(5)
    L, U = ilu0_factor(A)
    dense = A.to_dense()
    LU_pattern = (np.abs(L.toarray()) + np.abs(U.toarray())) > 0
    np.testing.assert_array_equal(LU_pattern, dense != 0)
    X = generate_rhs(A.n, 2, 6)
    ref = np.linalg.solve(U.toarray(), np.linalg.solve(L.toarray(), X))
    np.testing.assert_allclose(Preconditioner.ilu0(A).apply(X), ref, rtol=1e-12, atol=1e-14)


def test_check_bsa():
    A = generate_poisson2d(5)
    a = AlgebraSpec.block(3)
    assert check_bsa(A, Preconditioner.identity(A.n), a).residual <= 1e-12
    assert check_bsa(A, Preconditioner.ssor(A, 1.3, 1), a).residual <= 1e-10
    N = SparseOperator(sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]])))
    assert check_bsa(N, Preconditioner.identity(2), AlgebraSpec.block(1)).residual > 1e-6


def test_block_grade_examples():
    A = generate_poisson2d(3)
    w, V = np.linalg.eigh(A.to_dense())
    assert block_grade_bruteforce(A, V[:, :1], AlgebraSpec.block(1), 10).nu == 1
    eye = SparseOperator(sp.identity(6, format="csr"))
    assert block_grade_bruteforce(eye, generate_rhs(6, 2, 0), AlgebraSpec.block(2), 5).nu == 1
    n = 6
    shift = SparseOperator(sp.diags([np.ones(n - 1)], [-1]).tocsr() + sp.csr_matrix(([1.0], ([0], [n - 1])), shape=(n, n)))
    e1 = np.zeros((n, 1))
    e1[0] = 1.0
    assert block_grade_bruteforce(shift, e1, AlgebraSpec.block(1), 10).nu == n


def test_block_grade_nested_rhs_monotone():
    A = generate_poisson2d(4)
    R = generate_rhs(A.n, 4, 7)
    nus = [block_grade_bruteforce(A, R[:, :s], AlgebraSpec.block(s), 20).nu for s in (1, 2, 4)]
    assert nus == sorted(nus, reverse=True)


def test_block_grade_limit():
    with pytest.raises(ValueError):
        block_grade_bruteforce(generate_poisson2d(10), generate_rhs(100, 8, 0), AlgebraSpec.block(8), 3)


def test_poisson2d_structure():
    A = generate_poisson2d(3)
    assert A.n == 9 and A.z == 33
    sums = A.to_dense().sum(axis=1)
    assert sums[4] >= 0
    ev = np.linalg.eigvalsh(generate_poisson2d(6).to_dense())
    np.testing.assert_allclose(np.sort(poisson2d_eigenvalues(6)), ev, rtol=1e-12)


def test_generate_rhs_is_deterministic_uniform():
    B = generate_rhs(500, 3, 42)
    np.testing.assert_array_equal(B, generate_rhs(500, 3, 42))
    assert np.all(np.abs(B) < 1.0)
    assert not np.array_equal(B, generate_rhs(500, 3, 43))


def test_matrixmarket_identity(tmp_path):
    p = tmp_path / "eye.mtx"
    p.write_text("%%MatrixMarket matrix coordinate real general\n3 3 3\n1 1 1\n2 2 1\n3 3 1\n")
    A = load_matrixmarket(p)
    assert A.n == 3 and A.z == 3


def test_matrixmarket_symmetric_expansion(tmp_path):
    p = tmp_path / "sym.mtx"
    p.write_text("%%MatrixMarket matrix coordinate real symmetric\n% comment\n3 3 4\n"
                 "1 1 4\n2 1 -1\n2 2 4\n3 2 -1\n")
    A = load_matrixmarket(p)
    assert A.z == 2 * 4 - 2
    np.testing.assert_array_equal(A.to_dense(), A.to_dense().T)


@pytest.mark.parametrize("body, fragment", [
    ("%%MatrixMarket matrix coordinate pattern general\n2 2 1\n1 1\n", "pattern"),
    ("%%MatrixMarket matrix coordinate complex general\n2 2 1\n1 1 1 0\n", "complex"),
    ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n3 1 1\n", ":4:"),
])
def test_matrixmarket_errors(tmp_path, body, fragment):
    p = tmp_path / "bad.mtx"
    p.write_text(body)
    with pytest.raises(MatrixMarketError) as exc:
        load_matrixmarket(p)
    assert fragment in str(exc.value)


def test_matrixmarket_round_trip(tmp_path):
    A = generate_poisson2d(6)
    A = SparseOperator(A._matrix() * 0.3)
    p = tmp_path / "rt.mtx"
    write_matrixmarket(p, A)
    B = load_matrixmarket(p)
    for x, y in zip(A.csr_arrays(), B.csr_arrays()):
        np.testing.assert_array_equal(x, y)
