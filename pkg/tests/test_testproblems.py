import numpy as np

from blockkrylov.testproblems import convdiff2d, diag_operator, graded_columns, lowrank_rhs, powergrid


def test_powergrid_is_spd_and_deterministic():
    A = powergrid(200, extra_edges=50)
    D = A.to_dense()
    np.testing.assert_array_equal(D, D.T)
    assert np.linalg.eigvalsh(D)[0] > 0
    np.testing.assert_array_equal(D, powergrid(200, extra_edges=50).to_dense())


def test_convdiff_is_nonsymmetric_and_nonsingular():
    D = convdiff2d(8, 20.0).to_dense()
    assert D.shape == (64, 64)
    assert np.linalg.norm(D - D.T) > 0
    assert np.linalg.matrix_rank(D) == 64


def test_diag_operator():
    np.testing.assert_array_equal(diag_operator([1.0, 2.0]).to_dense(), np.diag([1.0, 2.0]))


def test_lowrank_rhs_numerical_rank():
    B = lowrank_rhs(300, 16, 4, 1e-8, seed=1)
    sv = np.linalg.svd(B, compute_uv=False)
    assert sv[4] < 1e-6 * sv[0]
    assert sv[3] > 1e-3 * sv[0]


def test_graded_columns_shapes():
    blocks = graded_columns(100, 3, 2)
    assert len(blocks) == 3 and all(b.shape == (100, 2) for b in blocks)
