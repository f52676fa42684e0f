import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from blockkrylov.bicgstab import BICGSTAB_VARIANTS, BicgstabConfig, bbicgstab_solve, project_gram
from blockkrylov.blocklinalg import Preconditioner, SparseOperator, generate_rhs
from blockkrylov.comms import World
from blockkrylov.report import BreakdownError
from blockkrylov.salgebra import AlgebraSpec, block_inner_product
from blockkrylov.testproblems import convdiff2d

LABELS = ("p", "g", "b", "bp:2", "bg:2")


@pytest.mark.parametrize("variant", BICGSTAB_VARIANTS)
def test_identity_one_iteration(variant):
    A = SparseOperator(sp.identity(9, format="csr"))
    B = generate_rhs(9, 3, 0)
    X, rep = bbicgstab_solve(A, B, cfg=BicgstabConfig(variant=variant))
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(X, B, atol=1e-14)


@pytest.mark.parametrize("variant", BICGSTAB_VARIANTS)
def test_small_convection_diffusion(variant):
    A = SparseOperator(sp.csr_matrix(np.array([[2.0, -0.5, 0.0], [-1.5, 2.0, -0.5], [0.0, -1.5, 2.0]])))
    b = np.array([[1.0], [0.0], [-1.0]])
    X, rep = bbicgstab_solve(A, b, cfg=BicgstabConfig(variant=variant, eps_tol=1e-13))
    assert rep.iterations <= 6
    np.testing.assert_allclose(X, np.linalg.solve(A.to_dense(), b), atol=1e-10)


@pytest.mark.parametrize("variant", BICGSTAB_VARIANTS)
@pytest.mark.parametrize("label", LABELS)
@pytest.mark.parametrize("precond", ["identity", "jacobi", "ilu0"])
def test_converges(variant, label, precond):
    N = convdiff2d(12, 30.0)
    B = generate_rhs(N.n, 4, 1)
    X, rep = bbicgstab_solve(N, B, M=Preconditioner.parse(precond, N), algebra=AlgebraSpec.parse(label, 4),
                             cfg=BicgstabConfig(variant=variant), world=World(4))
    assert rep.converged
    res = np.linalg.norm(B - N.apply(X), axis=0) / np.linalg.norm(B, axis=0)
    assert res.max() < 1e-7


@pytest.mark.parametrize("eta", [0.0, 100.0])
def test_pipelined_matches_adaptive_single_rank(eta):
    N = convdiff2d(15, 40.0)
    B = generate_rhs(N.n, 4, 2)
    M = Preconditioner.ilu0(N)
    hist = {}
    for v in BICGSTAB_VARIANTS:
        _, rep = bbicgstab_solve(N, B, M=M, cfg=BicgstabConfig(variant=v, eta=eta, eps_tol=1e-8), world=World(1))
        hist[v] = rep.max_column_history()
    k = min(len(h) for h in hist.values())
    np.testing.assert_allclose(hist["pipelined"][:k], hist["adaptive"][:k], rtol=1e-8)


def test_pipelined_overlaps_and_is_faster():
    N = convdiff2d(20, 40.0)
    B = generate_rhs(N.n, 4, 3)
    reps = {}
    for v in BICGSTAB_VARIANTS:
        _, reps[v] = bbicgstab_solve(N, B, M=Preconditioner.ilu0(N), cfg=BicgstabConfig(variant=v),
                                     world=World(16))
    pipe, adapt = reps["pipelined"], reps["adaptive"]
    assert all(r.overlapped == r.syncs and r.syncs > 0 for r in pipe.records[1:])
    assert pipe.virtual_time / pipe.iterations < adapt.virtual_time / adapt.iterations


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(LABELS))
def test_omega_minimizes_intermediate_residual(seed, label):
    N = convdiff2d(8, 20.0)
    B = generate_rhs(N.n, 4, seed)
    seen = []

    def cb(k, state):
        if k == 0:
            return
        S, U, w = state["S"], state["U"], state["omega"]
        base = np.linalg.norm(S - w * U)
        for d in (1e-3, -1e-3):
            assert base <= np.linalg.norm(S - (w + d) * U) + 1e-14
        assert abs(np.sum(U * (S - w * U))) <= 1e-10 * np.linalg.norm(U) * np.linalg.norm(S)
        seen.append(k)

    bbicgstab_solve(N, B, algebra=AlgebraSpec.parse(label, 4), callback=cb)
    assert seen


def test_shadow_breakdown_reported_with_iteration():
    N = convdiff2d(6, 10.0)
    b = generate_rhs(N.n, 1, 4)
    with pytest.raises(BreakdownError) as exc:
        bbicgstab_solve(N, np.hstack([b, b]), cfg=BicgstabConfig(eta=0.0))
    assert exc.value.iteration == 0
    assert exc.value.report.status == "breakdown"


def test_duplicate_columns_converge_with_reortho():
    N = convdiff2d(6, 10.0)
    b = generate_rhs(N.n, 1, 4)
    X, rep = bbicgstab_solve(N, np.hstack([b, b]), cfg=BicgstabConfig(eta=100.0))
    assert rep.converged
    np.testing.assert_allclose(X[:, 0], X[:, 1], atol=1e-8)


def test_random_shadow():
    N = convdiff2d(10, 20.0)
    B = generate_rhs(N.n, 2, 5)
    _, rep = bbicgstab_solve(N, B, cfg=BicgstabConfig(shadow="random", shadow_seed=9))
    assert rep.converged


def test_config_validation():
    with pytest.raises(ValueError):
        BicgstabConfig(variant="fast")
    with pytest.raises(ValueError):
        BicgstabConfig(eta=-1.0)
    with pytest.raises(ValueError):
        BicgstabConfig(shadow="mirror")


@pytest.mark.parametrize("label", LABELS)
def test_project_gram_matches_block_product(label):
    a = AlgebraSpec.parse(label, 4)
    X, Y = np.random.Generator(np.random.Philox(6)).standard_normal((2, 30, 4))
    proj = project_gram(X.T @ Y, a)
    np.testing.assert_allclose(proj.coeffs, block_inner_product(X, Y, a).coeffs, atol=1e-13)
