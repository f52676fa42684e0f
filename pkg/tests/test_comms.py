import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockkrylov.comms import (
    CommError,
    DeadlockError,
    MismatchError,
    ReductionTreeState,
    World,
    overlap_benchmark,
    spmd_run,
    t_red_log2,
    tsqr,
)
from blockkrylov.salgebra import AlgebraSpec, SElement, block_inner_product, householder_qr, normalize


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


def test_latency_model():
    assert t_red_log2(1) == 0.0
    assert t_red_log2(16) == 8.0
    assert round(t_red_log2(380000)) == 37


def test_single_rank_is_free_and_exact():
    w = World(1)
    a = AlgebraSpec.block(3)
    X, Y = rng_for(0).standard_normal((2, 20, 3))
    t0 = w.time
    val = w.dot(X, Y, a)
    assert w.time - t0 == pytest.approx(w.cost.time(2 * 20 * 9, 2 * 20 * 3))
    np.testing.assert_array_equal(val.coeffs, block_inner_product(X, Y, a).coeffs)


def test_blocking_reduction_costs_latency():
    w = World(16)
    fut = w.iallreduce([np.ones(1)] * 16)
    t0 = w.time
    assert fut.wait().get()[0] == 16.0
    assert w.time - t0 == pytest.approx(8.0)
    assert fut.overlapped is False


def test_overlapped_reduction_flag_and_hidden_latency():
    w = World(16)
    fut = w.iallreduce([np.ones(1)] * 16)
    w.advance(5.0)
    fut.wait()
    assert fut.overlapped is True
    assert w.time == pytest.approx(8.0)
    assert w.counters.overlapped_reductions == 1


def test_future_consumed_once():
    w = World(2)
    fut = w.iallreduce([np.ones(1)] * 2)
    with pytest.raises(CommError):
        fut.get()
    fut.wait().get()
    with pytest.raises(CommError):
        fut.get()


def test_collective_discipline_errors():
    w = World(4)
    with pytest.raises(DeadlockError):
        w.iallreduce([np.ones(1)] * 3)
    with pytest.raises(DeadlockError):
        w.iallreduce([np.ones(1), None, np.ones(1), np.ones(1)])
    a, b = AlgebraSpec.block(2), AlgebraSpec.parallel(2)
    with pytest.raises(MismatchError):
        w.iallreduce([a.identity(), b.identity(), a.identity(), a.identity()])


def test_idot_matches_concatenated_value():
    X, Y = rng_for(1).standard_normal((2, 301, 4))
    a = AlgebraSpec.block_parallel(4, 2)
    ref = World(1).dot(X, Y, a).coeffs
    for P in (2, 3, 8):
        np.testing.assert_allclose(World(P).dot(X, Y, a).coeffs, ref, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("P", [1, 2, 4, 8])
@pytest.mark.parametrize("label", ["b", "bp:4", "bg:2", "p"])
@pytest.mark.parametrize("deficient", [False, True])
def test_tsqr(P, label, deficient):
    X = rng_for(P).standard_normal((256, 8))
    if deficient:
        X[:, 5] = X[:, 1]
        X[:, 7] = 0.0
    a = AlgebraSpec.parse(label, 8)
    Q, sig = tsqr(World(P), X, a)
    assert np.linalg.norm(block_inner_product(Q, Q, a).coeffs - np.eye(8)) <= 1e-12
    assert np.linalg.norm(X - Q @ sig.coeffs) <= 1e-12 * np.linalg.norm(X)
    Q1, sig1 = normalize(X, a)
    np.testing.assert_allclose(sig.coeffs, sig1.coeffs, atol=1e-12 * np.linalg.norm(X))
    if P == 1:
        np.testing.assert_array_equal(sig.coeffs, sig1.coeffs)


def test_tsqr_rank_deficient_singular_sigma():
    c = rng_for(2).standard_normal(64)
    X = np.stack([c, c, 2 * c, c], axis=1)
    Q, sig = tsqr(World(4), X, AlgebraSpec.block(4))
    assert np.linalg.norm(Q.T @ Q - np.eye(4)) <= 1e-12
    assert np.min(np.abs(np.diag(sig.coeffs))) < 1e-12


def test_tree_first_step_is_tsqr():
    P, s = 2, 3
    a = AlgebraSpec.block(s)
    X = rng_for(3).standard_normal((40, s))
    w = World(P)
    parts = w.bind(40)
    tree = ReductionTreeState(w, a)
    locals_ = [normalize(X[lo:hi], a) for lo, hi in parts]
    rho, leaves = tree.ireduce_backprop([sig.coeffs[None] for _, sig in locals_]).result()
    Q = np.concatenate([Ql @ g[0] for (Ql, _), g in zip(locals_, leaves)])
    Qt, sig_t = tsqr(World(P), X, a)
    np.testing.assert_allclose(rho[0], sig_t.coeffs, atol=1e-13)
    np.testing.assert_allclose(Q, Qt, atol=1e-13)


def test_tree_desynchronization_detected():
    w = World(2)
    tree = ReductionTreeState(w, AlgebraSpec.block(2))
    with pytest.raises(CommError):
        tree.backprop()
    tree.reduce([np.eye(2)[None]] * 2)
    with pytest.raises(CommError):
        tree.reduce([np.zeros((2, 2, 2))] * 2)


def test_overlap_benchmark_policies():
    full = overlap_benchmark(16, overlap="full")
    half = next(r for r in full if r.t_work == full[0].t_base / 2)
    assert half.t_iter == half.t_base and half.t_avail == half.t_work
    whole = next(r for r in full if r.t_work == full[0].t_base)
    assert whole.t_iter == whole.t_base and whole.t_avail == whole.t_base
    for r in overlap_benchmark(16, overlap="none"):
        assert r.t_iter == r.t_base + r.t_work and r.t_avail == 0.0
    rows = overlap_benchmark(16, overlap=0.99)
    assert any(math.isclose(r.available_fraction, 0.99) for r in rows)
    for policy in ("full", "none", 0.5, 0.99):
        for r in overlap_benchmark(16, overlap=policy):
            assert r.t_ovhd == r.t_iter - r.t_work
            assert r.t_avail == r.t_base - r.t_ovhd


def _program(comm):
    x = np.array([float(comm.rank + 1)])
    fut = comm.iallreduce(x)
    comm.work(1.0 + comm.rank)
    yield fut
    total = fut.get()
    fut2 = comm.iallreduce(total * 2)
    yield fut2
    return float(fut2.get()[0]), comm.clock


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(8)))
def test_spmd_scheduling_order_is_irrelevant(order):
    ref = spmd_run(World(8), _program)
    w = World(8)
    got = spmd_run(w, _program, order=list(order))
    assert got == ref
    assert all(r[0] == 576.0 for r in got)


def test_spmd_deadlock_and_mismatch():
    def lonely(comm):
        if comm.rank == 0:
            fut = comm.iallreduce(np.ones(1))
            yield fut
        return None

    with pytest.raises(DeadlockError, match="never started"):
        spmd_run(World(2), lonely)

    def mixed(comm):
        fut = comm.iallreduce(np.ones(1), kind="sum" if comm.rank == 0 else "max")
        yield fut

    with pytest.raises(MismatchError):
        spmd_run(World(2), mixed)


def test_clock_never_moves_backwards():
    w = World(8)
    last = w.clock.copy()
    for step in range(20):
        fut = w.iallreduce([np.ones(1)] * 8)
        if step % 2:
            w.advance(0.5 * step)
        fut.wait()
        assert np.all(w.clock >= last)
        last = w.clock.copy()


def test_selement_allreduce_sums():
    a = AlgebraSpec.block(2)
    parts = [SElement(a, np.full((2, 2), float(r))) for r in range(4)]
    total = World(4).iallreduce(parts).result()
    np.testing.assert_array_equal(total.coeffs, np.full((2, 2), 6.0))


def test_householder_matches_tsqr_sign():
    X = rng_for(9).standard_normal((64, 4))
    _, R = householder_qr(X)
    _, sig = tsqr(World(4), X, AlgebraSpec.block(4))
    np.testing.assert_allclose(sig.coeffs, R, atol=1e-12)
