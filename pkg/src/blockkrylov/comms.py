"""Deterministic simulation of a P-rank machine with nonblocking reductions.

The solvers run sequentially over global arrays while :class:`World` plays the
role of P row-partitioned ranks: every collective is assembled from per-rank
contributions combined in a fixed pairwise order, and a per-rank virtual clock
models latency ``t_red(P)`` and its overlap with registered work.

Overlap is parameterized by a factor ``f`` in ``[0, 1]``: a fraction ``f`` of
the latency progresses in the background while the caller works, the
remaining ``1 - f`` is paid inside ``wait``.  ``f = 1`` is the full-overlap
backend, ``f = 0`` the backend without asynchronous progress.

:func:`spmd_run` additionally executes explicit per-rank programs (generators
yielding futures) to exercise the SPMD discipline: ordering, deadlock and
mismatch detection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .blocklinalg import Kernels, pairwise_sum
from .salgebra import (
    AlgebraSpec,
    SElement,
    apply_right,
    finalize_products,
    normalize,
    normalize_stacked,
    partial_products,
)

__all__ = [
    "t_red_log2",
    "LATENCY_MODELS",
    "CostModel",
    "CommCounters",
    "CommError",
    "DeadlockError",
    "MismatchError",
    "FutureState",
    "FutureHandle",
    "World",
    "tsqr",
    "ReductionTreeState",
    "OverlapReport",
    "overlap_benchmark",
    "spmd_run",
]


def t_red_log2(P: int) -> float:
    """Allreduce latency in microseconds: ``2 log2(P)``."""
    return 2.0 * math.log2(P) if P > 1 else 0.0


LATENCY_MODELS: dict[str, Callable[[int], float]] = {
    "log2": t_red_log2,
    "zero": lambda P: 0.0,
}

OVERLAP_POLICIES = {"full": 1.0, "none": 0.0}


def parse_overlap(policy) -> float:
    if isinstance(policy, (int, float)):
        f = float(policy)
    else:
        text = str(policy).strip().lower()
        f = OVERLAP_POLICIES[text] if text in OVERLAP_POLICIES else float(text)
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"overlap factor must lie in [0, 1], got {f}")
    return f


@dataclass(frozen=True)
class CostModel:
    """Roofline-style time for work on one rank: ``max(flops/F, words/W)`` in µs."""

    flops_per_us: float = 1.0e4
    words_per_us: float = 1.25e3

    def time(self, flops: float, words: float) -> float:
        return max(flops / self.flops_per_us, words / self.words_per_us)


@dataclass
class CommCounters:
    reductions_started: int = 0
    reductions_waited: int = 0
    overlapped_reductions: int = 0
    messages: int = 0
    allreduces: int = 0
    tsqrs: int = 0
    tree_reduces: int = 0
    tree_backprops: int = 0
    broadcasts: int = 0
    tree_products: int = 0
    max_in_flight: int = 0

    def snapshot(self) -> "CommCounters":
        return CommCounters(**asdict(self))

    def to_dict(self) -> dict:
        return asdict(self)

    def minus(self, other: "CommCounters") -> dict:
        a, b = asdict(self), asdict(other)
        return {k: a[k] - b[k] for k in a if k != "max_in_flight"}


class CommError(RuntimeError):
    """Violation of the collective-communication discipline."""


class DeadlockError(CommError):
    pass


class MismatchError(CommError):
    pass


class FutureState(enum.Enum):
    PENDING = "pending"
    READY = "ready"
    CONSUMED = "consumed"


class FutureHandle:
    """Handle of a nonblocking collective.

    ``wait()`` advances the clocks of the participating ranks; ``get()`` may
    be called once, after the handle became ready.
    """

    def __init__(self, world: "World", payload, start: np.ndarray, latency: float,
                 label: str, epoch: int, ranks: Sequence[int] | None = None):
        self._world = world
        self._payload = payload
        self.start_time = start.copy()
        self.latency = latency
        self.completion_time = float(start.max()) + latency
        self.label = label
        self._epoch = epoch
        self._ranks = list(range(world.P)) if ranks is None else list(ranks)
        self.state = FutureState.PENDING
        self.overlapped: bool | None = None

    def wait(self) -> "FutureHandle":
        if self.state is FutureState.PENDING:
            self._world._complete(self)
        return self

    def get(self):
        if self.state is FutureState.PENDING:
            raise CommError(f"get() on pending future '{self.label}'; call wait() first")
        if self.state is FutureState.CONSUMED:
            raise CommError(f"future '{self.label}' was already consumed")
        self.state = FutureState.CONSUMED
        payload, self._payload = self._payload, None
        return payload

    def result(self):
        """``wait()`` followed by ``get()``."""
        return self.wait().get()

    def __repr__(self) -> str:
        return f"FutureHandle({self.label!r}, {self.state.value})"


def _partition(n: int, P: int) -> list[tuple[int, int]]:
    if P > n:
        raise ValueError(f"cannot partition {n} rows over {P} ranks")
    base, extra = divmod(n, P)
    out, lo = [], 0
    for r in range(P):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


class World:
    """A simulated machine of ``P`` ranks over a row partition.

    Parameters
    ----------
    P : int
        Number of ranks.
    latency : str or callable
        Latency model name (``log2`` or ``zero``) or a function ``P -> µs``.
    overlap : float or str
        Overlap factor in ``[0, 1]`` or ``full`` / ``none``.
    cost : CostModel
        Converts registered kernel work into virtual time.
    """

    def __init__(self, P: int = 1, latency="log2", overlap="full", cost: CostModel | None = None):
        if int(P) < 1:
            raise ValueError("P must be at least 1")
        self.P = int(P)
        if callable(latency):
            self.latency_name = getattr(latency, "__name__", "custom")
            self._latency = latency
        else:
            if latency not in LATENCY_MODELS:
                raise ValueError(f"unknown latency model '{latency}' (choose from {sorted(LATENCY_MODELS)})")
            self.latency_name = latency
            self._latency = LATENCY_MODELS[latency]
        self.overlap = parse_overlap(overlap)
        self.cost = cost or CostModel()
        self.clock = np.zeros(self.P)
        self.counters = CommCounters()
        self.kernels = Kernels(sink=self)
        self._epoch = 0
        self._n: int | None = None
        self._parts: list[tuple[int, int]] | None = None
        self._in_flight = 0

    # -- configuration ----------------------------------------------------
    def t_red(self) -> float:
        return float(self._latency(self.P))

    def bind(self, n: int) -> list[tuple[int, int]]:
        """Fix the row count and return the partition."""
        if self._n != n:
            self._parts = _partition(n, self.P)
            self._n = n
        return self._parts

    def partition(self, n: int) -> list[tuple[int, int]]:
        return self.bind(n)

    def describe(self) -> dict:
        return {"P": self.P, "latency": self.latency_name, "overlap": self.overlap}

    # -- work -------------------------------------------------------------
    def register_work(self, flops: int, words: int) -> None:
        t = self.cost.time(flops, words)
        if self._n is None:
            self.clock += t / self.P
        else:
            sizes = np.array([hi - lo for lo, hi in self._parts], dtype=float)
            self.clock += t * sizes / self._n
        self._epoch += 1

    def advance(self, us: float) -> None:
        """Register ``us`` microseconds of work on every rank."""
        self.clock += us
        self._epoch += 1

    @property
    def time(self) -> float:
        return float(self.clock.max())

    # -- collectives ------------------------------------------------------
    def _start(self, payload, label: str, latency: float | None = None, messages: int | None = None) -> FutureHandle:
        self.counters.reductions_started += 1
        self.counters.messages += 2 * (self.P - 1) if messages is None else messages
        self._in_flight += 1
        self.counters.max_in_flight = max(self.counters.max_in_flight, self._in_flight)
        lat = self.t_red() if latency is None else latency
        return FutureHandle(self, payload, self.clock, lat, label, self._epoch)

    def _complete(self, fut: FutureHandle) -> None:
        f = self.overlap
        hidden = fut.completion_time - fut.latency + f * fut.latency
        idx = fut._ranks
        self.clock[idx] = np.maximum(self.clock[idx], hidden) + (1.0 - f) * fut.latency
        fut.overlapped = self._epoch != fut._epoch
        if fut.overlapped:
            self.counters.overlapped_reductions += 1
        self.counters.reductions_waited += 1
        self._in_flight -= 1
        fut.state = FutureState.READY

    def iallreduce(self, contributions: Sequence, label: str = "allreduce") -> FutureHandle:
        """Sum per-rank contributions (arrays or tuples of arrays) in a fixed tree order."""
        if len(contributions) != self.P:
            raise DeadlockError(f"'{label}': {len(contributions)} of {self.P} ranks contributed")
        missing = [r for r, c in enumerate(contributions) if c is None]
        if missing:
            raise DeadlockError(f"'{label}': rank(s) {missing} never started this collective")
        first = contributions[0]
        if isinstance(first, SElement):
            keys = {c.algebra.key for c in contributions}
            if len(keys) != 1:
                raise MismatchError(f"'{label}': ranks disagree on the algebra ({sorted(keys)})")
            total = SElement(first.algebra, pairwise_sum([c.coeffs for c in contributions]), check=False)
        elif isinstance(first, tuple):
            total = tuple(pairwise_sum([np.asarray(c[i]) for c in contributions]) for i in range(len(first)))
        else:
            total = pairwise_sum([np.asarray(c) for c in contributions])
        self.counters.allreduces += 1
        return self._start(total, label)

    def idot(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]], a: AlgebraSpec,
             frobenius: Sequence[tuple[np.ndarray, np.ndarray]] = (),
             colnorms: Sequence[np.ndarray] = (), label: str = "idot") -> FutureHandle:
        """Fused nonblocking reduction.

        The payload is ``(products, frobenius, colnorms2)``: block inner
        products as algebra elements, Frobenius products as floats and squared
        column norms as arrays.
        """
        n = (pairs[0][0] if pairs else frobenius[0][0] if frobenius else colnorms[0]).shape[0]
        parts = self.bind(n)
        contribs = []
        for lo, hi in parts:
            pp = [partial_products(X[lo:hi], Y[lo:hi], a) for X, Y in pairs]
            ff = [np.array(np.sum(X[lo:hi] * Y[lo:hi])) for X, Y in frobenius]
            cc = [np.sum(X[lo:hi] * X[lo:hi], axis=0) for X in colnorms]
            contribs.append(tuple(pp + ff + cc))
        k = self.kernels
        k.charge_bdot(n, a, len(pairs))
        for _ in frobenius:
            k._charge("frob", 2 * n * a.s, 2 * n * a.s, 0)
        for X in colnorms:
            k.colnorm_cost(n, X.shape[1])
        fut = self.iallreduce(contribs, label)
        raw = fut._payload
        npair, nfro = len(pairs), len(frobenius)
        fut._payload = (
            [finalize_products(r, a) for r in raw[:npair]],
            [float(v) for v in raw[npair:npair + nfro]],
            [np.asarray(v) for v in raw[npair + nfro:]],
        )
        return fut

    def dot(self, X: np.ndarray, Y: np.ndarray, a: AlgebraSpec, label: str = "dot") -> SElement:
        """Blocking single block inner product."""
        return self.idot([(X, Y)], a, label=label).result()[0][0]

    def inormalize(self, X: np.ndarray, a: AlgebraSpec, label: str = "normalize") -> FutureHandle:
        """Nonblocking distributed normalizer; the payload is ``(Q, sigma)``."""
        Q, sigma = _tsqr_compute(self, X, a)
        self.counters.tsqrs += 1
        return self._start((Q, sigma), label, messages=3 * (self.P - 1))

    def normalize(self, X: np.ndarray, a: AlgebraSpec, label: str = "normalize") -> tuple[np.ndarray, SElement]:
        return self.inormalize(X, a, label).result()

    def colnorms(self, X: np.ndarray, label: str = "colnorms") -> np.ndarray:
        return np.sqrt(self.idot([], AlgebraSpec.parallel(X.shape[1]), colnorms=[X], label=label).result()[2][0])


# -- TSQR -----------------------------------------------------------------


@dataclass
class _Node:
    lo: int
    hi: int
    left: "_Node | None" = None
    right: "_Node | None" = None

    @property
    def leaf(self) -> bool:
        return self.left is None


def _build_tree(lo: int, hi: int) -> _Node:
    if hi - lo == 1:
        return _Node(lo, hi)
    mid = lo + (hi - lo + 1) // 2
    return _Node(lo, hi, _build_tree(lo, mid), _build_tree(mid, hi))


def _tsqr_compute(world: World, X: np.ndarray, a: AlgebraSpec) -> tuple[np.ndarray, SElement]:
    X = np.asarray(X, dtype=float)
    parts = world.bind(X.shape[0])
    for lo, hi in parts:
        rows = (hi - lo) * (a.q if a.is_global else 1)
        if rows < a.p:
            raise ValueError(f"rank block of {hi - lo} rows too small for a normalizer of width p={a.p}")
    local = [normalize(X[lo:hi], a) for lo, hi in parts]
    world.kernels.normalize_cost(X.shape[0], a)
    factors: dict[int, SElement] = {}

    def up(node: _Node) -> SElement:
        if node.leaf:
            return local[node.lo][1]
        sa, sb = up(node.left), up(node.right)
        qv, rho = normalize_stacked([sa, sb], a)
        node.qa = SElement(a, qv[0], check=False)
        node.qb = SElement(a, qv[1], check=False)
        return rho

    def down(node: _Node, F: SElement | None) -> None:
        if node.leaf:
            factors[node.lo] = F
            return
        fa = node.qa if F is None else node.qa.multiply(F)
        fb = node.qb if F is None else node.qb.multiply(F)
        down(node.left, fa)
        down(node.right, fb)

    root = _build_tree(0, world.P)
    sigma = up(root)
    down(root, None)
    Q = np.empty_like(X)
    for r, (lo, hi) in enumerate(parts):
        Qr = local[r][0]
        Q[lo:hi] = Qr if factors[r] is None else apply_right(Qr, factors[r])
    return Q, sigma


def tsqr(world: World, X: np.ndarray, a: AlgebraSpec) -> tuple[np.ndarray, SElement]:
    """Distributed S-QR ``X = Q sigma`` over a binary tree of ranks (blocking)."""
    return world.normalize(X, a, label="tsqr")


# -- localized Arnoldi tree -------------------------------------------------


def svec_dot(Z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``sum_j Z_j^T W_j`` for stacks of ``s x s`` coefficient matrices."""
    return np.einsum("jki,jkl->il", Z, W)


def svec_times(Z: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Right-multiply every entry of a coefficient stack by ``c``."""
    return np.matmul(Z, c)


def _pad(Z: np.ndarray, m: int) -> np.ndarray:
    if Z.shape[0] == m:
        return Z
    out = np.zeros((m,) + Z.shape[1:])
    out[: Z.shape[0]] = Z
    return out


class ReductionTreeState:
    """Persistent binary tree of coefficient bases for the localized Arnoldi.

    Every internal node keeps the orthonormal stacked pairs computed in
    previous iterations.  :meth:`reduce` orthonormalizes the stacked children
    vectors against them and forwards the coefficients to the parent;
    :meth:`backprop` sends the root's unit vector back down, multiplying by the
    stored bases so that each leaf learns its local combination factors.
    """

    def __init__(self, world: World, a: AlgebraSpec):
        self.world = world
        self.algebra = a
        self.root = _build_tree(0, world.P)
        self.k = -1
        self._pending_backprop = False
        for node in self._internal(self.root):
            node.basis = []

    def _internal(self, node: _Node):
        if node.leaf:
            return
        yield node
        yield from self._internal(node.left)
        yield from self._internal(node.right)

    def reduce(self, leaf_vectors: Sequence[np.ndarray]) -> np.ndarray:
        """Combine per-rank local R-factors into the global coefficient vector."""
        if self._pending_backprop:
            raise CommError("tree desynchronized: reduce called twice without back-propagation")
        if len(leaf_vectors) != self.world.P:
            raise DeadlockError(f"{len(leaf_vectors)} of {self.world.P} ranks joined the tree reduction")
        m = self.k + 2
        for r, z in enumerate(leaf_vectors):
            if z.shape[0] != m:
                raise CommError(f"tree desynchronized: rank {r} sent {z.shape[0]} coefficients, expected {m}")
        a = self.algebra

        def up(node: _Node) -> np.ndarray:
            if node.leaf:
                return np.asarray(leaf_vectors[node.lo], dtype=float)
            new = np.concatenate([up(node.left), up(node.right)])
            rho = np.zeros((m, a.s, a.s))
            for i, B in enumerate(node.basis):
                Bp = np.concatenate([_pad(B[0], m), _pad(B[1], m)])
                c = svec_dot(Bp, new)
                rho[i] = c
                new = new - svec_times(Bp, c)
                self.world.counters.tree_products += 2 * 2 * (i + 1)
            qv, r_last = normalize_stacked(new, a)
            rho[m - 1] = r_last.coeffs
            node.basis.append((qv[:m].copy(), qv[m:].copy()))
            return rho

        rho = up(self.root)
        self.k += 1
        self._pending_backprop = True
        self.world.counters.tree_reduces += 1
        self.world.counters.broadcasts += 1
        return rho

    def backprop(self) -> list[np.ndarray]:
        """Leaf factors ``g_r`` so that the new global vector is ``sum_j P_r^j g_r[j]``."""
        if not self._pending_backprop:
            raise CommError("tree desynchronized: back-propagation without a preceding reduction")
        a = self.algebra
        m = self.k + 2
        out: list[np.ndarray | None] = [None] * self.world.P

        def down(node: _Node, g: np.ndarray) -> None:
            if node.leaf:
                out[node.lo] = g
                return
            ga = np.zeros((m - 1, a.s, a.s))
            gb = np.zeros((m - 1, a.s, a.s))
            for i, (Ba, Bb) in enumerate(node.basis):
                ga += svec_times(_pad(Ba, m - 1), g[i])
                gb += svec_times(_pad(Bb, m - 1), g[i])
                self.world.counters.tree_products += 2 * (i + 1)
            down(node.left, ga)
            down(node.right, gb)

        unit = np.zeros((m - 1, a.s, a.s))
        unit[m - 2] = np.eye(a.s)
        down(self.root, unit)
        self._pending_backprop = False
        self.world.counters.tree_backprops += 1
        return out  # type: ignore[return-value]

    def ireduce_backprop(self, leaf_vectors: Sequence[np.ndarray], label: str = "localized") -> FutureHandle:
        """One reduction sweep plus one back-propagation sweep as a single handle."""
        rho = self.reduce(leaf_vectors)
        leaves = self.backprop()
        return self.world._start((rho, leaves), label, messages=3 * (self.world.P - 1))


def localized_reduce(tree: ReductionTreeState, leaf_vectors: Sequence[np.ndarray]) -> np.ndarray:
    return tree.reduce(leaf_vectors)


def localized_backprop(tree: ReductionTreeState) -> list[np.ndarray]:
    return tree.backprop()


__all__ += ["localized_reduce", "localized_backprop", "svec_dot", "svec_times", "parse_overlap"]


# -- overlap benchmark -------------------------------------------------------


@dataclass(frozen=True)
class OverlapReport:
    t_base: float
    t_work: float
    t_iter: float
    t_ovhd: float
    t_avail: float

    @property
    def available_fraction(self) -> float:
        return self.t_avail / self.t_base if self.t_base > 0 else 0.0


def overlap_benchmark(P: int, latency="log2", overlap="full", max_rows: int = 32) -> list[OverlapReport]:
    """Doubling protocol on the virtual clock.

    Measures ``t_base`` for a bare reduction, then overlaps it with work of
    ``t_base/4, t_base/2, ...`` until an iteration takes more than
    ``2 t_base``.
    """

    def one(work: float) -> float:
        w = World(P, latency=latency, overlap=overlap)
        t0 = w.time
        fut = w.iallreduce([np.zeros(1)] * w.P, label="bench")
        if work > 0:
            w.advance(work)
        fut.wait()
        return w.time - t0

    t_base = one(0.0)
    rows: list[OverlapReport] = []
    if t_base <= 0:
        return rows
    t_work = t_base / 4
    for _ in range(max_rows):
        t_iter = one(t_work)
        t_ovhd = t_iter - t_work
        rows.append(OverlapReport(t_base, t_work, t_iter, t_ovhd, t_base - t_ovhd))
        if t_iter > 2 * t_base:
            break
        t_work *= 2
    return rows


# -- explicit SPMD execution -------------------------------------------------


class _RankFuture:
    def __init__(self, slot: "_Slot", rank: int):
        self.slot = slot
        self.rank = rank
        self.state = FutureState.PENDING

    def get(self):
        if self.state is FutureState.PENDING:
            raise CommError("get() on pending future; yield it first")
        if self.state is FutureState.CONSUMED:
            raise CommError("future already consumed")
        self.state = FutureState.CONSUMED
        return self.slot.result


@dataclass
class _Slot:
    seq: int
    kind: str
    contributions: dict = field(default_factory=dict)
    starts: dict = field(default_factory=dict)
    result: object = None
    completion: float | None = None


class RankComm:
    """Per-rank handle given to programs run by :func:`spmd_run`."""

    def __init__(self, runner: "_Runner", rank: int):
        self._runner = runner
        self.rank = rank
        self.size = runner.world.P
        self.clock = 0.0
        self._seq = 0

    def work(self, us: float) -> None:
        self.clock += us
        self._runner.epochs[self.rank] += 1

    def iallreduce(self, value, kind: str = "sum") -> _RankFuture:
        slot = self._runner.slot(self._seq, kind, self.rank)
        self._seq += 1
        slot.contributions[self.rank] = value
        slot.starts[self.rank] = (self.clock, self._runner.epochs[self.rank])
        self._runner.try_complete(slot)
        return _RankFuture(slot, self.rank)


class _Runner:
    def __init__(self, world: World):
        self.world = world
        self.slots: dict[int, _Slot] = {}
        self.epochs = [0] * world.P

    def slot(self, seq: int, kind: str, rank: int) -> _Slot:
        s = self.slots.get(seq)
        if s is None:
            s = self.slots[seq] = _Slot(seq, kind)
        elif s.kind != kind:
            raise MismatchError(f"collective #{seq}: rank {rank} called '{kind}', others '{s.kind}'")
        return s

    def try_complete(self, slot: _Slot) -> None:
        if len(slot.contributions) < self.world.P:
            return
        vals = [slot.contributions[r] for r in range(self.world.P)]
        if isinstance(vals[0], SElement):
            keys = {v.algebra.key for v in vals}
            if len(keys) != 1:
                raise MismatchError(f"collective #{slot.seq}: ranks disagree on the algebra ({sorted(keys)})")
            slot.result = SElement(vals[0].algebra, pairwise_sum([v.coeffs for v in vals]), check=False)
        else:
            slot.result = pairwise_sum([np.asarray(v, dtype=float) for v in vals])
        slot.completion = max(t for t, _ in slot.starts.values()) + self.world.t_red()
        self.world.counters.reductions_started += 1
        self.world.counters.allreduces += 1
        self.world.counters.messages += 2 * (self.world.P - 1)


def spmd_run(world: World, program: Callable[[RankComm], Iterable], order: str | Sequence[int] = "forward") -> list:
    """Run ``program(comm)`` on every rank with cooperative scheduling.

    ``program`` is a generator function; yielding a future blocks the rank
    until the collective has been started by every rank.  ``order`` is the
    scheduling order (``forward``, ``reverse`` or an explicit permutation);
    results and clocks do not depend on it.  Returns the per-rank return
    values and leaves the final per-rank clocks in ``world.clock``.
    """
    runner = _Runner(world)
    comms = [RankComm(runner, r) for r in range(world.P)]
    if order == "forward":
        ranks = list(range(world.P))
    elif order == "reverse":
        ranks = list(reversed(range(world.P)))
    else:
        ranks = list(order)
        if sorted(ranks) != list(range(world.P)):
            raise ValueError("order must be a permutation of the ranks")
    gens = {r: program(comms[r]) for r in ranks}
    waiting: dict[int, _RankFuture | None] = {r: None for r in ranks}
    results: dict[int, object] = {}
    f = world.overlap
    while gens:
        progressed = False
        for r in ranks:
            if r not in gens:
                continue
            fut = waiting[r]
            if fut is not None:
                if fut.slot.completion is None:
                    continue
                start, epoch = fut.slot.starts[r]
                c = comms[r]
                lat = world.t_red()
                c.clock = max(c.clock, fut.slot.completion - lat + f * lat) + (1.0 - f) * lat
                world.counters.reductions_waited += 1
                if runner.epochs[r] != epoch:
                    world.counters.overlapped_reductions += 1
                fut.state = FutureState.READY
                waiting[r] = None
            try:
                nxt = next(gens[r])
            except StopIteration as stop:
                results[r] = stop.value
                del gens[r]
                progressed = True
                continue
            if not isinstance(nxt, _RankFuture):
                raise CommError(f"rank {r} yielded {type(nxt).__name__}; programs must yield futures")
            waiting[r] = nxt
            progressed = True
        if not progressed:
            blocked = {r: waiting[r].slot for r in gens}
            detail = []
            for r, slot in sorted(blocked.items()):
                absent = [x for x in range(world.P) if x not in slot.contributions]
                detail.append(f"rank {r} waits on collective #{slot.seq} never started by rank(s) {absent}")
            raise DeadlockError("; ".join(detail))
    for r in range(world.P):
        world.clock[r] = comms[r].clock
    return [results[r] for r in range(world.P)]


__all__ += ["RankComm"]
