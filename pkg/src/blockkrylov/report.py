"""Per-iteration solver records and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .comms import World

__all__ = [
    "CSV_VERSION",
    "CSV_COLUMNS",
    "BreakdownError",
    "StagnationError",
    "IterationRecord",
    "SolverReport",
    "Tracker",
    "residual_measure",
]

CSV_VERSION = "blockkrylov-report/1"
CSV_COLUMNS = (
    "iteration",
    "frobenius",
    "max_column",
    "reortho",
    "virtual_time_us",
    "syncs",
    "overlapped",
    "vector_updates",
    "messages",
    "flops",
)


class BreakdownError(ArithmeticError):
    """A solver hit a singular or non-finite coefficient."""

    def __init__(self, iteration: int, msg: str, report: "SolverReport | None" = None):
        self.iteration = iteration
        self.report = report
        super().__init__(f"breakdown at iteration {iteration}: {msg}")


class StagnationError(BreakdownError):
    pass


@dataclass
class IterationRecord:
    iteration: int
    column_norms: np.ndarray
    frobenius: float
    reortho: bool = False
    virtual_time: float = 0.0
    syncs: int = 0
    overlapped: int = 0
    vector_updates: int = 0
    messages: int = 0
    flops: int = 0
    events: list[str] = field(default_factory=list)

    @property
    def max_column(self) -> float:
        return float(np.max(self.column_norms)) if len(self.column_norms) else 0.0


@dataclass
class SolverReport:
    solver: str
    variant: str
    algebra: str
    s: int
    n: int
    world: dict
    params: dict = field(default_factory=dict)
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    status: str = "running"
    reortho_count: int = 0
    allocations: int = 0
    wall_time: float = 0.0
    kernel_counters: dict = field(default_factory=dict)
    comm_counters: dict = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def virtual_time(self) -> float:
        return self.records[-1].virtual_time if self.records else 0.0

    def frobenius_history(self) -> np.ndarray:
        return np.array([r.frobenius for r in self.records])

    def max_column_history(self) -> np.ndarray:
        return np.array([r.max_column for r in self.records])

    def convergence_rate(self) -> float:
        """Average per-iteration reduction factor of the Frobenius residual."""
        if self.iterations == 0 or self.records[0].frobenius == 0:
            return 0.0
        ratio = self.records[-1].frobenius / self.records[0].frobenius
        if ratio <= 0 or not math.isfinite(ratio):
            return 0.0
        return ratio ** (1.0 / self.iterations)

    def per_iteration(self, name: str) -> list[int]:
        return [getattr(r, name) for r in self.records[1:]]

    # -- serialization ----------------------------------------------------
    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CSV_VERSION} solver={self.solver} variant={self.variant} "
                  f"algebra={self.algebra} s={self.s} n={self.n}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + [f"r{i}" for i in range(self.s)] + ["rate"])
        rate = self.convergence_rate()
        for rec in self.records:
            row = [
                rec.iteration,
                repr(float(rec.frobenius)),
                repr(rec.max_column),
                int(rec.reortho),
                repr(float(rec.virtual_time)),
                rec.syncs,
                rec.overlapped,
                rec.vector_updates,
                rec.messages,
                rec.flops,
            ]
            row += [repr(float(v)) for v in rec.column_norms]
            row.append(repr(rate))
            w.writerow(row)
        return buf.getvalue()

    def summary(self, include_wall: bool = True) -> dict[str, Any]:
        out = {
            "solver": self.solver,
            "variant": self.variant,
            "algebra": self.algebra,
            "s": self.s,
            "n": self.n,
            "world": self.world,
            "params": self.params,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "reortho_count": self.reortho_count,
            "convergence_rate": self.convergence_rate(),
            "allocations": self.allocations,
            "virtual_time_us": self.virtual_time,
            "final_frobenius": self.records[-1].frobenius if self.records else None,
            "kernel_counters": self.kernel_counters,
            "comm_counters": self.comm_counters,
            "events": self.events,
        }
        if include_wall:
            out["wall_time_s"] = self.wall_time
        return out

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return csv_path, json_path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def residual_measure(colnorms: np.ndarray, ref: np.ndarray, kind: str) -> float:
    """Relative residual used for the stopping test.

    ``max-column`` takes the worst column relative to its initial norm,
    ``frobenius`` compares Frobenius norms.
    """
    colnorms = np.asarray(colnorms, dtype=float)
    if kind == "frobenius":
        r0 = float(np.sqrt(np.sum(ref * ref)))
        return float(np.sqrt(np.sum(colnorms * colnorms))) / r0 if r0 > 0 else 0.0
    if kind == "max-column":
        ratios = np.divide(colnorms, ref, out=np.zeros_like(colnorms), where=ref > 0)
        return float(np.max(ratios)) if ratios.size else 0.0
    raise ValueError(f"unknown norm kind '{kind}' (frobenius, max-column)")


class Tracker:
    """Collects counter deltas per iteration into :class:`IterationRecord` s."""

    def __init__(self, world: World, report: SolverReport):
        self.world = world
        self.report = report
        self._comm = world.counters.snapshot()
        self._kern = world.kernels.counters.snapshot()

    def record(self, iteration: int, colnorms, reortho: bool = False, events=()) -> IterationRecord:
        comm = self.world.counters
        kern = self.world.kernels.counters
        rec = IterationRecord(
            iteration=iteration,
            column_norms=np.asarray(colnorms, dtype=float).copy(),
            frobenius=float(np.sqrt(np.sum(np.square(colnorms)))),
            reortho=reortho,
            virtual_time=self.world.time,
            syncs=comm.reductions_waited - self._comm.reductions_waited,
            overlapped=comm.overlapped_reductions - self._comm.overlapped_reductions,
            vector_updates=kern.calls.get("baxpy", 0) - self._kern.calls.get("baxpy", 0),
            messages=comm.messages - self._comm.messages,
            flops=kern.flops,
            events=list(events),
        )
        self.report.records.append(rec)
        if reortho:
            self.report.reortho_count += 1
        self._comm = comm.snapshot()
        self._kern = kern.snapshot()
        return rec

    def absorb(self) -> None:
        """Charge counters accrued since the last record to that record."""
        comm = self.world.counters
        kern = self.world.kernels.counters
        rec = self.report.records[-1]
        rec.syncs += comm.reductions_waited - self._comm.reductions_waited
        rec.overlapped += comm.overlapped_reductions - self._comm.overlapped_reductions
        rec.vector_updates += kern.calls.get("baxpy", 0) - self._kern.calls.get("baxpy", 0)
        rec.messages += comm.messages - self._comm.messages
        rec.virtual_time = self.world.time
        rec.flops = kern.flops
        self._comm = comm.snapshot()
        self._kern = kern.snapshot()

    def finish(self, converged: bool, status: str) -> None:
        self.report.converged = converged
        self.report.status = status
        self.report.kernel_counters = self.world.kernels.counters.to_dict()
        self.report.comm_counters = self.world.counters.to_dict()
