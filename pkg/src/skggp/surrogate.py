"""One-nearest-neighbour fitness surrogate over PC vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backend import get_backend


def manhattan(a, b) -> int:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"PC length mismatch: {a.shape} vs {b.shape}")
    return int(np.abs(a - b).sum())


@dataclass(frozen=True, eq=False)
class SurrogateDatabase:
    pcs: np.ndarray  # (entries, length) int32
    fitness: np.ndarray  # (entries,) float64
    generation_index: int = 0

    def __post_init__(self) -> None:
        if self.pcs.ndim != 2 or self.pcs.shape[0] != self.fitness.shape[0]:
            raise ValueError("pcs must be (entries, length) aligned with fitness")
        self.pcs.setflags(write=False)
        self.fitness.setflags(write=False)

    def __len__(self) -> int:
        return self.pcs.shape[0]

    @classmethod
    def from_population(cls, population) -> "SurrogateDatabase":
        """Database of the given population only; every member needs a PC and a fitness."""
        members = population.members
        if not members:
            raise ValueError("cannot build a surrogate from an empty population")
        if any(m.pc is None or m.fitness is None for m in members):
            raise ValueError("every member needs both a PC vector and a fitness")
        pcs = np.ascontiguousarray(np.vstack([m.pc for m in members]), dtype=np.int32)
        fit = np.array([m.fitness for m in members], dtype=np.float64)
        return cls(pcs, fit, population.generation_index)

    @classmethod
    def from_arrays(cls, pcs, fitness, generation_index: int = 0) -> "SurrogateDatabase":
        pcs = np.ascontiguousarray(np.atleast_2d(np.asarray(pcs)), dtype=np.int32)
        return cls(pcs, np.array(fitness, dtype=np.float64), generation_index)

    def nearest(self, queries, backend=None) -> tuple[np.ndarray, np.ndarray]:
        """Index and distance of the nearest entry per query (lowest index on ties)."""
        if len(self) == 0:
            raise ValueError("surrogate database is empty")
        q = np.ascontiguousarray(np.atleast_2d(np.asarray(queries)), dtype=np.int32)
        if q.shape[1] != self.pcs.shape[1]:
            raise ValueError(f"PC length mismatch: {q.shape[1]} vs {self.pcs.shape[1]}")
        be = backend or get_backend()
        return be.nearest(self.pcs, q)

    def estimate(self, pc, backend=None) -> float:
        idx, _ = self.nearest(pc, backend)
        return float(self.fitness[idx[0]])

    def estimate_many(self, pcs, backend=None) -> np.ndarray:
        idx, _ = self.nearest(pcs, backend)
        return self.fitness[idx]

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "fitness"] + [f"pc_{j}" for j in range(self.pcs.shape[1])])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.fitness[i]))] + self.pcs[i].tolist())


def estimate(db: SurrogateDatabase, pc, backend=None) -> float:
    return db.estimate(pc, backend)


def selection_order(estimates: Sequence[float]) -> list[int]:
    """Indices by ascending estimate; generation order breaks ties."""
    est = np.asarray(estimates, dtype=np.float64)
    return np.argsort(est, kind="stable").tolist()


def preselect(db: SurrogateDatabase, offspring: Sequence, target: int, backend=None) -> list:
    """The ``target`` offspring with the smallest estimated fitness, in ranked order.

    ``offspring`` holds ``(individual, pc)`` pairs already deduplicated by PC.
    """
    if target < 1:
        raise ValueError("target must be positive")
    if len(offspring) <= target:
        return [ind for ind, _ in offspring]
    est = db.estimate_many(np.vstack([pc for _, pc in offspring]), backend)
    return [offspring[i][0] for i in selection_order(est)[:target]]


def _top(values: Sequence[float], cutoff: int) -> set[int]:
    return set(selection_order(values)[:cutoff])


def precision_at(estimated: Sequence[float], truth: Sequence[float], cutoff: int) -> float:
    """Share of the estimated top-``cutoff`` that is also in the true top-``cutoff``."""
    if len(estimated) != len(truth):
        raise ValueError("estimates and truths must be aligned")
    if cutoff < 1 or len(truth) < cutoff:
        raise ValueError("need at least `cutoff` offspring")
    return len(_top(estimated, cutoff) & _top(truth, cutoff)) / cutoff
