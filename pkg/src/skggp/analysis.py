"""Convergence curves, budget saved, extra-offspring gain, Wilcoxon test and timing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .surrogate import selection_order


@dataclass(frozen=True)
class ConvergenceCurve:
    """Step curve of best-so-far test fitness against cumulative full evaluations."""

    points: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        evals = [e for e, _ in self.points]
        if not evals:
            raise ValueError("a curve needs at least one point")
        if any(b <= a for a, b in zip(evals, evals[1:])):
            raise ValueError("evaluation counts must be strictly increasing")

    @classmethod
    def from_log(cls, rows: Iterable[Mapping]) -> "ConvergenceCurve":
        pts, best = [], math.inf
        for row in rows:
            best = min(best, float(row["best_test_fitness"]))
            pts.append((int(row["full_evals_cumulative"]), best))
        return cls(tuple(pts))

    @property
    def final(self) -> float:
        return self.points[-1][1]

    @property
    def evaluations(self) -> int:
        return self.points[-1][0]

    def value_at(self, at: int) -> float:
        """Best fitness known after ``at`` evaluations (step interpolation)."""
        if at < self.points[0][0]:
            raise ValueError(f"curve starts at {self.points[0][0]} evaluations, after {at}")
        value = self.points[0][1]
        for e, f in self.points:
            if e > at:
                break
            value = f
        return value

    def first_reaching(self, quality: float) -> Optional[int]:
        for e, f in self.points:
            if f <= quality:
                return e
        return None


def budget_saved_ratio(baseline: ConvergenceCurve, other: ConvergenceCurve,
                       at: int) -> Optional[float]:
    """``(e_base - e*) / at``: evaluations saved reaching the baseline's quality at ``at``.

    ``e_base`` is where the baseline itself first reached the quality it has
    after ``at`` evaluations and ``e*`` is where ``other`` first reaches it.
    Measuring from ``e_base`` rather than ``at`` keeps a curve compared with
    itself at exactly zero even between improvements. Negative when ``other``
    lags; ``None`` when it never gets there.
    """
    if at <= 0:
        raise ValueError("`at` must be positive")
    quality = baseline.value_at(at)
    e_base = baseline.first_reaching(quality)
    e_star = other.first_reaching(quality)
    if e_star is None:
        return None
    return (e_base - e_star) / at


def extra_offspring_gain(base: Sequence[tuple[float, float]],
                         extra: Sequence[tuple[float, float]],
                         cutoff: int) -> tuple[int, int]:
    """Classify extra offspring that the estimate ranks within ``cutoff``.

    ``base`` and ``extra`` hold ``(estimate, truth)`` pairs; ranks are taken
    over the combined pool in order base then extra. Returns
    ``(correctly_added, incorrectly_added)``.
    """
    pool = list(base) + list(extra)
    if not pool:
        return (0, 0)
    est_top = set(selection_order([e for e, _ in pool])[:cutoff])
    true_top = set(selection_order([t for _, t in pool])[:cutoff])
    picked = [i for i in range(len(base), len(pool)) if i in est_top]
    correct = sum(1 for i in picked if i in true_top)
    return (correct, len(picked) - correct)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    w_plus: float
    w_minus: float
    n: int
    z: float
    p_value: float
    flag: str  # better | worse | indistinguishable, for the first sample

    @property
    def mark(self) -> str:
        return {"better": "+", "worse": "-"}.get(self.flag, "=")


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         alpha: float = 0.05) -> WilcoxonResult:
    """Two-sided paired signed-rank test, normal approximation with tie correction.

    Zero differences are dropped. Lower values are better, so ``better``
    means ``a`` is significantly lower than ``b``.
    """
    if len(a) != len(b):
        raise ValueError("samples must be paired")
    if len(a) < 6:
        raise ValueError("need at least 6 pairs")
    diffs = [x - y for x, y in zip(a, b) if x != y]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 0, 0.0, 1.0, "indistinguishable")
    ranks = _average_ranks([abs(d) for d in diffs])
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)
    w_minus = sum(r for r, d in zip(ranks, diffs) if d < 0)
    stat = min(w_plus, w_minus)
    _, counts = np.unique([abs(d) for d in diffs], return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(counts ** 3 - counts)) / 48
    if var <= 0:
        z, p = 0.0, 1.0
    else:
        z = (stat - n * (n + 1) / 4) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2)))
    if p < alpha:
        flag = "better" if w_minus > w_plus else "worse"
    else:
        flag = "indistinguishable"
    return WilcoxonResult(stat, w_plus, w_minus, n, z, p, flag)


def timing_report(logs: Mapping[tuple[str, str], Sequence[Sequence[Mapping]]]) -> list[dict]:
    """Mean per-generation full-evaluation and surrogate seconds.

    ``logs`` maps ``(scenario, algorithm)`` to a list of run logs. Generation
    0 is left out whenever later generations exist, since it has no
    offspring to estimate.
    """
    out = []
    for (scenario, algorithm), runs in logs.items():
        rows = [r for run in runs for r in run]
        later = [r for r in rows if int(r["gen"]) > 0]
        rows = later or rows
        full = float(np.mean([float(r["wallclock_eval_s"]) for r in rows]))
        sur = float(np.mean([float(r["wallclock_surrogate_s"]) for r in rows]))
        out.append({
            "scenario": scenario,
            "algorithm": algorithm,
            "full_eval_s": full,
            "surrogate_s": sur,
            "ratio": sur / full if full > 0 else math.nan,
        })
    return out
