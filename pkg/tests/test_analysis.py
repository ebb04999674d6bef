import math

import numpy as np
import pytest

from skggp.analysis import (ConvergenceCurve, budget_saved_ratio, extra_offspring_gain,
                            timing_report, wilcoxon_signed_rank)

# Blood-pressure style textbook data: 10 subjects measured after and before.
AFTER = [125, 115, 130, 140, 140, 115, 140, 125, 140, 135]
BEFORE = [110, 122, 125, 120, 140, 124, 123, 137, 135, 145]


def test_wilcoxon_textbook_example():
    # differences 15 -7 5 20 0 -9 17 -12 5 -10; the zero is dropped (n = 9)
    # |d| ranks: 5,5 -> 1.5 each; 7 -> 3; 9 -> 4; 10 -> 5; 12 -> 6; 15 -> 7; 17 -> 8; 20 -> 9
    # W+ = 7 + 1.5 + 9 + 8 + 1.5 = 27, W- = 3 + 4 + 6 + 5 = 18
    res = wilcoxon_signed_rank(AFTER, BEFORE)
    assert (res.w_plus, res.w_minus, res.statistic, res.n) == (27.0, 18.0, 18.0, 9)
    # mean 22.5, variance 9*10*19/24 - (2^3 - 2)/48 = 71.125
    assert res.z == pytest.approx((18 - 22.5) / math.sqrt(71.125), abs=1e-12)
    assert res.p_value == pytest.approx(0.5936, abs=1e-4)
    assert res.flag == "indistinguishable" and res.mark == "="


def test_wilcoxon_matches_scipy_normal_approximation():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = np.round(rng.normal(1.7, 0.05, 30), 2)
        b = np.round(a + rng.normal(0.01, 0.03, 30), 2)
        ours = wilcoxon_signed_rank(a.tolist(), b.tolist())
        ref = stats.wilcoxon(a, b, zero_method="wilcox", correction=False, method="approx")
        assert ours.statistic == pytest.approx(ref.statistic)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_identical_samples():
    a = [1.7 + 0.01 * i for i in range(30)]
    res = wilcoxon_signed_rank(a, list(a))
    assert res.flag == "indistinguishable" and res.n == 0 and res.p_value == 1.0


def test_wilcoxon_uniform_improvement_is_better():
    rng = np.random.default_rng(1)
    b = (1.7 + rng.random(30) * 0.1).tolist()
    a = [x - 0.1 for x in b]
    res = wilcoxon_signed_rank(a, b)
    assert res.flag == "better" and res.mark == "+"
    assert res.statistic == 0.0 and res.w_minus == 30 * 31 / 2
    assert wilcoxon_signed_rank(b, a).flag == "worse"


def test_wilcoxon_input_checks():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0] * 5, [2.0] * 5)
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0] * 6, [2.0] * 7)


def test_curve_validation_and_step_values():
    with pytest.raises(ValueError):
        ConvergenceCurve(())
    with pytest.raises(ValueError):
        ConvergenceCurve(((10, 2.0), (10, 1.9)))
    c = ConvergenceCurve(((10, 2.0), (20, 1.9), (30, 1.8)))
    assert c.value_at(10) == 2.0 and c.value_at(25) == 1.9 and c.value_at(99) == 1.8
    with pytest.raises(ValueError):
        c.value_at(5)
    assert c.final == 1.8 and c.evaluations == 30
    log = [{"full_evals_cumulative": 10, "best_test_fitness": 2.0},
           {"full_evals_cumulative": 20, "best_test_fitness": 2.2},
           {"full_evals_cumulative": 30, "best_test_fitness": 1.5}]
    assert ConvergenceCurve.from_log(log).points == ((10, 2.0), (20, 2.0), (30, 1.5))


def test_budget_saved_examples():
    c = ConvergenceCurve(((1000, 2.0), (5000, 1.9), (10_000, 1.8)))
    for at in (1000, 3000, 5000, 10_000):
        assert budget_saved_ratio(c, c, at) == 0.0
    base = ConvergenceCurve(((2000, 2.0), (10_000, 1.80)))
    other = ConvergenceCurve(((2000, 2.0), (6000, 1.80), (10_000, 1.7)))
    assert budget_saved_ratio(base, other, 10_000) == pytest.approx(0.4)
    lagging = ConvergenceCurve(((2000, 2.1), (12_000, 1.8)))
    assert budget_saved_ratio(base, lagging, 10_000) == pytest.approx(-0.2)
    # between improvements the reference point is where the baseline got there
    stalled = ConvergenceCurve(((2000, 2.0), (8000, 1.80), (10_000, 1.80)))
    assert budget_saved_ratio(stalled, other, 10_000) == pytest.approx(0.2)
    never = ConvergenceCurve(((2000, 2.1), (12_000, 1.9)))
    assert budget_saved_ratio(base, never, 10_000) is None
    with pytest.raises(ValueError):
        budget_saved_ratio(base, other, 0)


def _random_curve(rng):
    evals = np.cumsum(rng.integers(1, 6, size=int(rng.integers(1, 12)))) * 10
    vals = np.minimum.accumulate(np.round(rng.uniform(1.5, 2.2, len(evals)), 2))
    return ConvergenceCurve(tuple(zip(evals.tolist(), vals.tolist())))


def test_budget_saved_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        base, other = _random_curve(rng), _random_curve(rng)
        start = base.points[0][0]
        for at in sorted({start, base.evaluations, int(rng.integers(start, start + 300))}):
            # oracle: walk every evaluation count and read both step curves directly
            def best(curve, e):
                seen = [f for pe, f in curve.points if pe <= e]
                return seen[-1] if seen else math.inf
            target = best(base, at)
            e_base = next(e for e in range(at + 1) if best(base, e) <= target)
            hits = [e for e in range(other.evaluations + 1) if best(other, e) <= target]
            expect = None if not hits else (e_base - hits[0]) / at
            assert budget_saved_ratio(base, other, at) == expect


def test_extra_offspring_examples():
    base = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
    assert extra_offspring_gain(base, [(9.0, 9.0), (8.0, 8.0)], 3) == (0, 0)
    assert extra_offspring_gain(base, [(0.5, 0.5)], 3) == (1, 0)
    assert extra_offspring_gain(base, [(0.5, 9.0)], 3) == (0, 1)
    assert extra_offspring_gain([], [], 3) == (0, 0)


def test_extra_offspring_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        nb, ne = int(rng.integers(1, 15)), int(rng.integers(0, 15))
        cutoff = int(rng.integers(1, nb + 1))
        # coarse values so both rankings contain ties
        base = [tuple(x) for x in np.round(rng.random((nb, 2)), 1).tolist()]
        extra = [tuple(x) for x in np.round(rng.random((ne, 2)), 1).tolist()]
        pool = base + extra
        table = []  # (index, estimated rank, true rank), ranks 1-based with index tie-break
        for i in range(len(pool)):
            er = 1 + sum((pool[j][0], j) < (pool[i][0], i) for j in range(len(pool)))
            tr = 1 + sum((pool[j][1], j) < (pool[i][1], i) for j in range(len(pool)))
            table.append((i, er, tr))
        picked = [(i, tr) for i, er, tr in table if i >= nb and er <= cutoff]
        expect = (sum(tr <= cutoff for _, tr in picked), sum(tr > cutoff for _, tr in picked))
        assert extra_offspring_gain(base, extra, cutoff) == expect


def test_timing_report_constant_timers():
    run = [{"gen": g, "wallclock_eval_s": 100.0, "wallclock_surrogate_s": 5.0} for g in range(1, 6)]
    first = {"gen": 0, "wallclock_eval_s": 300.0, "wallclock_surrogate_s": 0.0}
    rows = timing_report({("0.5/R4", "SKGGP-2"): [[first] + run, run]})
    assert rows == [{"scenario": "0.5/R4", "algorithm": "SKGGP-2", "full_eval_s": 100.0,
                     "surrogate_s": 5.0, "ratio": 0.05}]
    only_init = timing_report({("s", "a"): [[first]]})
    assert only_init[0]["full_eval_s"] == 300.0
