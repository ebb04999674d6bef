import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skggp.heuristics import (REFERENCE_GROUP, REFERENCE_ORDERING, RulePair, eval_group,
                              eval_ordering, group_attributes, ordering_attributes,
                              reference_rules)
from skggp.simulator import ActivityGroup, ActivityModePair, ProjectState, eligible_pairs
from skggp.trees import (FUNCTIONS, GROUP, GROUP_TERMINALS, ORDERING, ORDERING_TERMINALS,
                         ExpressionTree, TreeSyntaxError, generate, parse,
                         ramped_half_and_half, to_sexpr)

from conftest import make_instance, mode

P = ActivityModePair


def reference_eval(tokens, row, terms):
    """Independent recursive evaluator for prefix token tuples."""
    pos = 0

    def go():
        nonlocal pos
        t = tokens[pos]
        pos += 1
        if isinstance(t, str) and t in FUNCTIONS:
            args = [go() for _ in range(FUNCTIONS[t])]
            if t == "neg":
                return -args[0]
            a, b = args
            if t == "add":
                return a + b
            if t == "sub":
                return a - b
            if t == "mul":
                return a * b
            if t == "div":
                return a / b if abs(b) > 1e-9 else 1.0
            if t == "min":
                return a if a < b else b
            return a if a > b else b
        if isinstance(t, str):
            return row[terms.index(t)]
        return t

    with np.errstate(all="ignore"):
        v = go()
    return v if math.isfinite(v) else math.inf


@pytest.fixture
def star():
    # activity 0 (exp 7) precedes 1, 2, 3; activity 4 is free (exp 6, no successors)
    modes = [[mode(7, 5, 9, (2, 1))], [mode(2, demand=(1, 0))], [mode(3, demand=(0, 1))],
             [mode(4, demand=(1, 1))], [mode(6, demand=(4, 2))]]
    return make_instance([[], [0], [0], [0], []], modes, [4, 2])


def test_eval_ordering_examples(star):
    st0 = ProjectState.initial(star)
    assert eval_ordering(parse("exp_dur"), P(0, 0), st0, star) == 7.0
    assert eval_ordering(parse("(div exp_dur 0)"), P(0, 0), st0, star) == 1.0
    assert eval_ordering(parse("(min exp_dur succ_count)"), P(0, 0), st0, star) == 3.0


def test_ordering_attribute_row(star):
    state = ProjectState(2, frozenset(), {4: (0, 8)}, (0, 0))
    row = ordering_attributes(star, state, P(0, 0), eligible_count=1)
    named = dict(zip(ORDERING_TERMINALS, row))
    assert named["exp_dur"] == 7 and named["opt_dur"] == 5 and named["pes_dur"] == 9
    assert named["dmd_max"] == 0.5 and named["dmd_mean"] == pytest.approx(0.5)
    assert named["succ_count"] == 3 and named["succ_work"] == 9 and named["cp_end"] == 11
    assert named["n_elig"] == 1 and named["util"] == 1.0 and named["time_now"] == 2
    assert all(math.isfinite(v) for v in row)


def test_eval_group_examples(star):
    st0 = ProjectState.initial(star)
    state = ProjectState(7, frozenset({0}), {}, (4, 2))
    g3 = ActivityGroup((P(1, 0), P(2, 0), P(3, 0)))
    assert eval_group(parse("g_size", GROUP), g3, state, star) == 3.0
    groups = [ActivityGroup((P(1, 0),)), g3, ActivityGroup((P(2, 0), P(3, 0)))]
    neg = parse("(neg g_size)", GROUP)
    vals = [eval_group(neg, g, state, star) for g in groups]
    assert vals.index(min(vals)) == 1
    del st0


def test_group_attribute_row(star):
    state = ProjectState(7, frozenset({0}), {}, (4, 2))
    g = ActivityGroup((P(1, 0), P(3, 0)))
    named = dict(zip(GROUP_TERMINALS, group_attributes(star, state, g)))
    assert named["g_size"] == 2 and named["g_sum_dur"] == 6 and named["g_max_dur"] == 4
    assert named["g_dmd"] == pytest.approx(0.125 + 0.375)
    assert named["g_succ"] == 0
    assert named["g_slack"] == pytest.approx(((4 - 2) / 4 + (2 - 1) / 2) / 2)


def test_composite_trees_match_recursive_oracle(star):
    rng = np.random.default_rng(0)
    state = ProjectState(7, frozenset({0}), {}, (3, 1))
    pairs = eligible_pairs(star, state)
    for _ in range(300):
        t = generate(rng, ORDERING, 0, 5, "grow")
        for p in pairs:
            row = ordering_attributes(star, state, p)
            assert eval_ordering(t, p, state, star) == reference_eval(t.tokens, row,
                                                                      ORDERING_TERMINALS)
        g = generate(rng, GROUP, 0, 5, "grow")
        grp = ActivityGroup(tuple(pairs[:2]))
        row = group_attributes(star, state, grp)
        assert eval_group(g, grp, state, star) == reference_eval(g.tokens, row, GROUP_TERMINALS)


def test_reference_rules(star):
    ref = reference_rules()
    assert to_sexpr(ref.ordering) == REFERENCE_ORDERING
    assert to_sexpr(ref.group) == REFERENCE_GROUP
    modes = [[mode(6)], [mode(1)], [mode(1)], [mode(6)]]
    inst = make_instance([[], [0], [0], []], modes, [5])
    st0 = ProjectState.initial(inst)
    assert eval_ordering(ref.ordering, P(0, 0), st0, inst) == 2.0
    assert eval_ordering(ref.ordering, P(3, 0), st0, inst) == 6.0
    state = ProjectState(7, frozenset({0}), {}, (4, 2))
    light = ActivityGroup((P(1, 0),))
    heavy = ActivityGroup((P(1, 0), P(3, 0)))
    assert eval_group(ref.group, heavy, state, star) < eval_group(ref.group, light, state, star)


def test_role_checks(star):
    st0 = ProjectState.initial(star)
    with pytest.raises(ValueError):
        eval_ordering(parse("g_size", GROUP), P(0, 0), st0, star)
    with pytest.raises(ValueError):
        RulePair(parse("exp_dur"), parse("exp_dur"))
    with pytest.raises(TreeSyntaxError):
        parse("g_size", ORDERING)


@pytest.mark.parametrize("text", ["(add", "(add 1)", "(foo 1 2)", "add", "1 2", ")", "(1 2)"])
def test_parse_errors(text):
    with pytest.raises(TreeSyntaxError):
        parse(text)


def test_parse_example():
    t = parse("(div exp_dur (add 1 succ_count))")
    assert t.tokens == ("div", "exp_dur", "add", 1.0, "succ_count")
    assert t.depth == 2 and len(t) == 5


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), role=st.sampled_from([ORDERING, GROUP]))
def test_sexpr_round_trip(seed, role):
    t = ramped_half_and_half(np.random.default_rng(seed), role)
    again = parse(to_sexpr(t), role)
    assert again == t
    assert to_sexpr(again) == to_sexpr(t)


def test_generation_depth_limits():
    rng = np.random.default_rng(1)
    for _ in range(500):
        t = ramped_half_and_half(rng, ORDERING, 2, 6)
        assert t.depth <= 6
        full = generate(rng, GROUP, 3, 3, "full")
        assert full.depth == 3


def test_evaluation_is_total():
    rng = np.random.default_rng(2)
    for _ in range(2000):
        t = generate(rng, ORDERING, 0, 6, "grow")
        row = (rng.normal(size=len(ORDERING_TERMINALS)) * 10.0 ** rng.integers(-12, 300)).tolist()
        v = t.evaluate(row)
        assert v == reference_eval(t.tokens, row, ORDERING_TERMINALS) or (
            math.isnan(v) is False and v == math.inf)


def test_structural_equality_means_equal_priorities():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = generate(rng, ORDERING, 0, 5, "grow")
        b = ExpressionTree(tuple(a.tokens), ORDERING)
        row = rng.random(len(ORDERING_TERMINALS)).tolist()
        assert a == b and a.evaluate(row) == b.evaluate(row)


def test_subtree_helpers():
    t = parse("(add (mul exp_dur 2) (neg cp_end))")
    assert t.subtree_end(1) == 4
    assert t.node_depths() == [0, 1, 2, 2, 1, 2]
    swapped = t.replace(1, 4, ("succ_count",))
    assert to_sexpr(swapped) == "(add succ_count (neg cp_end))"
