"""Rule pairs, scheduling attributes and the fixed reference rules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _pykernels
from .instance import ProjectInstance
from .simulator import ActivityGroup, ActivityModePair, ProjectState, eligible_pairs
from .trees import GROUP, ORDERING, ExpressionTree, parse


@dataclass
class RulePair:
    """A GP individual. Lower fitness is better."""

    ordering: ExpressionTree
    group: ExpressionTree
    fitness: Optional[float] = None
    pc: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.ordering.role != ORDERING or self.group.role != GROUP:
            raise ValueError("RulePair needs an ordering tree and a group tree")

    @property
    def trees(self) -> tuple[ExpressionTree, ExpressionTree]:
        return (self.ordering, self.group)

    def with_tree(self, index: int, tree: ExpressionTree) -> "RulePair":
        if index == 0:
            return RulePair(tree, self.group)
        return RulePair(self.ordering, tree)

    def clone(self) -> "RulePair":
        return replace(self)

    def fresh(self) -> "RulePair":
        """Same trees, no fitness or PC attached."""
        return RulePair(self.ordering, self.group)

    def key(self) -> tuple:
        return (self.ordering.tokens, self.group.tokens)

    def __str__(self) -> str:
        return f"ordering={self.ordering} group={self.group}"


def _state_lists(instance: ProjectInstance, state: ProjectState):
    return list(state.available_resources), list(instance.resource_capacities)


def ordering_attributes(instance: ProjectInstance, state: ProjectState, pair: ActivityModePair,
                        eligible_count: int | None = None) -> list[float]:
    """Attribute row for one eligible pair, in ``ORDERING_TERMINALS`` order."""
    if eligible_count is None:
        eligible_count = len(eligible_pairs(instance, state))
    avail, cap = _state_lists(instance, state)
    arr = instance.arrays
    static = arr.static[pair.activity_id, pair.mode_index].tolist()
    util = _pykernels.utilisation(avail, cap, arr.frac_weight.tolist(), arr.frac_denom)
    return static + [float(eligible_count), util,
                     float(state.current_time)]


def group_attributes(instance: ProjectInstance, state: ProjectState,
                     group: ActivityGroup) -> list[float]:
    """Attribute row for a group, in ``GROUP_TERMINALS`` order."""
    arr = instance.arrays
    avail, cap = _state_lists(instance, state)
    members = [(p.activity_id, p.mode_index) for p in group.members]
    return _pykernels.group_row(members, arr.static.tolist(), arr.demand.tolist(),
                                arr.dmd_num.tolist(), avail, cap, arr.frac_weight.tolist(),
                                arr.frac_denom)


def eval_ordering(tree: ExpressionTree, pair: ActivityModePair, state: ProjectState,
                  instance: ProjectInstance) -> float:
    if tree.role != ORDERING:
        raise ValueError("eval_ordering needs an ordering tree")
    return tree.evaluate(ordering_attributes(instance, state, pair))


def eval_group(tree: ExpressionTree, group: ActivityGroup, state: ProjectState,
               instance: ProjectInstance) -> float:
    if tree.role != GROUP:
        raise ValueError("eval_group needs a group tree")
    return tree.evaluate(group_attributes(instance, state, group))


REFERENCE_ORDERING = "(div exp_dur (add 1 succ_count))"
REFERENCE_GROUP = "(neg g_dmd)"


def reference_rules() -> RulePair:
    """Fixed baseline pair used to drive situation sampling.

    Ordering prefers short activities with many successors; group selection
    prefers the group that uses the most resource capacity.
    """
    return RulePair(parse(REFERENCE_ORDERING, ORDERING), parse(REFERENCE_GROUP, GROUP))
