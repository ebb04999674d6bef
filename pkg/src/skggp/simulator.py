"""Event-driven project execution under an (ordering, group-selection) rule pair."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import _pykernels
from .backend import get_backend
from .instance import ProjectInstance, sample_durations

DEFAULT_GROUP_CAP = 256


@dataclass(frozen=True, order=True)
class ActivityModePair:
    activity_id: int
    mode_index: int

    def as_list(self) -> list[int]:
        return [self.activity_id, self.mode_index]


@dataclass(frozen=True)
class ActivityGroup:
    members: tuple[ActivityModePair, ...]

    def __len__(self) -> int:
        return len(self.members)

    def canonical(self) -> "ActivityGroup":
        return ActivityGroup(tuple(sorted(self.members)))


@dataclass
class ProjectState:
    current_time: int
    finished: frozenset[int]
    running: dict[int, tuple[int, int]]  # activity -> (mode, finish time)
    available_resources: tuple[int, ...]
    realized_durations: dict[tuple[int, int], int] = field(default_factory=dict)

    @classmethod
    def initial(cls, instance: ProjectInstance) -> "ProjectState":
        return cls(0, frozenset(), {}, tuple(instance.resource_capacities))

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.current_time,
            "finished": sorted(self.finished),
            "running": [[a, m, f] for a, (m, f) in sorted(self.running.items())],
            "available": list(self.available_resources),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProjectState":
        return cls(
            int(data["time"]),
            frozenset(int(a) for a in data["finished"]),
            {int(a): (int(m), int(f)) for a, m, f in data["running"]},
            tuple(int(x) for x in data["available"]),
        )


@dataclass
class ScheduleResult:
    makespan: int
    start_log: list[tuple[int, int, int]]  # (activity, mode, start) in start order
    durations: list[int]  # realised duration of each start_log entry
    decision_trace: list[dict] | None = None

    def finish_times(self) -> dict[int, int]:
        return {a: s + d for (a, _, s), d in zip(self.start_log, self.durations)}


def _fits(demand: Sequence[int], available: Sequence[int]) -> bool:
    return all(d <= a for d, a in zip(demand, available))


def eligible_pairs(instance: ProjectInstance, state: ProjectState) -> list[ActivityModePair]:
    """Startable (activity, mode) pairs in ascending (activity, mode) order."""
    out = []
    for act in instance.activities:
        a = act.id
        if a in state.finished or a in state.running:
            continue
        if not act.predecessors <= state.finished:
            continue
        for m, mode in enumerate(act.modes):
            if _fits(mode.resource_demand, state.available_resources):
                out.append(ActivityModePair(a, m))
    return out


def rank_order(pairs: Sequence[ActivityModePair], priorities: Sequence[float]) -> list[int]:
    """Indices sorted by priority; (activity, mode) breaks ties."""
    prios = [p if math.isfinite(p) else math.inf for p in priorities]
    return sorted(range(len(pairs)),
                  key=lambda i: (prios[i], pairs[i].activity_id, pairs[i].mode_index))


def knee_subset(pairs: Sequence[ActivityModePair], priorities: Sequence[float],
                backend=None) -> list[ActivityModePair]:
    """Priority-ascending prefix cut at the knee of the sorted priority curve."""
    if len(pairs) != len(priorities):
        raise ValueError("pairs and priorities must be aligned")
    if not pairs:
        raise ValueError("knee_subset needs at least one pair")
    be = backend or get_backend()
    order = rank_order(pairs, priorities)
    sorted_p = [priorities[i] if math.isfinite(priorities[i]) else math.inf for i in order]
    k = be.knee_cut(sorted_p)
    return [pairs[i] for i in order[:k]]


def enumerate_feasible_groups(instance: ProjectInstance, subset: Sequence[ActivityModePair],
                              state: ProjectState, cap: int = DEFAULT_GROUP_CAP,
                              backend=None) -> list[ActivityGroup]:
    """Maximal resource-feasible groups drawn from ``subset``, one mode per activity.

    Groups are produced by an include-first depth-first search over
    ``subset`` in the given order and truncated to ``cap``.
    """
    if not subset:
        return []
    be = backend or get_backend()
    dem = [list(instance.activities[p.activity_id].modes[p.mode_index].resource_demand)
           for p in subset]
    act = [p.activity_id for p in subset]
    groups = be.enumerate_groups(dem, act, list(state.available_resources), cap, instance.n)
    return [ActivityGroup(tuple(subset[i] for i in g)) for g in groups]


def _resolve_durations(instance: ProjectInstance, rng, durations) -> np.ndarray:
    if durations is not None:
        return np.asarray(durations, dtype=np.int32)
    return sample_durations(instance, rng)


def simulate(instance: ProjectInstance, rules, rng=None, *, durations=None,
             group_cap: int = DEFAULT_GROUP_CAP, trace: bool = False,
             backend=None) -> ScheduleResult:
    """Run one project to completion under ``rules`` (anything with
    ``.ordering``/``.group`` trees).

    Realised durations come from ``durations`` (an ``(n, modes)`` array) or
    are drawn from ``rng`` (seed or generator). Tracing always uses the
    pure-Python kernel, which matches the compiled one exactly.
    """
    dur = _resolve_durations(instance, rng, durations)
    records: list[dict] | None = [] if trace else None
    if trace:
        makespan, log = _pykernels.simulate(instance.arrays, dur, rules.ordering.function,
                                            rules.group.function, group_cap, records.append)
    else:
        be = backend or get_backend()
        makespan, log = be.simulate(instance.arrays, dur, rules.ordering, rules.group, group_cap)
    start_log = [tuple(int(x) for x in row) for row in log]
    realised = [int(dur[a, m]) for a, m, _ in start_log]
    return ScheduleResult(int(makespan), start_log, realised, records)


def makespan(instance: ProjectInstance, rules, durations: np.ndarray,
             group_cap: int = DEFAULT_GROUP_CAP, backend=None) -> int:
    be = backend or get_backend()
    return int(be.simulate(instance.arrays, durations, rules.ordering, rules.group, group_cap)[0])


@dataclass
class ValidationReport:
    ok: bool
    kind: str | None = None
    message: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_schedule(instance: ProjectInstance, result: ScheduleResult) -> ValidationReport:
    """Check completeness, durations, precedence and resource capacity."""
    n = instance.n
    seen: dict[int, tuple[int, int, int]] = {}
    for (a, m, s), d in zip(result.start_log, result.durations):
        if not 0 <= a < n:
            return ValidationReport(False, "completeness", f"unknown activity {a}")
        if a in seen:
            return ValidationReport(False, "completeness", f"activity {a} started twice")
        modes = instance.activities[a].modes
        if not 0 <= m < len(modes):
            return ValidationReport(False, "mode", f"activity {a} has no mode {m}")
        mode = modes[m]
        if not mode.optimistic_duration <= d <= mode.pessimistic_duration:
            return ValidationReport(
                False, "duration", f"activity {a} mode {m} realised {d} outside "
                f"[{mode.optimistic_duration}, {mode.pessimistic_duration}]")
        if s < 0:
            return ValidationReport(False, "start", f"activity {a} starts at negative time {s}")
        seen[a] = (m, s, s + d)
    if len(seen) != n or len(result.start_log) != len(result.durations):
        missing = sorted(set(range(n)) - set(seen))
        return ValidationReport(False, "completeness", f"activities never started: {missing}")

    for a, (m, s, f) in seen.items():
        for p in instance.activities[a].predecessors:
            pf = seen[p][2]
            if s < pf:
                return ValidationReport(
                    False, "precedence",
                    f"activity {a} starts at t={s} before predecessor {p} finishes at t={pf}")

    # sweep line: releases before starts at equal timestamps
    events = []
    for a, (m, s, f) in seen.items():
        dem = instance.activities[a].modes[m].resource_demand
        events.append((s, 1, a, dem))
        events.append((f, 0, a, dem))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    usage = [0] * instance.resource_count
    caps = instance.resource_capacities
    i = 0
    while i < len(events):
        t = events[i][0]
        active = []
        while i < len(events) and events[i][0] == t:
            _, kind, a, dem = events[i]
            sign = 1 if kind == 1 else -1
            for r, d in enumerate(dem):
                usage[r] += sign * d
            if kind == 1:
                active.append(a)
            i += 1
        for r, u in enumerate(usage):
            if u > caps[r]:
                return ValidationReport(
                    False, "resource",
                    f"resource {r} usage {u} exceeds capacity {caps[r]} at t={t} "
                    f"(starting: {sorted(active)})")

    expected = max((f for _, _, f in seen.values()), default=0)
    if result.makespan != expected:
        return ValidationReport(False, "makespan",
                                f"makespan {result.makespan} != last finish {expected}")
    return ValidationReport(True)


def _json_num(x: float):
    return x if math.isfinite(x) else None


def trace_lines(result: ScheduleResult) -> Iterable[str]:
    """JSON-lines records, one per decision point, for a traced run."""
    if result.decision_trace is None:
        raise ValueError("result has no decision trace; simulate with trace=True")
    for rec in result.decision_trace:
        yield json.dumps({
            "time": rec["time"],
            "eligible": [list(p) for p in rec["eligible"]],
            "priorities": [_json_num(p) for p in rec["priorities"]],
            "knee_subset": [list(p) for p in rec["knee_subset"]],
            "groups": [[list(p) for p in g] for g in rec["groups"]],
            "chosen": [list(p) for p in rec["groups"][rec["chosen"]]],
        })


def dump_trace(result: ScheduleResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in trace_lines(result):
            fh.write(line + "\n")
