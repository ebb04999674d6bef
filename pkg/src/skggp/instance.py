"""Project instances: data model, random generation, durations and bounds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for scenario or algorithm settings that cannot be honoured."""


class InstanceError(ValueError):
    """Raised when an instance violates a structural invariant.

    The message always starts with the offending field path, e.g.
    ``activities[3].modes[1].demand[2]``.
    """


@dataclass(frozen=True)
class Mode:
    expected_duration: int
    optimistic_duration: int
    pessimistic_duration: int
    resource_demand: tuple[int, ...]


@dataclass(frozen=True)
class Activity:
    id: int
    modes: tuple[Mode, ...]
    predecessors: frozenset[int] = frozenset()


@dataclass(frozen=True)
class ScenarioConfig:
    activity_count: int = 30
    modes_per_activity: int = 3
    resource_type_count: int = 4
    target_order_strength: float = 0.5
    duration_range: tuple[float, float] = (0.8, 1.4)
    capacity_tightness: float = 1.0
    instances_per_evaluation: int = 5
    order_strength_tolerance: float = 0.05

    def __post_init__(self) -> None:
        if self.activity_count < 1:
            raise ConfigError("activity_count must be positive")
        if self.modes_per_activity < 1:
            raise ConfigError("modes_per_activity must be positive")
        if self.resource_type_count < 1:
            raise ConfigError("resource_type_count must be positive")
        if not 0.0 <= self.target_order_strength <= 1.0:
            raise ConfigError("target_order_strength must lie in [0, 1]")
        lo, hi = self.duration_range
        if not (0.0 < lo <= 1.0 <= hi):
            raise ConfigError("duration_range must satisfy 0 < optimistic <= 1 <= pessimistic")
        if self.capacity_tightness <= 0:
            raise ConfigError("capacity_tightness must be positive")
        if self.instances_per_evaluation < 1:
            raise ConfigError("instances_per_evaluation must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"scenario: unknown keys {sorted(unknown)}")
        kwargs = dict(data)
        if "duration_range" in kwargs:
            kwargs["duration_range"] = tuple(kwargs["duration_range"])
        return cls(**kwargs)


# Column order of the per-(activity, mode) static attribute table.
STATIC_COLUMNS = (
    "exp_dur",
    "opt_dur",
    "pes_dur",
    "dmd_max",
    "dmd_mean",
    "succ_count",
    "succ_work",
    "cp_end",
)


@dataclass(frozen=True, eq=False)
class ProjectInstance:
    """An immutable DMRCPSP instance.

    Precedence is stored as direct predecessor sets; any derived network
    data (successors, topological order, critical paths) is computed lazily
    and cached on the instance.
    """

    activities: tuple[Activity, ...]
    resource_capacities: tuple[int, ...]
    id: str = "instance"

    def __post_init__(self) -> None:
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.activities)

    @property
    def resource_count(self) -> int:
        return len(self.resource_capacities)

    @cached_property
    def successors(self) -> tuple[tuple[int, ...], ...]:
        succ: list[list[int]] = [[] for _ in self.activities]
        for act in self.activities:
            for p in sorted(act.predecessors):
                succ[p].append(act.id)
        return tuple(tuple(s) for s in succ)

    @cached_property
    def topological_order(self) -> tuple[int, ...]:
        order = _topological_order(self.n, [a.predecessors for a in self.activities])
        if order is None:
            raise InstanceError("activities: precedence relation contains a cycle")
        return tuple(order)

    @cached_property
    def arrays(self) -> "InstanceArrays":
        return InstanceArrays.build(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "capacities": list(self.resource_capacities),
            "activities": [
                {
                    "id": a.id,
                    "predecessors": sorted(a.predecessors),
                    "modes": [
                        {
                            "opt": m.optimistic_duration,
                            "exp": m.expected_duration,
                            "pes": m.pessimistic_duration,
                            "demand": list(m.resource_demand),
                        }
                        for m in a.modes
                    ],
                }
                for a in self.activities
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProjectInstance":
        return _load(data)

    @classmethod
    def from_json(cls, text: str) -> "ProjectInstance":
        return _load(json.loads(text))


@dataclass(frozen=True, eq=False)
class InstanceArrays:
    """Flat numpy views of an instance, shared by both simulation kernels.

    Mode axes are padded to the largest mode count; ``n_modes`` bounds the
    valid entries.
    """

    n_modes: np.ndarray  # int32 (n,)
    demand: np.ndarray  # int32 (n, M, R)
    capacity: np.ndarray  # int32 (R,)
    expected: np.ndarray  # int32 (n, M)
    optimistic: np.ndarray  # int32 (n, M)
    pessimistic: np.ndarray  # int32 (n, M)
    pred_count: np.ndarray  # int32 (n,)
    succ_ptr: np.ndarray  # int32 (n + 1,)
    succ_idx: np.ndarray  # int32
    static: np.ndarray  # float64 (n, M, len(STATIC_COLUMNS))
    frac_weight: np.ndarray  # float64 (R,), see fraction_weights
    frac_denom: float
    dmd_num: np.ndarray  # float64 (n, M): sum_r demand * frac_weight
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, inst: ProjectInstance) -> "InstanceArrays":
        n, R = inst.n, inst.resource_count
        M = max(len(a.modes) for a in inst.activities) if n else 1
        n_modes = np.array([len(a.modes) for a in inst.activities], dtype=np.int32)
        demand = np.zeros((n, M, R), dtype=np.int32)
        expected = np.zeros((n, M), dtype=np.int32)
        optimistic = np.zeros((n, M), dtype=np.int32)
        pessimistic = np.zeros((n, M), dtype=np.int32)
        for a in inst.activities:
            for m, mode in enumerate(a.modes):
                demand[a.id, m] = mode.resource_demand
                expected[a.id, m] = mode.expected_duration
                optimistic[a.id, m] = mode.optimistic_duration
                pessimistic[a.id, m] = mode.pessimistic_duration
        capacity = np.asarray(inst.resource_capacities, dtype=np.int32)
        succ = inst.successors
        succ_ptr = np.zeros(n + 1, dtype=np.int32)
        for i, s in enumerate(succ):
            succ_ptr[i + 1] = succ_ptr[i] + len(s)
        succ_idx = np.array([j for s in succ for j in s], dtype=np.int32)
        pred_count = np.array([len(a.predecessors) for a in inst.activities], dtype=np.int32)

        min_exp = [min(m.expected_duration for m in a.modes) for a in inst.activities]
        cp_end = [0] * n
        for a in reversed(inst.topological_order):
            cp_end[a] = min_exp[a] + max((cp_end[s] for s in succ[a]), default=0)
        reach = _reachability(n, succ, inst.topological_order)
        succ_work = [0] * n
        for a in range(n):
            bits, total, j = reach[a], 0, 0
            while bits:
                if bits & 1:
                    total += min_exp[j]
                bits >>= 1
                j += 1
            succ_work[a] = total

        static = np.zeros((n, M, len(STATIC_COLUMNS)), dtype=np.float64)
        weight, denom = fraction_weights(inst.resource_capacities)
        dmd_num = np.zeros((n, M), dtype=np.float64)
        cap_f = [float(c) for c in inst.resource_capacities]
        for a in inst.activities:
            for m, mode in enumerate(a.modes):
                fracs = [d / c for d, c in zip(mode.resource_demand, cap_f)]
                num = 0.0
                for d, w in zip(mode.resource_demand, weight):
                    num += d * w
                dmd_num[a.id, m] = num
                static[a.id, m] = (
                    mode.expected_duration,
                    mode.optimistic_duration,
                    mode.pessimistic_duration,
                    max(fracs) if fracs else 0.0,
                    num / denom,
                    len(succ[a.id]),
                    succ_work[a.id],
                    cp_end[a.id],
                )
        frac_weight = np.asarray(weight, dtype=np.float64)
        for arr in (n_modes, demand, capacity, expected, optimistic, pessimistic,
                    pred_count, succ_ptr, succ_idx, static, frac_weight, dmd_num):
            arr.setflags(write=False)
        return cls(n_modes, demand, capacity, expected, optimistic, pessimistic,
                   pred_count, succ_ptr, succ_idx, static, frac_weight, denom, dmd_num)


# numerators stay below this so integer-valued double sums are exact
_EXACT_LIMIT = 2 ** 40


def fraction_weights(capacities: Sequence[int]) -> tuple[list[float], float]:
    """Weights ``w`` and denominator ``D`` with ``mean_r(x_r / cap_r) == sum_r(x_r * w_r) / D``.

    With ``L = lcm(capacities)`` the weights are the integers ``L // cap_r`` and
    ``D = L * R``, so every sum of demand or slack fractions is an exact
    integer numerator and the final division is the only rounding step.
    Averages over a resource set therefore do not depend on summation order.
    When ``L`` is too large for that, falls back to ``w = 1/cap`` and ``D = R``.
    """
    R = len(capacities)
    if R == 0:
        return [], 1.0
    L = math.lcm(*(int(c) for c in capacities))
    if L * max(capacities) * R < _EXACT_LIMIT:
        return [float(L // int(c)) for c in capacities], float(L * R)
    return [1.0 / c for c in capacities], float(R)


def _validate(inst: ProjectInstance) -> None:
    caps = inst.resource_capacities
    if not caps:
        raise InstanceError("capacities: at least one resource type is required")
    for r, c in enumerate(caps):
        if int(c) != c or c <= 0:
            raise InstanceError(f"capacities[{r}]: must be a positive integer, got {c!r}")
    n = len(inst.activities)
    for i, act in enumerate(inst.activities):
        path = f"activities[{i}]"
        if act.id != i:
            raise InstanceError(f"{path}.id: expected {i}, got {act.id}")
        if not act.modes:
            raise InstanceError(f"{path}.modes: at least one mode is required")
        for p in act.predecessors:
            if not (0 <= p < n) or p == i:
                raise InstanceError(f"{path}.predecessors: invalid reference {p}")
        for m, mode in enumerate(act.modes):
            mp = f"{path}.modes[{m}]"
            o, e, s = mode.optimistic_duration, mode.expected_duration, mode.pessimistic_duration
            for name, v in (("opt", o), ("exp", e), ("pes", s)):
                if int(v) != v or v < 1:
                    raise InstanceError(f"{mp}.{name}: must be a positive integer, got {v!r}")
            if not o <= e <= s:
                raise InstanceError(f"{mp}: need opt <= exp <= pes, got ({o}, {e}, {s})")
            if len(mode.resource_demand) != len(caps):
                raise InstanceError(
                    f"{mp}.demand: length {len(mode.resource_demand)} != resource count {len(caps)}")
            for r, d in enumerate(mode.resource_demand):
                if int(d) != d or d < 0:
                    raise InstanceError(f"{mp}.demand[{r}]: must be a non-negative integer")
                if d > caps[r]:
                    raise InstanceError(f"{mp}.demand[{r}]: {d} exceeds capacity {caps[r]}")
    if _topological_order(n, [a.predecessors for a in inst.activities]) is None:
        raise InstanceError("activities: precedence relation contains a cycle")


def _topological_order(n: int, preds: Sequence[frozenset[int]]) -> list[int] | None:
    indeg = [len(p) for p in preds]
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, ps in enumerate(preds):
        for p in ps:
            succ[p].append(a)
    ready = [a for a in range(n) if indeg[a] == 0]
    order: list[int] = []
    while ready:
        a = min(ready)
        ready.remove(a)
        order.append(a)
        for s in succ[a]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    return order if len(order) == n else None


def _reachability(n: int, succ: Sequence[Sequence[int]], order: Sequence[int]) -> list[int]:
    """Bitset of transitive successors per activity."""
    reach = [0] * n
    for a in reversed(order):
        bits = 0
        for s in succ[a]:
            bits |= (1 << s) | reach[s]
        reach[a] = bits
    return reach


def compute_order_strength(instance: ProjectInstance) -> float:
    """Share of activity pairs that are ordered by the transitive closure."""
    n = instance.n
    if n < 2:
        return 0.0
    reach = _reachability(n, instance.successors, instance.topological_order)
    arcs = sum(bin(r).count("1") for r in reach)
    return arcs / (n * (n - 1) / 2)


def achievable_order_strengths(n: int) -> list[float]:
    if n < 2:
        return [0.0]
    pairs = n * (n - 1) // 2
    return [k / pairs for k in range(pairs + 1)]


def _closure_count_label_space(n: int, ii: np.ndarray, jj: np.ndarray, mask: np.ndarray) -> int:
    succ = [0] * n
    for i, j in zip(ii[mask].tolist(), jj[mask].tolist()):
        succ[i] |= 1 << j
    reach = [0] * n
    total = 0
    for i in range(n - 1, -1, -1):
        bits = succ[i]
        b, j = succ[i], 0
        while b:
            low = b & -b
            j = low.bit_length() - 1
            bits |= reach[j]
            b ^= low
        reach[i] = bits
        total += bin(bits).count("1")
    return total


def _order_strength_arcs(n: int, target: float, tol: float, rng: np.random.Generator,
                         attempts: int = 25) -> list[tuple[int, int]]:
    """Random precedence arcs whose closure density is within ``tol`` of target.

    Activities get a random topological labelling; each label-ordered pair
    carries a fixed uniform draw and becomes an arc when the draw is below a
    threshold probability found by bisection.
    """
    if n < 2:
        return []
    pairs = n * (n - 1) / 2
    ii, jj = np.triu_indices(n, 1)
    for _ in range(attempts):
        labels = rng.permutation(n)
        u = rng.random(ii.size)

        def density(p: float) -> float:
            return _closure_count_label_space(n, ii, jj, u < p) / pairs

        lo, hi = 0.0, 1.0
        chosen = None
        for p in (lo, hi):
            if abs(density(p) - target) <= tol:
                chosen = p
                break
        if chosen is None:
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                d = density(mid)
                if abs(d - target) <= tol:
                    chosen = mid
                    break
                if d < target:
                    lo = mid
                else:
                    hi = mid
        if chosen is not None:
            mask = u < chosen
            return [(int(labels[i]), int(labels[j])) for i, j in zip(ii[mask], jj[mask])]
    raise ConfigError(
        f"could not reach order strength {target} +/- {tol} for {n} activities")


def _transitive_reduction(n: int, arcs: Sequence[tuple[int, int]]) -> list[set[int]]:
    preds: list[set[int]] = [set() for _ in range(n)]
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, b in arcs:
        preds[b].add(a)
        succ[a].append(b)
    order = _topological_order(n, [frozenset(p) for p in preds])
    assert order is not None
    reach = _reachability(n, succ, order)
    reduced: list[set[int]] = [set() for _ in range(n)]
    for a in range(n):
        via = 0
        for s in succ[a]:
            via |= reach[s]
        for s in succ[a]:
            if not (via >> s) & 1:
                reduced[s].add(a)
    return reduced


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_instance(config: ScenarioConfig, seed: int | np.random.SeedSequence,
                      instance_id: str | None = None) -> ProjectInstance:
    """Random instance whose order strength is within tolerance of the target."""
    n = config.activity_count
    target, tol = config.target_order_strength, config.order_strength_tolerance
    values = achievable_order_strengths(n)
    if not any(abs(v - target) <= tol for v in values):
        shown = ", ".join(f"{v:.3f}" for v in values)
        raise ConfigError(
            f"order strength {target} +/- {tol} is unattainable with {n} activities; "
            f"achievable values are {{{shown}}}")
    rng = np.random.default_rng(seed)
    preds = _transitive_reduction(n, _order_strength_arcs(n, target, tol, rng))

    R, M = config.resource_type_count, config.modes_per_activity
    opt_mult, pes_mult = config.duration_range
    raw_modes: list[list[tuple[int, int, int, list[int]]]] = []
    for _ in range(n):
        base = int(rng.integers(3, 16))
        uses = rng.random(R) < 0.5
        if not uses.any():
            uses[int(rng.integers(R))] = True
        base_demand = rng.integers(1, 11, size=R) * uses
        modes = []
        for m in range(M):
            factor = 1.0 + 0.5 * m
            exp = max(1, _round_half_up(base * factor))
            opt = min(exp, max(1, _round_half_up(exp * opt_mult)))
            pes = max(exp, _round_half_up(exp * pes_mult))
            dem = [int(math.ceil(d / factor)) for d in base_demand.tolist()]
            modes.append((opt, exp, pes, dem))
        raw_modes.append(modes)

    # capacities from the average concurrent load of an unconstrained
    # earliest-start schedule (mean over modes), never below the largest demand
    order = _topological_order(n, [frozenset(p) for p in preds])
    assert order is not None
    mean_dur = [float(np.mean([md[1] for md in modes])) for modes in raw_modes]
    finish = [0.0] * n
    for a in order:
        finish[a] = max((finish[p] for p in preds[a]), default=0.0) + mean_dur[a]
    horizon = max(finish) if finish else 1.0
    caps = []
    for r in range(R):
        work = sum(float(np.mean([md[1] * md[3][r] for md in modes])) for modes in raw_modes)
        peak = max(md[3][r] for modes in raw_modes for md in modes)
        caps.append(max(1, peak, int(math.ceil(config.capacity_tightness * work / horizon))))

    activities = tuple(
        Activity(
            id=a,
            modes=tuple(Mode(exp, opt, pes, tuple(dem)) for opt, exp, pes, dem in raw_modes[a]),
            predecessors=frozenset(preds[a]),
        )
        for a in range(n)
    )
    if instance_id is None:
        instance_id = f"n{n}-os{target:g}-r{R}"
    return ProjectInstance(activities, tuple(caps), instance_id)


def _triangular(u: np.ndarray | float, a, c, b):
    """Inverse CDF of the triangular distribution on [a, b] with peak c."""
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    width = b - a
    safe = np.where(width > 0, width, 1.0)
    fc = np.where(width > 0, (c - a) / safe, 0.0)
    left = a + np.sqrt(u * width * (c - a))
    right = b - np.sqrt((1.0 - u) * width * (b - c))
    return np.where(u < fc, left, right)


def _round_clamped(x, lo, hi) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x) + 0.5), lo, hi).astype(np.int32)


def sample_duration(mode: Mode, rng: np.random.Generator) -> int:
    """One realised duration: triangular draw rounded to an integer."""
    u = rng.random()
    x = _triangular(u, mode.optimistic_duration, mode.expected_duration, mode.pessimistic_duration)
    return int(_round_clamped(x, mode.optimistic_duration, mode.pessimistic_duration))


def sample_durations(instance: ProjectInstance, seed) -> np.ndarray:
    """Realised duration for every (activity, mode), drawn up front.

    Each value is revealed to the schedule only when the activity starts in
    that mode, so pre-drawing is equivalent to drawing at start time while
    letting every rule in a generation face the same realisation.
    """
    arr = instance.arrays
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(arr.expected.shape)
    x = _triangular(u, arr.optimistic, arr.expected, arr.pessimistic)
    out = _round_clamped(x, arr.optimistic, arr.pessimistic)
    out[arr.expected == 0] = 0  # padding slots
    return out


def lower_bound(instance: ProjectInstance) -> int:
    """Resource-free critical path on each activity's shortest optimistic duration."""
    finish = [0] * instance.n
    for a in instance.topological_order:
        act = instance.activities[a]
        start = max((finish[p] for p in act.predecessors), default=0)
        finish[a] = start + min(m.optimistic_duration for m in act.modes)
    return max(finish, default=0)


def _load(data: Any) -> ProjectInstance:
    def need(obj, key, path):
        if not isinstance(obj, dict) or key not in obj:
            raise InstanceError(f"{path}.{key}: missing")
        return obj[key]

    def int_list(v, path):
        if not isinstance(v, list):
            raise InstanceError(f"{path}: expected a list")
        for i, x in enumerate(v):
            if isinstance(x, bool) or not isinstance(x, int):
                raise InstanceError(f"{path}[{i}]: expected an integer, got {x!r}")
        return v

    caps = int_list(need(data, "capacities", "$"), "capacities")
    acts_raw = need(data, "activities", "$")
    if not isinstance(acts_raw, list):
        raise InstanceError("activities: expected a list")
    acts = []
    for i, a in enumerate(acts_raw):
        path = f"activities[{i}]"
        aid = need(a, "id", path)
        preds = int_list(need(a, "predecessors", path), f"{path}.predecessors")
        modes_raw = need(a, "modes", path)
        if not isinstance(modes_raw, list):
            raise InstanceError(f"{path}.modes: expected a list")
        modes = []
        for m, md in enumerate(modes_raw):
            mp = f"{path}.modes[{m}]"
            vals = []
            for key in ("opt", "exp", "pes"):
                v = need(md, key, mp)
                if isinstance(v, bool) or not isinstance(v, int):
                    raise InstanceError(f"{mp}.{key}: expected an integer, got {v!r}")
                vals.append(v)
            dem = int_list(need(md, "demand", mp), f"{mp}.demand")
            modes.append(Mode(vals[1], vals[0], vals[2], tuple(dem)))
        acts.append(Activity(aid, tuple(modes), frozenset(preds)))
    return ProjectInstance(tuple(acts), tuple(caps), str(data.get("id", "instance")))
