"""Rank-based phenotypic characterisation over frozen decision situations.

A rule pair is characterised by ranking every candidate of every sampled
situation with the matching tree (ordering tree for ordering situations,
group tree for group-selection situations) and concatenating the
competition ranks (ties share the smallest rank, 1 = smallest priority).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

from .backend import get_backend
from .heuristics import RulePair, group_attributes, ordering_attributes
from .instance import ProjectInstance
from .simulator import (DEFAULT_GROUP_CAP, ActivityGroup, ActivityModePair, ProjectState,
                        simulate)
from .trees import GROUP, GROUP_TERMINALS, ORDERING, ORDERING_TERMINALS

FORMAT = "skggp-situations/1"
CACHE_LIMIT = 200_000


class SamplingError(RuntimeError):
    pass


def _digest(state: ProjectState) -> str:
    text = json.dumps(state.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class DecisionSituation:
    kind: str
    instance_id: str
    state: ProjectState
    candidates: tuple
    attributes: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.candidates)

    @property
    def state_digest(self) -> str:
        return _digest(self.state)

    @classmethod
    def build(cls, kind: str, instance: ProjectInstance, state: ProjectState,
              candidates: Sequence) -> "DecisionSituation":
        if kind == ORDERING:
            cands = tuple(sorted(candidates))
            rows = [ordering_attributes(instance, state, p, len(cands)) for p in cands]
            width = len(ORDERING_TERMINALS)
        elif kind == GROUP:
            cands = tuple(sorted((g.canonical() for g in candidates),
                                 key=lambda g: [p.as_list() for p in g.members]))
            rows = [group_attributes(instance, state, g) for g in cands]
            width = len(GROUP_TERMINALS)
        else:
            raise ValueError(f"unknown situation kind {kind!r}")
        attrs = np.asarray(rows, dtype=np.float64).reshape(len(cands), width)
        attrs.setflags(write=False)
        return cls(kind, instance.id, state, cands, attrs)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == ORDERING:
            cands = [p.as_list() for p in self.candidates]
        else:
            cands = [[p.as_list() for p in g.members] for g in self.candidates]
        return {
            "instance_id": self.instance_id,
            "kind": self.kind,
            "state": self.state.to_dict(),
            "state_digest": self.state_digest,
            "candidates": cands,
        }


@dataclass(frozen=True, eq=False)
class SituationSet:
    """Situations in their fixed PC order: all ordering ones, then all group ones."""

    situations: tuple[DecisionSituation, ...]
    # per-kind memo of rank rows keyed by tree tokens; a PC half depends on one tree only
    _ranks: dict = field(default_factory=lambda: {ORDERING: {}, GROUP: {}}, init=False,
                         repr=False, compare=False)
    # rows with equal content are one shared object, so `is` decides PC-half equality
    _interned: dict = field(default_factory=lambda: {ORDERING: {}, GROUP: {}}, init=False,
                            repr=False, compare=False)
    # bumped whenever the caches are dropped, which invalidates per-tree memos
    _epoch: list = field(default_factory=lambda: [0], init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        kinds = [s.kind for s in self.situations]
        if kinds != sorted(kinds, key=lambda k: k != ORDERING):
            raise ValueError("ordering situations must precede group situations")
        if not any(k == ORDERING for k in kinds) or not any(k == GROUP for k in kinds):
            raise ValueError("need at least one situation of each kind")

    def __len__(self) -> int:
        return len(self.situations)

    def _stack(self, kind: str):
        sits = [s for s in self.situations if s.kind == kind]
        ptr = np.zeros(len(sits) + 1, dtype=np.int32)
        for i, s in enumerate(sits):
            ptr[i + 1] = ptr[i] + s.size
        attrs = np.ascontiguousarray(np.vstack([s.attributes for s in sits]))
        return attrs, ptr

    @cached_property
    def ordering_block(self):
        return self._stack(ORDERING)

    @cached_property
    def group_block(self):
        return self._stack(GROUP)

    def tree_rows(self, trees: Sequence, kind: str, backend=None) -> list:
        """Read-only rank rows of ``trees`` over this set's ``kind`` situations.

        Equal rows are returned as the same array object.
        """
        attrs, ptr = self.ordering_block if kind == ORDERING else self.group_block
        cache, interned = self._ranks[kind], self._interned[kind]
        if len(cache) > CACHE_LIMIT:
            cache.clear()
            interned.clear()
            self._epoch[0] += 1
        tag = (id(self), self._epoch[0])
        rows: list = [None] * len(trees)
        todo: dict[tuple, list[int]] = {}
        for i, t in enumerate(trees):
            # fast path: the same tree object was ranked against this set before
            memo = t.__dict__.get("_rank_memo")
            if memo is not None and memo[0] == tag:
                rows[i] = memo[1]
                continue
            row = cache.get(t.tokens)
            if row is None:
                todo.setdefault(t.tokens, []).append(i)
            else:
                rows[i] = row
                object.__setattr__(t, "_rank_memo", (tag, row))
        if todo:
            be = backend or get_backend()
            firsts = [trees[idx[0]] for idx in todo.values()]
            fresh = be.rank_matrix(firsts, attrs, ptr)
            for (key, idx), row in zip(todo.items(), fresh):
                row = interned.setdefault(row.tobytes(), row)
                row.setflags(write=False)
                cache[key] = row
                for i in idx:
                    rows[i] = row
                    object.__setattr__(trees[i], "_rank_memo", (tag, row))
        return rows

    def tree_ranks(self, trees: Sequence, kind: str, backend=None) -> np.ndarray:
        """Rank rows of ``trees`` over this set's ``kind`` situations."""
        rows = self.tree_rows(trees, kind, backend)
        if not rows:
            attrs, _ = self.ordering_block if kind == ORDERING else self.group_block
            return np.empty((0, attrs.shape[0]), dtype=np.int32)
        return np.array(rows, dtype=np.int32)

    @property
    def offsets(self) -> np.ndarray:
        """Start of each situation's segment in the PC vector, plus the total length."""
        sizes = [s.size for s in self.situations]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def pc_length(self) -> int:
        return int(sum(s.size for s in self.situations))

    def to_dict(self) -> dict[str, Any]:
        return {"format": FORMAT, "situations": [s.to_dict() for s in self.situations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any],
                  instances: Mapping[str, ProjectInstance]) -> "SituationSet":
        if data.get("format") != FORMAT:
            raise ValueError(f"unsupported situation bundle format {data.get('format')!r}")
        out = []
        for i, raw in enumerate(data["situations"]):
            inst = instances.get(raw["instance_id"])
            if inst is None:
                raise KeyError(f"situations[{i}]: instance {raw['instance_id']!r} not supplied")
            state = ProjectState.from_dict(raw["state"])
            if _digest(state) != raw["state_digest"]:
                raise ValueError(f"situations[{i}]: state digest mismatch")
            if raw["kind"] == ORDERING:
                cands = [ActivityModePair(a, m) for a, m in raw["candidates"]]
            else:
                cands = [ActivityGroup(tuple(ActivityModePair(a, m) for a, m in g))
                         for g in raw["candidates"]]
            out.append(DecisionSituation.build(raw["kind"], inst, state, cands))
        return cls(tuple(out))

    @classmethod
    def from_json(cls, text: str, instances: Mapping[str, ProjectInstance]) -> "SituationSet":
        return cls.from_dict(json.loads(text), instances)


def _decision_points(instance: ProjectInstance, reference: RulePair, rng,
                     group_cap: int) -> list[tuple[ProjectState, list, list]]:
    result = simulate(instance, reference, rng, group_cap=group_cap, trace=True)
    points = []
    for rec in result.decision_trace:
        state = ProjectState(
            rec["time"], frozenset(rec["finished"]), dict(rec["running"]),
            tuple(rec["available"]))
        pairs = [ActivityModePair(a, m) for a, m in rec["eligible"]]
        groups = [ActivityGroup(tuple(ActivityModePair(a, m) for a, m in g))
                  for g in rec["groups"]]
        points.append((state, pairs, groups))
    return points


def sample_situations(instances: Sequence[ProjectInstance], reference: RulePair, per_kind: int,
                      min_candidates: int, rng: np.random.Generator,
                      group_cap: int = DEFAULT_GROUP_CAP) -> SituationSet:
    """Sample ``per_kind`` ordering and ``per_kind`` group situations.

    Decision points come from traced reference-rule runs over ``instances``.
    When too few points of a kind qualify, that kind's candidate threshold
    is relaxed one step at a time down to 2 before giving up.
    """
    if per_kind < 1:
        raise ValueError("per_kind must be at least 1")
    points = []
    for inst in instances:
        for state, pairs, groups in _decision_points(inst, reference, rng, group_cap):
            points.append((inst, state, pairs, groups))

    pools = {}
    for kind, slot in ((ORDERING, 2), (GROUP, 3)):
        threshold = min_candidates
        while True:
            qualifying = [p for p in points if len(p[slot]) >= threshold]
            if len(qualifying) >= per_kind or threshold <= 2:
                break
            threshold -= 1
        pools[kind] = qualifying
    short = {k: len(v) for k, v in pools.items() if len(v) < per_kind}
    if short:
        kind = min(short, key=lambda k: (short[k], k != ORDERING))
        label = "ordering" if kind == ORDERING else "group_selection"
        raise SamplingError(
            f"only {short[kind]} {label} decision points have >= 2 candidates; "
            f"{per_kind} are required")

    sits = []
    for kind, slot in ((ORDERING, 2), (GROUP, 3)):
        pool = pools[kind]
        for i in np.sort(rng.choice(len(pool), size=per_kind, replace=False)).tolist():
            sits.append(DecisionSituation.build(kind, pool[i][0], pool[i][1], pool[i][slot]))
    return SituationSet(tuple(sits))


def characterise(individual: RulePair, situations: SituationSet, backend=None) -> np.ndarray:
    """Concatenated competition-rank vector of ``individual`` (int32)."""
    return characterise_many([individual], situations, backend)[0]


def characterise_many(individuals: Sequence[RulePair], situations: SituationSet,
                      backend=None) -> np.ndarray:
    """PC vectors of many individuals as the rows of one int32 matrix."""
    return characterise_keyed(individuals, situations, backend)[0]


def characterise_keyed(individuals: Sequence[RulePair], situations: SituationSet,
                       backend=None) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """PC matrix plus one hashable key per individual.

    Two individuals get equal keys exactly when their PC vectors are equal,
    which makes deduplication a dictionary lookup. Keys are only meaningful
    while ``situations`` is alive and for the duration of the call site.
    """
    o = situations.tree_rows([p.ordering for p in individuals], ORDERING, backend)
    g = situations.tree_rows([p.group for p in individuals], GROUP, backend)
    if not individuals:
        return np.empty((0, situations.pc_length), dtype=np.int32), []
    split = len(o[0])
    pcs = np.empty((len(individuals), split + len(g[0])), dtype=np.int32)
    pcs[:, :split] = o
    pcs[:, split:] = g
    return pcs, [(id(a), id(b)) for a, b in zip(o, g)]


def dedup_key(pc: np.ndarray) -> bytes:
    return np.ascontiguousarray(pc, dtype=np.int32).tobytes()
