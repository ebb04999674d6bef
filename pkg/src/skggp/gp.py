"""Evolutionary loop for KGGP and its surrogate-assisted variant SKGGP.

Random streams are derived from ``SeedSequence(master_seed, spawn_key=(tag, ...))``
so each generation's training set, breeding and situation sampling are
independent of evaluation order and thread count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .backend import get_backend
from .heuristics import RulePair, reference_rules
from .instance import ConfigError, ProjectInstance, ScenarioConfig, generate_instance, \
    lower_bound, sample_durations
from .phenotype import SituationSet, characterise, characterise_keyed, dedup_key, \
    sample_situations
from .simulator import DEFAULT_GROUP_CAP
from .surrogate import SurrogateDatabase, selection_order
from .trees import GROUP, ORDERING, ExpressionTree, generate, ramped_half_and_half

TAG_INIT = 0
TAG_BREED = 1
TAG_TRAIN = 2
TAG_SITUATIONS = 3
TAG_TEST = 4

INIT_DEDUP_RETRIES = 50
OPERATOR_RETRIES = 10

LOG_COLUMNS = ("gen", "best_train_fitness", "best_test_fitness", "full_evals_cumulative",
               "wallclock_eval_s", "wallclock_surrogate_s", "unique_offspring",
               "filled_duplicates")


def stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class AlgorithmConfig:
    population_size: int = 50
    generations: int = 30
    offspring_multiplier: float = 1.0
    crossover_rate: float = 0.85
    mutation_rate: float = 0.10
    tournament_size: int = 7
    surrogate_enabled: bool = False
    dedup_enabled: bool = False
    elitism_count: int = 1
    master_seed: int = 0
    max_depth: int = 8
    init_min_depth: int = 2
    init_max_depth: int = 6
    mutation_max_depth: int = 4
    situations_per_kind: int = 10
    min_candidates: int = 10
    situation_replications: int = 10
    group_cap: int = DEFAULT_GROUP_CAP
    threads: int = 1

    def __post_init__(self) -> None:
        if self.population_size < 1 or self.generations < 1:
            raise ConfigError("population_size and generations must be positive")
        if self.offspring_multiplier < 1:
            raise ConfigError("offspring_multiplier must be at least 1")
        if min(self.crossover_rate, self.mutation_rate) < 0 or \
                self.crossover_rate + self.mutation_rate > 1 + 1e-12:
            raise ConfigError("crossover_rate + mutation_rate must lie in [0, 1]")
        if self.tournament_size < 1:
            raise ConfigError("tournament_size must be positive")
        if not 0 <= self.elitism_count < self.population_size:
            raise ConfigError("elitism_count must lie in [0, population_size)")
        if not 0 <= self.init_min_depth <= self.init_max_depth <= self.max_depth:
            raise ConfigError("need 0 <= init_min_depth <= init_max_depth <= max_depth")
        if self.situations_per_kind < 1 or self.min_candidates < 2 or \
                self.situation_replications < 1:
            raise ConfigError("situations_per_kind >= 1 and min_candidates >= 2 required")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    @property
    def offspring_count(self) -> int:
        """Intermediate offspring per generation: |P| without the surrogate, round(k|P|) with it."""
        if not self.surrogate_enabled:
            return self.population_size
        return max(self.population_size,
                   int(math.floor(self.offspring_multiplier * self.population_size + 0.5)))

    @property
    def needs_pc(self) -> bool:
        return self.surrogate_enabled or self.dedup_enabled

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AlgorithmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"algorithm: unknown keys {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"algorithm: {exc}") from None

    @classmethod
    def kggp(cls, **kw) -> "AlgorithmConfig":
        return cls(surrogate_enabled=False, dedup_enabled=False, **kw)

    @classmethod
    def skggp(cls, k: float, **kw) -> "AlgorithmConfig":
        return cls(offspring_multiplier=k, surrogate_enabled=True, dedup_enabled=True, **kw)


@dataclass(frozen=True, eq=False)
class EvaluationSet:
    """Instances with pre-drawn realised durations and their lower bounds."""

    instances: tuple[ProjectInstance, ...]
    durations: tuple[np.ndarray, ...]
    bounds: tuple[int, ...]
    seeds: tuple[int, ...] = ()

    @classmethod
    def build(cls, instances: Sequence[ProjectInstance], seeds: Sequence[int]) -> "EvaluationSet":
        durs = tuple(sample_durations(inst, s) for inst, s in zip(instances, seeds))
        return cls(tuple(instances), durs, tuple(lower_bound(i) for i in instances), tuple(seeds))

    def __len__(self) -> int:
        return len(self.instances)


def _entropy(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=tuple(key)).generate_state(1)[0])


def training_set(scenario: ScenarioConfig, master_seed: int, generation: int) -> EvaluationSet:
    """The instances and duration seeds used for fitness in one generation."""
    insts, seeds = [], []
    for i in range(scenario.instances_per_evaluation):
        inst_seed = np.random.SeedSequence(master_seed, spawn_key=(TAG_TRAIN, generation, i, 0))
        insts.append(generate_instance(scenario, inst_seed, f"train-g{generation}-{i}"))
        seeds.append(_entropy(master_seed, TAG_TRAIN, generation, i, 1))
    return EvaluationSet.build(insts, seeds)


def holdout_set(scenario: ScenarioConfig, test_seed: int, count: int = 10) -> EvaluationSet:
    """Fixed held-out instances and durations.

    Built from a separate tag so it never coincides with a training stream.
    """
    insts, seeds = [], []
    for i in range(count):
        inst_seed = np.random.SeedSequence(test_seed, spawn_key=(TAG_TEST, i, 0))
        insts.append(generate_instance(scenario, inst_seed, f"test-{i}"))
        seeds.append(_entropy(test_seed, TAG_TEST, i, 1))
    return EvaluationSet.build(insts, seeds)


def full_fitness(individual: RulePair, evaluation: EvaluationSet, backend=None,
                 group_cap: int = DEFAULT_GROUP_CAP) -> float:
    """Mean of makespan / lower bound over the evaluation set (lower is better)."""
    be = backend or get_backend()
    total = 0.0
    for inst, dur, lb in zip(evaluation.instances, evaluation.durations, evaluation.bounds):
        ms, _ = be.simulate(inst.arrays, dur, individual.ordering, individual.group, group_cap)
        total += ms / lb
    return total / len(evaluation)


@dataclass
class Population:
    members: list[RulePair]
    generation_index: int = 0
    evaluation_seeds: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.members)

    @property
    def evaluated(self) -> bool:
        return all(m.fitness is not None for m in self.members)

    def best(self) -> RulePair:
        return self.members[self.ranked()[0]]

    def ranked(self) -> list[int]:
        return selection_order([m.fitness for m in self.members])


class Evaluator:
    """Full fitness evaluation with a budget counter and optional thread pool."""

    def __init__(self, threads: int = 1, backend=None, group_cap: int = DEFAULT_GROUP_CAP):
        self.backend = backend or get_backend()
        self.threads = threads
        self.group_cap = group_cap
        self.count = 0

    def evaluate(self, individuals: Sequence[RulePair], evaluation: EvaluationSet,
                 count: bool = True) -> list[float]:
        def one(ind: RulePair) -> float:
            return full_fitness(ind, evaluation, self.backend, self.group_cap)

        if self.threads > 1 and len(individuals) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                values = list(pool.map(one, individuals))
        else:
            values = [one(ind) for ind in individuals]
        if count:
            self.count += len(individuals)
        return values

    def assign(self, individuals: Sequence[RulePair], evaluation: EvaluationSet) -> None:
        for ind, f in zip(individuals, self.evaluate(individuals, evaluation)):
            ind.fitness = f


def _random_pair(rng: np.random.Generator, config: AlgorithmConfig) -> RulePair:
    return RulePair(
        ramped_half_and_half(rng, ORDERING, config.init_min_depth, config.init_max_depth),
        ramped_half_and_half(rng, GROUP, config.init_min_depth, config.init_max_depth))


def init_population(config: AlgorithmConfig, situations: Optional[SituationSet] = None,
                    rng: Optional[np.random.Generator] = None, backend=None) -> Population:
    """Ramped half-and-half population.

    With ``dedup_enabled`` each PC duplicate is regenerated up to 50 times
    and kept if it is still a duplicate; every member then carries its PC.
    """
    if rng is None:
        rng = stream(config.master_seed, TAG_INIT)
    members = [_random_pair(rng, config) for _ in range(config.population_size)]
    if config.dedup_enabled:
        if situations is None:
            raise ValueError("dedup needs a situation set")
        members = dedup_members(members, situations, rng, config, backend)
    return Population(members, 0)


def dedup_members(members: list[RulePair], situations: SituationSet, rng, config,
                  backend=None, retries: int = INIT_DEDUP_RETRIES) -> list[RulePair]:
    seen: set[bytes] = set()
    out = []
    for ind in members:
        pc = characterise(ind, situations, backend)
        tries = 0
        while dedup_key(pc) in seen and tries < retries:
            ind = _random_pair(rng, config)
            pc = characterise(ind, situations, backend)
            tries += 1
        ind.pc = pc
        seen.add(dedup_key(pc))
        out.append(ind)
    return out


def tournament(pop: Population, rng: np.random.Generator, size: int) -> RulePair:
    """Best of ``size`` uniform draws (with replacement); the earliest draw wins ties."""
    picks = rng.integers(0, len(pop), size)
    best = int(picks[0])
    for p in picks[1:]:
        if pop.members[int(p)].fitness < pop.members[best].fitness:
            best = int(p)
    return pop.members[best]


def subtree_crossover(a: ExpressionTree, b: ExpressionTree, rng: np.random.Generator,
                      max_depth: int) -> tuple[ExpressionTree, ExpressionTree]:
    """Swap random subtrees; each child over the depth limit is retried, then falls back to its parent."""
    best = [None, None]
    for _ in range(OPERATOR_RETRIES):
        i = int(rng.integers(len(a)))
        j = int(rng.integers(len(b)))
        ie, je = a.subtree_end(i), b.subtree_end(j)
        c1 = a.replace(i, ie, b.tokens[j:je])
        c2 = b.replace(j, je, a.tokens[i:ie])
        if best[0] is None and c1.depth <= max_depth:
            best[0] = c1
        if best[1] is None and c2.depth <= max_depth:
            best[1] = c2
        if best[0] is not None and best[1] is not None:
            break
    return (best[0] or a, best[1] or b)


def subtree_mutation(tree: ExpressionTree, rng: np.random.Generator, max_depth: int,
                     sub_max_depth: int) -> ExpressionTree:
    for _ in range(OPERATOR_RETRIES):
        i = int(rng.integers(len(tree)))
        sub = generate(rng, tree.role, 0, sub_max_depth, "grow")
        child = tree.replace(i, tree.subtree_end(i), sub.tokens)
        if child.depth <= max_depth:
            return child
    return tree


def breed(parents: Population, count: int, rng: np.random.Generator,
          config: AlgorithmConfig) -> list[RulePair]:
    """``count`` offspring in generation order.

    Offspring are produced sequentially from one stream, so the first ``m``
    of a larger brood equal a brood of size ``m`` from the same stream.
    """
    if not parents.evaluated:
        raise ValueError("parents must be evaluated before breeding")
    out: list[RulePair] = []
    cx, mut = config.crossover_rate, config.mutation_rate
    while len(out) < count:
        r = rng.random()
        t = int(rng.integers(2))
        if r < cx:
            p1 = tournament(parents, rng, config.tournament_size)
            p2 = tournament(parents, rng, config.tournament_size)
            c1, c2 = subtree_crossover(p1.trees[t], p2.trees[t], rng, config.max_depth)
            out.append(p1.with_tree(t, c1))
            if len(out) < count:
                out.append(p2.with_tree(t, c2))
        elif r < cx + mut:
            p = tournament(parents, rng, config.tournament_size)
            child = subtree_mutation(p.trees[t], rng, config.max_depth, config.mutation_max_depth)
            out.append(p.with_tree(t, child))
        else:
            out.append(tournament(parents, rng, config.tournament_size).fresh())
    return out


@dataclass
class GenerationStats:
    unique_offspring: int = 0
    filled_duplicates: int = 0
    surrogate_seconds: float = 0.0


def select_offspring(offspring: list[RulePair], db: Optional[SurrogateDatabase], target: int,
                     situations: SituationSet, backend=None) -> tuple[list[RulePair], GenerationStats]:
    """PC dedup (first occurrence kept), 1-NN estimation and top-``target`` preselection.

    When fewer than ``target`` offspring are unique, the shortfall is filled
    with duplicates in generation order.
    """
    t0 = time.perf_counter()
    pcs, keys = characterise_keyed(offspring, situations, backend)
    first: dict[tuple, int] = {}
    unique, dups = [], []
    for i, key in enumerate(keys):
        if first.setdefault(key, i) == i:
            unique.append(i)
        else:
            dups.append(i)
    if db is not None and len(unique) > target:
        est = db.estimate_many(pcs[unique], backend)
        picked = [unique[i] for i in selection_order(est)[:target]]
    else:
        picked = unique[:target]
    filled = max(0, target - len(picked))
    picked += dups[:filled]
    chosen = [offspring[i] for i in picked]
    for i, ind in zip(picked, chosen):
        ind.pc = pcs[i]
    stats = GenerationStats(len(unique), filled, time.perf_counter() - t0)
    return chosen, stats


@dataclass
class RunResult:
    log: list[dict]
    best: RulePair
    situations: Optional[SituationSet]
    full_evaluations: int

    def curve(self) -> list[tuple[int, float]]:
        """Best-so-far test fitness against cumulative full evaluations."""
        pts, best = [], math.inf
        for row in self.log:
            best = min(best, row["best_test_fitness"])
            pts.append((row["full_evals_cumulative"], best))
        return pts


class Run:
    """One evolutionary run; step through with :meth:`initialise` and :meth:`step`."""

    def __init__(self, config: AlgorithmConfig, scenario: ScenarioConfig,
                 test: Optional[EvaluationSet] = None, backend=None,
                 situations: Optional[SituationSet] = None):
        self.config = config
        self.scenario = scenario
        self.test = test
        self.backend = backend or get_backend()
        self.evaluator = Evaluator(config.threads, self.backend, config.group_cap)
        self.situations = situations
        self.population: Optional[Population] = None
        self.log: list[dict] = []
        self._test_cache: dict[tuple, float] = {}

    def _training(self, g: int) -> EvaluationSet:
        return training_set(self.scenario, self.config.master_seed, g)

    def sample_situations(self, train: EvaluationSet) -> SituationSet:
        rng = stream(self.config.master_seed, TAG_SITUATIONS)
        inst = train.instances[0]
        return sample_situations([inst] * self.config.situation_replications, reference_rules(),
                                 self.config.situations_per_kind, self.config.min_candidates,
                                 rng, self.config.group_cap)

    def test_fitness(self, ind: RulePair) -> float:
        if self.test is None:
            return math.nan
        key = ind.key()
        if key not in self._test_cache:
            self._test_cache[key] = self.evaluator.evaluate([ind], self.test, count=False)[0]
        return self._test_cache[key]

    def _record(self, eval_s: float, stats: GenerationStats) -> dict:
        pop = self.population
        best = pop.best()
        row = {
            "gen": pop.generation_index,
            "best_train_fitness": best.fitness,
            "best_test_fitness": self.test_fitness(best),
            "full_evals_cumulative": self.evaluator.count,
            "wallclock_eval_s": eval_s,
            "wallclock_surrogate_s": stats.surrogate_seconds,
            "unique_offspring": stats.unique_offspring,
            "filled_duplicates": stats.filled_duplicates,
        }
        self.log.append(row)
        return row

    def initialise(self) -> dict:
        train = self._training(0)
        stats = GenerationStats()
        if self.config.needs_pc and self.situations is None:
            self.situations = self.sample_situations(train)
        t0 = time.perf_counter()
        pop = init_population(self.config, self.situations, backend=self.backend)
        stats.surrogate_seconds = time.perf_counter() - t0 if self.config.dedup_enabled else 0.0
        stats.unique_offspring = len({dedup_key(m.pc) for m in pop.members}) \
            if self.config.dedup_enabled else len(pop)
        pop.evaluation_seeds = train.seeds
        t0 = time.perf_counter()
        self.evaluator.assign(pop.members, train)
        self.population = pop
        return self._record(time.perf_counter() - t0, stats)

    def breed(self, g: int, count: Optional[int] = None) -> list[RulePair]:
        n = self.config.offspring_count if count is None else count
        return breed(self.population, n, stream(self.config.master_seed, TAG_BREED, g),
                     self.config)

    def step(self) -> dict:
        cfg = self.config
        pop = self.population
        g = pop.generation_index + 1
        train = self._training(g)
        offspring = self.breed(g)
        target = cfg.population_size
        # compile every offspring up front so neither timer pays for it
        for child in offspring:
            child.ordering.program
            child.group.program

        if cfg.surrogate_enabled:
            if any(m.pc is None for m in pop.members):
                for m in pop.members:
                    m.pc = characterise(m, self.situations, self.backend)
            db = SurrogateDatabase.from_population(pop)
            chosen, stats = select_offspring(offspring, db, target, self.situations, self.backend)
        else:
            chosen, stats = offspring[:target], GenerationStats(len(offspring[:target]), 0, 0.0)

        elites = []
        for i in pop.ranked()[:cfg.elitism_count]:
            elite = pop.members[i].fresh()
            elite.pc = pop.members[i].pc
            elites.append(elite)
        t0 = time.perf_counter()
        self.evaluator.assign(elites + chosen, train)
        eval_s = time.perf_counter() - t0

        keep = selection_order([c.fitness for c in chosen])[:target - cfg.elitism_count]
        self.population = Population(elites + [chosen[i] for i in keep], g, train.seeds)
        return self._record(eval_s, stats)

    def run(self, on_generation: Optional[Callable[[dict], None]] = None) -> RunResult:
        row = self.initialise()
        if on_generation:
            on_generation(row)
        for _ in range(self.config.generations):
            row = self.step()
            if on_generation:
                on_generation(row)
        return self.result()

    def result(self) -> RunResult:
        return RunResult(self.log, self.population.best(), self.situations, self.evaluator.count)


def evolve(config: AlgorithmConfig, scenario: ScenarioConfig,
           test: Optional[EvaluationSet] = None, backend=None,
           situations: Optional[SituationSet] = None) -> RunResult:
    return Run(config, scenario, test, backend, situations).run()


def expected_evaluations(config: AlgorithmConfig, generations: Optional[int] = None) -> int:
    g = config.generations if generations is None else generations
    return config.population_size * (g + 1) + g * config.elitism_count
