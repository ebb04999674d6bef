import math

import numpy as np
import pytest

from skggp.gp import (TAG_BREED, TAG_INIT, AlgorithmConfig, EvaluationSet, Evaluator, Population,
                      Run, breed, dedup_members, evolve, expected_evaluations, full_fitness, holdout_set,
                      init_population, select_offspring, stream, training_set)
from skggp.heuristics import RulePair, reference_rules
from skggp.instance import ConfigError, ScenarioConfig, generate_instance, sample_durations
from skggp.phenotype import characterise, characterise_many, dedup_key, sample_situations
from skggp.surrogate import SurrogateDatabase
from skggp.trees import GROUP, ORDERING, generate, parse

from conftest import make_instance, mode

TINY = ScenarioConfig(activity_count=10, modes_per_activity=2, resource_type_count=2,
                      instances_per_evaluation=2)


def tiny(**kw):
    base = dict(population_size=10, generations=3, tournament_size=3, situations_per_kind=3,
                min_candidates=4, situation_replications=2)
    base.update(kw)
    return AlgorithmConfig(**base)


@pytest.fixture(scope="module")
def sset():
    inst = generate_instance(ScenarioConfig(), 11, "pc")
    return sample_situations([inst] * 3, reference_rules(), 5, 8, np.random.default_rng(0))


def evaluated_population(rng, size=10):
    members = [RulePair(generate(rng, ORDERING, 1, 4, "grow"), generate(rng, GROUP, 1, 4, "grow"))
               for _ in range(size)]
    for i, m in enumerate(members):
        m.fitness = 1.0 + 0.01 * i
    return Population(members, 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        AlgorithmConfig(offspring_multiplier=0.5)
    with pytest.raises(ConfigError):
        AlgorithmConfig(crossover_rate=0.9, mutation_rate=0.2)
    with pytest.raises(ConfigError):
        AlgorithmConfig(population_size=3, elitism_count=3)
    with pytest.raises(ConfigError):
        AlgorithmConfig.from_dict({"population": 10})
    assert AlgorithmConfig.skggp(2, population_size=50).offspring_count == 100
    assert AlgorithmConfig.skggp(1.5, population_size=5).offspring_count == 8  # 7.5 rounds up
    assert AlgorithmConfig.kggp(population_size=50).offspring_count == 50


def test_full_fitness_arithmetic():
    insts = [make_instance([[]], [[mode(d)]], [1], f"one{d}") for d in (10, 12, 14, 16, 18)]
    durs = tuple(sample_durations(i, 0) for i in insts)
    ev = EvaluationSet(tuple(insts), durs, (10,) * 5)
    assert full_fitness(reference_rules(), ev) == pytest.approx(1.4)


def test_full_fitness_serial_oracle(backend):
    # two independent activities that cannot overlap: makespan is the serial sum,
    # while the resource-free bound is the longer duration
    inst = make_instance([[], []], [[mode(3)], [mode(5)]], [1], "serial")
    ev = EvaluationSet.build([inst], [0])
    assert ev.bounds == (5,)
    assert full_fitness(reference_rules(), ev, backend) == 8 / 5


def test_training_and_holdout_sets():
    a = training_set(TINY, 1, 0)
    b = training_set(TINY, 1, 0)
    c = training_set(TINY, 1, 1)
    assert len(a) == 2 and a.seeds == b.seeds and a.seeds != c.seeds
    assert [i.to_json() for i in a.instances] == [i.to_json() for i in b.instances]
    t = holdout_set(TINY, 1, 3)
    assert len(t) == 3 and not set(t.seeds) & (set(a.seeds) | set(c.seeds))
    assert all(lb >= 1 for lb in a.bounds)


def test_init_population_deterministic():
    cfg = tiny()
    p1 = init_population(cfg)
    p2 = init_population(cfg)
    assert len(p1) == 10
    assert [m.key() for m in p1.members] == [m.key() for m in p2.members]
    assert all(m.ordering.role == ORDERING and m.group.role == GROUP for m in p1.members)
    assert all(m.ordering.depth <= cfg.init_max_depth for m in p1.members)
    assert all(m.pc is None for m in p1.members)


def test_init_dedup_regenerates_clones(sset):
    cfg = tiny(dedup_enabled=True)
    clone = RulePair(parse("(add exp_dur dmd_max)"), parse("(sub g_slack g_sum_dur)", GROUP))
    members = dedup_members([clone.clone() for _ in range(10)], sset,
                            stream(0, TAG_INIT), cfg)
    keys = {dedup_key(m.pc) for m in members}
    assert len(keys) >= 2
    pop = init_population(cfg, sset)
    assert all(m.pc is not None for m in pop.members)
    with pytest.raises(ValueError):
        init_population(cfg)


def test_breed_depth_limit_stress():
    rng = np.random.default_rng(1)
    members = [RulePair(generate(rng, ORDERING, 8, 8, "full"), generate(rng, GROUP, 8, 8, "full"))
               for _ in range(6)]
    for m in members:
        m.fitness = float(rng.random())
    pop = Population(members)
    cfg = AlgorithmConfig(tournament_size=2, crossover_rate=0.6, mutation_rate=0.4)
    kids = breed(pop, 10_000, np.random.default_rng(2), cfg)
    assert len(kids) == 10_000
    assert max(max(k.ordering.depth, k.group.depth) for k in kids) <= 8


def test_crossover_of_identical_parents_reuses_material():
    rng = np.random.default_rng(3)
    parent = RulePair(generate(rng, ORDERING, 3, 4, "full"), generate(rng, GROUP, 3, 4, "full"))
    parent.fitness = 1.0
    pop = Population([parent])
    kids = breed(pop, 200, np.random.default_rng(4), AlgorithmConfig(crossover_rate=1.0,
                                                                     mutation_rate=0.0))
    for k in kids:
        for kid_tree, par_tree in zip(k.trees, parent.trees):
            assert set(kid_tree.tokens) <= set(par_tree.tokens)


def test_mutation_changes_one_subtree_of_one_tree():
    rng = np.random.default_rng(5)
    parent = RulePair(generate(rng, ORDERING, 3, 4, "full"), generate(rng, GROUP, 3, 4, "full"))
    parent.fitness = 1.0
    kids = breed(Population([parent]), 300, np.random.default_rng(6),
                 AlgorithmConfig(crossover_rate=0.0, mutation_rate=1.0))
    for k in kids:
        same = [kt.tokens == pt.tokens for kt, pt in zip(k.trees, parent.trees)]
        assert sum(same) >= 1
        for kt, pt in zip(k.trees, parent.trees):
            if kt.tokens == pt.tokens:
                continue
            p, c = pt.tokens, kt.tokens
            # some subtree [i, end) of the parent was replaced; the rest is untouched
            assert any(c[:i] == p[:i] and c[len(c) - (len(p) - pt.subtree_end(i)):] ==
                       p[pt.subtree_end(i):] for i in range(len(p)))


def test_breed_prefix_property():
    pop = evaluated_population(np.random.default_rng(7))
    cfg = AlgorithmConfig(tournament_size=3)
    a = breed(pop, 25, stream(3, TAG_BREED, 1), cfg)
    b = breed(pop, 10, stream(3, TAG_BREED, 1), cfg)
    assert [x.key() for x in a[:10]] == [x.key() for x in b]


def test_select_offspring_matches_nearest_neighbour_oracle(sset, backend):
    rng = np.random.default_rng(8)
    pop = evaluated_population(rng)
    for m in pop.members:
        m.pc = characterise(m, sset, backend)
    db = SurrogateDatabase.from_population(pop)
    offspring = breed(pop, 20, np.random.default_rng(9), AlgorithmConfig(tournament_size=3))
    chosen, stats = select_offspring(offspring, db, 10, sset, backend)

    pcs = characterise_many(offspring, sset, backend)
    seen, unique = set(), []
    for i, pc in enumerate(pcs):
        if pc.tobytes() not in seen:
            seen.add(pc.tobytes())
            unique.append(i)
    est = {}
    for i in unique:
        d = [int(np.abs(pcs[i].astype(np.int64) - m.pc).sum()) for m in pop.members]
        est[i] = pop.members[int(np.argmin(d))].fitness
    oracle = sorted(unique, key=lambda i: (est[i], i))[:10]
    if len(unique) < 10:
        oracle += [i for i in range(20) if i not in unique][:10 - len(unique)]
    assert [id(c) for c in chosen] == [id(offspring[i]) for i in oracle]
    assert stats.unique_offspring == len(unique)
    assert stats.filled_duplicates == max(0, 10 - len(unique))


def test_select_offspring_k1_is_dedup_order(sset):
    pop = evaluated_population(np.random.default_rng(10))
    offspring = breed(pop, 10, np.random.default_rng(11), AlgorithmConfig(tournament_size=3))
    offspring += [o.fresh() for o in offspring[:3]]  # certain duplicates
    for m in pop.members:
        m.pc = characterise(m, sset)
    db = SurrogateDatabase.from_population(pop)
    chosen, stats = select_offspring(offspring, db, len(offspring), sset)
    keys = [dedup_key(o.pc) for o in offspring]
    first = [i for i, k in enumerate(keys) if keys.index(k) == i]
    dups = [i for i in range(len(keys)) if i not in first]
    assert [id(c) for c in chosen] == [id(offspring[i]) for i in first + dups]
    assert stats.filled_duplicates == len(dups)


@pytest.mark.parametrize("k,pop,gens,elite", [(1.0, 10, 3, 1), (2.0, 10, 3, 1), (3.0, 8, 2, 0),
                                               (1.5, 12, 2, 2)])
def test_budget_accounting(k, pop, gens, elite):
    for cfg in (tiny(population_size=pop, generations=gens, elitism_count=elite),
                AlgorithmConfig.skggp(k, population_size=pop, generations=gens,
                                      elitism_count=elite, tournament_size=3,
                                      situations_per_kind=3, min_candidates=4,
                                      situation_replications=2)):
        res = evolve(cfg, TINY)
        assert res.full_evaluations == pop * (gens + 1) + elite * gens
        assert res.full_evaluations == expected_evaluations(cfg)
        assert [r["full_evals_cumulative"] for r in res.log] == \
            [pop + g * (pop + elite) for g in range(gens + 1)]


def test_kggp_matches_plain_loop():
    cfg = tiny(generations=4)
    res = evolve(cfg, TINY)

    # the same generational loop written without any surrogate machinery
    ev = Evaluator()
    pop = init_population(cfg)
    ev.assign(pop.members, training_set(TINY, cfg.master_seed, 0))
    bests = [min(m.fitness for m in pop.members)]
    for g in range(1, cfg.generations + 1):
        train = training_set(TINY, cfg.master_seed, g)
        kids = breed(pop, cfg.population_size, stream(cfg.master_seed, TAG_BREED, g), cfg)
        elite = min(pop.members, key=lambda m: m.fitness).fresh()
        ev.assign([elite] + kids, train)
        kids.sort(key=lambda m: m.fitness)
        pop = Population([elite] + kids[:cfg.population_size - 1], g)
        bests.append(min(m.fitness for m in pop.members))
    assert [r["best_train_fitness"] for r in res.log] == bests


def test_elite_survives_into_next_generation():
    cfg = tiny(generations=3)
    run = Run(cfg, TINY)
    run.initialise()
    for _ in range(cfg.generations):
        best = run.population.best().key()
        run.step()
        assert best in {m.key() for m in run.population.members}


def test_reproducible_trajectory_and_monotone_test_curve():
    cfg = AlgorithmConfig.skggp(2, population_size=10, generations=3, tournament_size=3,
                                situations_per_kind=3, min_candidates=4, situation_replications=2)
    test = holdout_set(TINY, 99, 3)
    a = evolve(cfg, TINY, test)
    b = evolve(cfg, TINY, test)
    cols = ("best_train_fitness", "best_test_fitness", "full_evals_cumulative",
            "unique_offspring", "filled_duplicates")
    assert [[r[c] for c in cols] for r in a.log] == [[r[c] for c in cols] for r in b.log]
    curve = [f for _, f in a.curve()]
    assert all(y <= x for x, y in zip(curve, curve[1:]))
    assert all(r["wallclock_surrogate_s"] >= 0 for r in a.log)


def test_test_fitness_is_fixed():
    test = holdout_set(TINY, 5, 3)
    run = Run(tiny(), TINY, test)
    ind = reference_rules()
    assert run.test_fitness(ind) == run.test_fitness(ind.clone())
    assert run.evaluator.count == 0
    assert math.isnan(Run(tiny(), TINY).test_fitness(ind))


def test_backends_give_same_run():
    from skggp.backend import compiled_available, get_backend
    if not compiled_available():
        pytest.skip("compiled kernels not built")
    cfg = AlgorithmConfig.skggp(2, population_size=10, generations=2, tournament_size=3,
                                situations_per_kind=3, min_candidates=4, situation_replications=2)
    a = evolve(cfg, TINY, backend=get_backend("python"))
    b = evolve(cfg, TINY, backend=get_backend("cython"))
    assert [r["best_train_fitness"] for r in a.log] == [r["best_train_fitness"] for r in b.log]
