"""Compare the compiled and pure-Python kernels on the hot paths.

    python benchmarks/bench_kernels.py [--repeat N]

Each line reports the best-of-N wall time per call for both backends and
the speed-up. The workloads match one generation of the default desk-scale
setting (n=30, 3 modes, 4 resources, |P|=50).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from skggp.backend import compiled_available, get_backend
from skggp.gp import AlgorithmConfig, init_population, training_set
from skggp.heuristics import RulePair, reference_rules
from skggp.instance import ScenarioConfig, generate_instance, sample_durations
from skggp.phenotype import sample_situations
from skggp.trees import GROUP, ORDERING, generate


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads():
    sc = ScenarioConfig()
    inst = generate_instance(sc, 1, "bench")
    dur = sample_durations(inst, 2)
    rng = np.random.default_rng(3)
    rules = [RulePair(generate(rng, ORDERING, 2, 6, "grow"), generate(rng, GROUP, 2, 6, "grow"))
             for _ in range(50)]
    sset = sample_situations([inst] * 10, reference_rules(), 10, 10, np.random.default_rng(4))
    attrs, ptr = sset.ordering_block
    pcs = rng.integers(1, 30, size=(50, sset.pc_length)).astype(np.int32)
    queries = rng.integers(1, 30, size=(100, sset.pc_length)).astype(np.int32)
    train = training_set(sc, 5, 0)
    pop = init_population(AlgorithmConfig(population_size=50))

    def simulate(be):
        for r in rules[:10]:
            be.simulate(inst.arrays, dur, r.ordering, r.group, 64)

    def rank(be):
        be.rank_matrix([r.ordering for r in rules], attrs, ptr)

    def nearest(be):
        be.nearest(pcs, queries)

    def evaluate(be):
        for ind in pop.members[:10]:
            for i, d in zip(train.instances, train.durations):
                be.simulate(i.arrays, d, ind.ordering, ind.group, 64)

    return {
        "simulate x10 rules": simulate,
        "rank 50 trees over ordering situations": rank,
        "1-NN 100 queries vs 50 entries": nearest,
        "full fitness x10 (5 instances each)": evaluate,
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    py, cy = get_backend("python"), get_backend("cython")
    print(f"{'workload':42s} {'python s':>10s} {'cython s':>10s} {'speed-up':>9s}")
    for name, fn in workloads().items():
        tp = best_time(lambda: fn(py), args.repeat)
        tc = best_time(lambda: fn(cy), args.repeat)
        print(f"{name:42s} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
