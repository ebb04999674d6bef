"""Command-line entry point: ``skggp <verb> CONFIG [options]``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 resume divergence,
4 situation sampling failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .experiment import ExperimentPlan, ResumeDivergence, atomic_write, load_config, \
    replay_quality, run_plan, write_replay, write_reports
from .gp import TAG_SITUATIONS, AlgorithmConfig, stream
from .heuristics import reference_rules
from .instance import ConfigError, ProjectInstance, generate_instance, lower_bound
from .phenotype import SamplingError, sample_situations
from .simulator import simulate, trace_lines

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_SAMPLING = 0, 1, 2, 3, 4
TAG_GENERATE = 6

log = logging.getLogger("skggp")


def _plan(args) -> ExperimentPlan:
    return ExperimentPlan.from_config(load_config(args.config), seed=args.seed, output=args.out,
                                      threads=args.threads)


def cmd_generate(args) -> int:
    plan = _plan(args)
    out = Path(plan.output_dir) / "instances"
    for i in range(args.count):
        seed = np.random.SeedSequence(plan.seed, spawn_key=(TAG_GENERATE, i))
        inst = generate_instance(plan.scenario, seed, f"inst-{i:03d}")
        atomic_write(out / f"{inst.id}.json", inst.to_json() + "\n")
        log.info("%s: n=%d lower bound %d", inst.id, inst.n, lower_bound(inst))
    print(f"wrote {args.count} instances to {out}")
    return EXIT_OK


def _pc_settings(plan: ExperimentPlan) -> AlgorithmConfig:
    for _, cfg in plan.algorithms:
        if cfg.needs_pc:
            return cfg
    return plan.algorithms[0][1]


def cmd_sample_situations(args) -> int:
    plan = _plan(args)
    cfg = _pc_settings(plan)
    out = Path(plan.output_dir)
    if args.instance:
        inst = ProjectInstance.from_json(Path(args.instance).read_text(encoding="utf-8"))
    else:
        seed = np.random.SeedSequence(plan.seed, spawn_key=(TAG_GENERATE, 0))
        inst = generate_instance(plan.scenario, seed, "inst-000")
        atomic_write(out / "instances" / f"{inst.id}.json", inst.to_json() + "\n")
    rng = stream(plan.seed, TAG_SITUATIONS)
    sset = sample_situations([inst] * cfg.situation_replications, reference_rules(),
                             cfg.situations_per_kind, cfg.min_candidates, rng, cfg.group_cap)
    atomic_write(out / "situations.json", sset.to_json() + "\n")
    if args.trace:
        result = simulate(inst, reference_rules(), stream(plan.seed, TAG_SITUATIONS, 1),
                          group_cap=cfg.group_cap, trace=True)
        atomic_write(args.trace, "".join(line + "\n" for line in trace_lines(result)))
    print(f"wrote {len(sset)} situations (PC length {sset.pc_length}) to {out / 'situations.json'}")
    return EXIT_OK


def cmd_evolve(args) -> int:
    plan = _plan(args)
    if args.workers is not None:
        plan = replace(plan, workers=args.workers)
    paths = run_plan(plan, progress=lambda p: log.info("finished %s", p))
    for label, p in paths.items():
        print(f"{label}: {p}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    plan = _plan(args)
    result = replay_quality(plan, label=args.label, oracle=args.oracle,
                            repetitions=args.repetitions)
    paths = write_replay(plan, result, "_oracle" if args.oracle else "")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_report(args) -> int:
    plan = _plan(args)
    for name, p in write_reports(plan).items():
        print(f"{name}: {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skggp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML or JSON file with [scenario], [algorithm.<label>], [plan]")
        p.add_argument("--seed", type=int, help="override plan.seed")
        p.add_argument("--out", help="override plan.output")
        p.add_argument("--threads", type=int, help="override plan.threads")
        p.set_defaults(func=fn)
        return p

    p = verb("generate", cmd_generate, "write random instances as JSON")
    p.add_argument("--count", type=int, default=1)
    p = verb("sample-situations", cmd_sample_situations, "sample and save a decision-situation bundle")
    p.add_argument("--instance", help="instance JSON to sample from (default: a generated one)")
    p.add_argument("--trace", help="also write the reference run's decision trace as JSON lines")
    p = verb("evolve", cmd_evolve, "run (or resume) every algorithm and repetition of the plan")
    p.add_argument("--workers", type=int, help="override plan.workers (parallel runs)")
    p = verb("analyze", cmd_analyze, "instrumented analyses")
    p.add_argument("--analysis", choices=["surrogate-quality"], required=True)
    p.add_argument("--oracle", action="store_true", help="substitute true fitness for the estimate")
    p.add_argument("--label", help="algorithm to replay (default: the baseline)")
    p.add_argument("--repetitions", type=int, help="replay only the first N repetitions")
    verb("report", cmd_report, "write the comparison, convergence, budget and timing tables")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeDivergence as exc:
        print(f"resume divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except SamplingError as exc:
        print(f"sampling failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
