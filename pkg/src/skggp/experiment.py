"""Experiment plans: repeated runs, resumable output, replay analysis and report tables.

Output layout under ``plan.output_dir``::

    manifest.json                  plan hash and canonical plan
    runs/<label>/rep_000.csv       per-generation run log
    runs/<label>/rep_000.rules     best rule pair as two S-expression lines
    aggregate_<label>.csv          one row per repetition, no wall-clock columns

Every run seed depends only on the plan seed and the repetition index, so
all algorithms of a plan see the same training instances and initial
population stream for a given repetition.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .analysis import ConvergenceCurve, budget_saved_ratio, extra_offspring_gain, \
    timing_report, wilcoxon_signed_rank
from .gp import LOG_COLUMNS, AlgorithmConfig, Run, holdout_set
from .heuristics import RulePair
from .instance import ConfigError, ScenarioConfig
from .phenotype import characterise_many
from .surrogate import SurrogateDatabase, precision_at
from .trees import GROUP, ORDERING, parse, to_sexpr

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

TAG_RUN = 5
AGGREGATE_COLUMNS = ("rep", "run_seed", "final_test_fitness", "last_test_fitness",
                     "last_train_fitness", "full_evaluations", "generations",
                     "mean_unique_offspring", "total_filled_duplicates")
REPLAY_MULTIPLIERS = (1.5, 2.0, 3.0, 4.0)
_LABEL_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.+-]*$")


class ResumeDivergence(RuntimeError):
    """Existing output was produced by a different plan."""


# -- config -------------------------------------------------------------------

def load_config(path) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw.decode("utf-8"))
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def algorithm_from_dict(data: Mapping[str, Any]) -> AlgorithmConfig:
    """AlgorithmConfig from a config table; ``k = <float>`` is shorthand for SKGGP-k."""
    data = dict(data)
    if "k" in data:
        k = data.pop("k")
        if not isinstance(k, (int, float)) or isinstance(k, bool):
            raise ConfigError("algorithm: k must be a number")
        data.setdefault("offspring_multiplier", float(k))
        data.setdefault("surrogate_enabled", True)
        data.setdefault("dedup_enabled", True)
    return AlgorithmConfig.from_dict(data)


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: ScenarioConfig
    algorithms: tuple[tuple[str, AlgorithmConfig], ...]
    repetitions: int = 10
    seed: int = 0
    test_seed: int = 1
    test_instances: int = 10
    output_dir: str = "out"
    threads: int = 1
    workers: int = 1
    baseline: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.algorithms:
            raise ConfigError("plan: at least one [algorithm.<label>] table is required")
        labels = [l for l, _ in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ConfigError("plan: duplicate algorithm labels")
        for l in labels:
            if not _LABEL_RE.match(l):
                raise ConfigError(f"plan: algorithm label {l!r} is not a safe file name")
        if self.repetitions < 1 or self.test_instances < 1:
            raise ConfigError("plan: repetitions and test_instances must be positive")
        if self.threads < 1 or self.workers < 1:
            raise ConfigError("plan: threads and workers must be positive")
        if self.seed < 0 or self.test_seed < 0:
            raise ConfigError("plan: seeds must be non-negative")
        if self.seed == self.test_seed:
            raise ConfigError("plan: test_seed must differ from seed")
        if self.baseline is not None and self.baseline not in labels:
            raise ConfigError(f"plan: baseline {self.baseline!r} is not an algorithm label")

    @property
    def labels(self) -> list[str]:
        return [l for l, _ in self.algorithms]

    def algorithm(self, label: str) -> AlgorithmConfig:
        return dict(self.algorithms)[label]

    @property
    def baseline_label(self) -> str:
        """Explicit baseline, else the first algorithm without the surrogate."""
        if self.baseline is not None:
            return self.baseline
        for label, cfg in self.algorithms:
            if not cfg.surrogate_enabled:
                return label
        return self.algorithms[0][0]

    @classmethod
    def from_config(cls, data: Mapping[str, Any], seed: Optional[int] = None,
                    output: Optional[str] = None, threads: Optional[int] = None) -> "ExperimentPlan":
        unknown = set(data) - {"scenario", "algorithm", "plan"}
        if unknown:
            raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
        try:
            scenario = ScenarioConfig.from_dict(dict(data.get("scenario", {})))
        except TypeError as exc:
            raise ConfigError(f"scenario: {exc}") from None
        algs = data.get("algorithm", {})
        if not isinstance(algs, Mapping):
            raise ConfigError("[algorithm.<label>] tables expected")
        algorithms = []
        for label, table in algs.items():
            if not isinstance(table, Mapping):
                raise ConfigError(f"algorithm.{label}: table expected")
            algorithms.append((str(label), algorithm_from_dict(table)))
        p = dict(data.get("plan", {}))
        keys = {"repetitions", "seed", "test_seed", "test_instances", "output", "threads",
                "workers", "baseline"}
        if set(p) - keys:
            raise ConfigError(f"plan: unknown keys {sorted(set(p) - keys)}")
        if seed is not None:
            p["seed"] = seed
        if output is not None:
            p["output"] = output
        if threads is not None:
            p["threads"] = threads
        if "output" in p:
            p["output_dir"] = str(p.pop("output"))
        for k in ("repetitions", "seed", "test_seed", "test_instances", "threads", "workers"):
            if k in p and (not isinstance(p[k], int) or isinstance(p[k], bool)):
                raise ConfigError(f"plan: {k} must be an integer")
        return cls(scenario, tuple(algorithms), **p)

    def canonical(self) -> dict[str, Any]:
        """Everything that determines results; output location and parallelism are excluded."""
        sc = asdict(self.scenario)
        sc["duration_range"] = list(sc["duration_range"])
        algs = {}
        for label, cfg in self.algorithms:
            d = asdict(cfg)
            d.pop("threads")
            d.pop("master_seed")
            algs[label] = d
        return {
            "scenario": sc,
            "algorithms": algs,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "test_seed": self.test_seed,
            "test_instances": self.test_instances,
        }

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def run_seed(self, rep: int) -> int:
        ss = np.random.SeedSequence(self.seed, spawn_key=(TAG_RUN, rep))
        return int(ss.generate_state(1)[0])

    def run_config(self, label: str, rep: int) -> AlgorithmConfig:
        return replace(self.algorithm(label), master_seed=self.run_seed(rep), threads=self.threads)


# -- file helpers ---------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _cell(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_rules(rules: RulePair) -> str:
    return f"ordering {to_sexpr(rules.ordering)}\ngroup {to_sexpr(rules.group)}\n"


def parse_rules(text: str) -> RulePair:
    trees = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        role, _, body = line.partition(" ")
        if role not in (ORDERING, GROUP):
            raise ValueError(f"expected 'ordering' or 'group', got {role!r}")
        trees[role] = parse(body, role)
    if set(trees) != {ORDERING, GROUP}:
        raise ValueError("a rule file needs one ordering line and one group line")
    return RulePair(trees[ORDERING], trees[GROUP])


def _parse_log(path) -> list[dict[str, Any]]:
    out = []
    for r in read_csv(path):
        out.append({
            "gen": int(r["gen"]),
            "best_train_fitness": float(r["best_train_fitness"]),
            "best_test_fitness": float(r["best_test_fitness"]) if r["best_test_fitness"] else math.nan,
            "full_evals_cumulative": int(r["full_evals_cumulative"]),
            "wallclock_eval_s": float(r["wallclock_eval_s"]),
            "wallclock_surrogate_s": float(r["wallclock_surrogate_s"]),
            "unique_offspring": int(r["unique_offspring"]),
            "filled_duplicates": int(r["filled_duplicates"]),
        })
    return out


# -- running ----------------------------------------------------------------------

def run_path(out: Path, label: str, rep: int) -> Path:
    return out / "runs" / label / f"rep_{rep:03d}.csv"


def _run_complete(plan: ExperimentPlan, label: str, rep: int) -> bool:
    path = run_path(Path(plan.output_dir), label, rep)
    if not path.exists() or not path.with_suffix(".rules").exists():
        return False
    try:
        return len(read_csv(path)) == plan.algorithm(label).generations + 1
    except (OSError, csv.Error, KeyError):
        return False


def run_one(plan: ExperimentPlan, label: str, rep: int) -> Path:
    """Execute one (algorithm, repetition) run and write its log and best rules."""
    cfg = plan.run_config(label, rep)
    test = holdout_set(plan.scenario, plan.test_seed, plan.test_instances)
    result = Run(cfg, plan.scenario, test).run()
    path = run_path(Path(plan.output_dir), label, rep)
    atomic_write(path.with_suffix(".rules"), format_rules(result.best))
    # the log goes last: its presence with a full row count marks the run complete
    atomic_write(path, csv_text(LOG_COLUMNS, result.log))
    return path


def _run_job(args) -> str:
    plan, label, rep = args
    return str(run_one(plan, label, rep))


def check_manifest(plan: ExperimentPlan) -> None:
    """Write the manifest, or verify that existing output belongs to ``plan``."""
    out = Path(plan.output_dir)
    manifest = out / "manifest.json"
    if manifest.exists():
        try:
            old = json.loads(manifest.read_text(encoding="utf-8"))
        except ValueError:
            raise ResumeDivergence(f"{manifest} is unreadable") from None
        if old.get("plan_hash") != plan.digest():
            diff = sorted(k for k in plan.canonical()
                          if old.get("plan", {}).get(k) != plan.canonical()[k])
            raise ResumeDivergence(
                f"{out} holds output of a different plan (hash {old.get('plan_hash')!r} vs "
                f"{plan.digest()!r}; differing fields: {', '.join(diff) or 'unknown'})")
        return
    if (out / "runs").exists() and any((out / "runs").iterdir()):
        raise ResumeDivergence(f"{out} has run output but no manifest")
    atomic_write(manifest, json.dumps({"plan_hash": plan.digest(), "plan": plan.canonical()},
                                      sort_keys=True, indent=1) + "\n")


def pending_runs(plan: ExperimentPlan) -> list[tuple[str, int]]:
    return [(label, rep) for label in plan.labels for rep in range(plan.repetitions)
            if not _run_complete(plan, label, rep)]


def run_plan(plan: ExperimentPlan, progress=None) -> dict[str, Path]:
    """Run every pending (algorithm, repetition), then rewrite the aggregates.

    Completed runs are skipped, so an interrupted plan resumes where it stopped.
    Returns the aggregate path per label.
    """
    check_manifest(plan)
    todo = pending_runs(plan)
    jobs = [(plan, label, rep) for label, rep in todo]
    if plan.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            for path in pool.map(_run_job, jobs):
                if progress:
                    progress(path)
    else:
        for job in jobs:
            path = _run_job(job)
            if progress:
                progress(path)
    return write_aggregates(plan)


def load_runs(plan: ExperimentPlan, label: str) -> list[list[dict[str, Any]]]:
    out = Path(plan.output_dir)
    return [_parse_log(run_path(out, label, rep)) for rep in range(plan.repetitions)]


def aggregate_rows(plan: ExperimentPlan, label: str) -> list[dict[str, Any]]:
    rows = []
    for rep, log in enumerate(load_runs(plan, label)):
        curve = ConvergenceCurve.from_log(log)
        later = log[1:] or log
        rows.append({
            "rep": rep,
            "run_seed": plan.run_seed(rep),
            "final_test_fitness": curve.final,
            "last_test_fitness": log[-1]["best_test_fitness"],
            "last_train_fitness": log[-1]["best_train_fitness"],
            "full_evaluations": log[-1]["full_evals_cumulative"],
            "generations": log[-1]["gen"],
            "mean_unique_offspring": float(np.mean([r["unique_offspring"] for r in later])),
            "total_filled_duplicates": sum(r["filled_duplicates"] for r in log),
        })
    return rows


def write_aggregates(plan: ExperimentPlan) -> dict[str, Path]:
    out = Path(plan.output_dir)
    paths = {}
    for label in plan.labels:
        path = out / f"aggregate_{label}.csv"
        atomic_write(path, csv_text(AGGREGATE_COLUMNS, aggregate_rows(plan, label)))
        paths[label] = path
    return paths


# -- reports -----------------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def final_comparison(plan: ExperimentPlan) -> list[dict[str, Any]]:
    """Mean and std of final test fitness with a paired signed-rank mark against the baseline.

    ``+`` means significantly better than the baseline, ``-`` worse, ``=``
    no significant difference (or too few repetitions to test).
    """
    finals = {l: [r["final_test_fitness"] for r in aggregate_rows(plan, l)] for l in plan.labels}
    base = plan.baseline_label
    rows = []
    for label in plan.labels:
        mean, std = _mean_std(finals[label])
        mark, p = "", math.nan
        if label != base:
            if len(finals[label]) >= 6:
                res = wilcoxon_signed_rank(finals[label], finals[base])
                mark, p = res.mark, res.p_value
            else:
                mark = "="
        rows.append({"scenario": _scenario_name(plan.scenario), "algorithm": label,
                     "mean": mean, "std": std, "runs": len(finals[label]),
                     "vs_baseline": mark, "p_value": p})
    return rows


def _scenario_name(sc: ScenarioConfig) -> str:
    return f"{sc.target_order_strength:g}/R{sc.resource_type_count}"


def convergence_table(plan: ExperimentPlan) -> list[dict[str, Any]]:
    """Mean best-so-far test fitness per generation across repetitions."""
    rows = []
    for label in plan.labels:
        curves = [ConvergenceCurve.from_log(log) for log in load_runs(plan, label)]
        for g in range(len(curves[0].points)):
            evals = [c.points[g][0] for c in curves]
            mean, std = _mean_std([c.points[g][1] for c in curves])
            rows.append({"algorithm": label, "gen": g, "full_evals": float(np.mean(evals)),
                         "mean_best_test_fitness": mean, "std_best_test_fitness": std})
    return rows


def budget_saved_table(plan: ExperimentPlan) -> list[dict[str, Any]]:
    """Per repetition and baseline checkpoint: the budget-saved ratio of every other algorithm."""
    base = plan.baseline_label
    base_curves = [ConvergenceCurve.from_log(log) for log in load_runs(plan, base)]
    rows = []
    for label in plan.labels:
        if label == base:
            continue
        curves = [ConvergenceCurve.from_log(log) for log in load_runs(plan, label)]
        for rep, (bc, oc) in enumerate(zip(base_curves, curves)):
            for at, _ in bc.points:
                ratio = budget_saved_ratio(bc, oc, at)
                rows.append({"algorithm": label, "rep": rep, "at": at,
                             "ratio": math.nan if ratio is None else ratio})
    return rows


def timing_table(plan: ExperimentPlan) -> list[dict[str, Any]]:
    name = _scenario_name(plan.scenario)
    return timing_report({(name, l): load_runs(plan, l) for l in plan.labels})


REPORTS = {
    "final_comparison": (("scenario", "algorithm", "mean", "std", "runs", "vs_baseline",
                          "p_value"), final_comparison),
    "convergence": (("algorithm", "gen", "full_evals", "mean_best_test_fitness",
                     "std_best_test_fitness"), convergence_table),
    "budget_saved": (("algorithm", "rep", "at", "ratio"), budget_saved_table),
    "timing": (("scenario", "algorithm", "full_eval_s", "surrogate_s", "ratio"), timing_table),
}


def write_reports(plan: ExperimentPlan) -> dict[str, Path]:
    missing = pending_runs(plan)
    if missing:
        raise FileNotFoundError(f"{len(missing)} runs are missing, e.g. {missing[0]}; "
                                "run `evolve` first")
    out = Path(plan.output_dir)
    paths = {}
    for name, (cols, fn) in REPORTS.items():
        paths[name] = out / f"{name}.csv"
        atomic_write(paths[name], csv_text(cols, fn(plan)))
    return paths


# -- surrogate-quality replay ------------------------------------------------------------

PRECISION_COLUMNS = ("rep", "gen", "multiplier", "offspring", "precision")
EXTRA_COLUMNS = ("rep", "gen", "multiplier", "extra_offspring", "correctly_added",
                 "incorrectly_added")


@dataclass
class ReplayResult:
    precision: list[dict[str, Any]] = field(default_factory=list)
    extra: list[dict[str, Any]] = field(default_factory=list)


def replay_quality(plan: ExperimentPlan, label: Optional[str] = None,
                   multipliers: Sequence[float] = REPLAY_MULTIPLIERS, oracle: bool = False,
                   repetitions: Optional[int] = None) -> ReplayResult:
    """Instrumented replay of baseline generations.

    Each generation breeds ``max(multipliers)·|P|`` offspring from the
    baseline population and evaluates all of them on that generation's
    training set (outside the budget). For each multiplier ``k`` the first
    ``k·|P|`` offspring form the pool a SKGGP-k run would see; precision
    compares the 1-NN estimate's top |P| with the true top |P|, and the
    extra-offspring counts classify offspring beyond the first |P|. With
    ``oracle`` the estimate is replaced by the true fitness. The baseline
    then advances as usual.
    """
    label = label or plan.baseline_label
    reps = plan.repetitions if repetitions is None else repetitions
    out = ReplayResult()
    for rep in range(reps):
        cfg = plan.run_config(label, rep)
        run = Run(cfg, plan.scenario)
        run.situations = run.sample_situations(run._training(0))
        run.initialise()
        size = cfg.population_size
        counts = [max(size, int(math.floor(k * size + 0.5))) for k in multipliers]
        for g in range(1, cfg.generations + 1):
            pop = run.population
            train = run._training(g)
            brood = run.breed(g, max(counts))
            truth = run.evaluator.evaluate(brood, train, count=False)
            if oracle:
                est = list(truth)
            else:
                members_pc = characterise_many(pop.members, run.situations, run.backend)
                db = SurrogateDatabase.from_arrays(members_pc, [m.fitness for m in pop.members], g - 1)
                est = db.estimate_many(characterise_many(brood, run.situations, run.backend),
                                       run.backend).tolist()
            for k, n in zip(multipliers, counts):
                out.precision.append({"rep": rep, "gen": g, "multiplier": float(k), "offspring": n,
                                      "precision": precision_at(est[:n], truth[:n], size)})
                pairs = list(zip(est[:n], truth[:n]))
                good, bad = extra_offspring_gain(pairs[:size], pairs[size:], size)
                out.extra.append({"rep": rep, "gen": g, "multiplier": float(k),
                                  "extra_offspring": n - size, "correctly_added": good,
                                  "incorrectly_added": bad})
            run.step()
    return out


def write_replay(plan: ExperimentPlan, result: ReplayResult, suffix: str = "") -> dict[str, Path]:
    out = Path(plan.output_dir)
    paths = {"precision": out / f"precision{suffix}.csv",
             "extra_offspring": out / f"extra_offspring{suffix}.csv"}
    atomic_write(paths["precision"], csv_text(PRECISION_COLUMNS, result.precision))
    atomic_write(paths["extra_offspring"], csv_text(EXTRA_COLUMNS, result.extra))
    return paths
