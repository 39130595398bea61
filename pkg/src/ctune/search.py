"""Optimization-space exploration: the four flag-search plugins and the loop
that compiles, runs and records every candidate against one baseline."""

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

from . import packets as pk
from .driver import (Backend, ExperimentContext, compile, open_context, reuse_executions, run,
                     skip_if_unchanged)
from .errors import (BaselineFailed, CompileFailed, CTuneError, DriverError, EvaluationFailed,
                     LengthExceedsSpace)
from .model import (FeatureRecord, FlagCombination, IdFactory, OptimizationCase, ProgramDescriptor,
                    VirtualClock, WallClock, derive_case)
from .stats import DEFAULT_AGGREGATOR

log = logging.getLogger(__name__)

# CLI plugin name -> strategy
STRATEGIES = {
    "glob-flags-rnd-uniform": "uniform_random",
    "glob-flags-rnd-fixed": "fixed_length_random",
    "glob-flags-one-by-one": "one_by_one",
    "glob-flags-one-off-rnd": "one_off_prune",
}
DEFAULT_EPSILON = 0.02
DEFAULT_REFERENCE_LEVEL = "-O3"


@dataclass(frozen=True)
class FlagDescriptor:
    name: str
    antonym: str = ""   # e.g. -fno-gcse for -fgcse; informational

    def __post_init__(self):
        if not self.name.startswith("-") or any(c.isspace() for c in self.name):
            raise ValueError(f"bad flag name {self.name!r}")


@dataclass(frozen=True)
class FlagSpace:
    base_levels: Tuple[str, ...] = (DEFAULT_REFERENCE_LEVEL,)
    flags: Tuple[FlagDescriptor, ...] = ()

    def __post_init__(self):
        flags = tuple(f if isinstance(f, FlagDescriptor) else FlagDescriptor(f) for f in self.flags)
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "base_levels", tuple(self.base_levels))
        names = [f.name for f in flags]
        if len(set(names)) != len(names):
            raise ValueError("flag names in a space must be unique")
        if not self.base_levels:
            raise ValueError("a flag space needs at least one base level")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(f.name for f in self.flags)

    @classmethod
    def parse(cls, text: str) -> "FlagSpace":
        """Read ``BASE_LEVEL=`` and ``FLAG=<name> [antonym]`` lines (both repeatable)."""
        levels, flags = [], []
        for key, value in pk.parse_pairs(text):
            if key == "BASE_LEVEL":
                levels.append(value.strip())
            elif key == "FLAG":
                parts = value.split()
                if not parts or len(parts) > 2:
                    raise ValueError(f"bad FLAG line {value!r}")
                flags.append(FlagDescriptor(*parts))
        return cls(tuple(levels) or (DEFAULT_REFERENCE_LEVEL,), tuple(flags))

    def format(self) -> str:
        lines = [f"BASE_LEVEL={lvl}" for lvl in self.base_levels]
        lines += [f"FLAG={f.name} {f.antonym}".rstrip() for f in self.flags]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- generators


def gen_uniform_random(space: FlagSpace, seed: int, probability: float = 0.5,
                       count: int = 1) -> List[FlagCombination]:
    if not 0 < probability <= 1:
        raise ValueError("probability must be in (0, 1]")
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        level = rng.choice(space.base_levels)
        out.append(FlagCombination(level, tuple(n for n in space.names if rng.random() < probability)))
    return out


def gen_fixed_length(space: FlagSpace, seed: int, k: int, count: int = 1) -> List[FlagCombination]:
    n = len(space.flags)
    if not 1 <= k <= n:
        raise LengthExceedsSpace(f"combination length {k} outside 1..{n}")
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        level = rng.choice(space.base_levels)
        picked = sorted(rng.sample(range(n), k))
        out.append(FlagCombination(level, tuple(space.names[i] for i in picked)))
    return out


def gen_one_by_one(space: FlagSpace) -> List[FlagCombination]:
    return [FlagCombination(level, (name,)) for level in space.base_levels for name in space.names]


def _rel_change(new: float, ref: float) -> float:
    if ref == 0:
        return 0.0 if new == 0 else float("inf")
    return abs(new - ref) / abs(ref)


def _checked(evaluate, combo) -> float:
    try:
        return float(evaluate(combo))
    except EvaluationFailed:
        raise
    except (CTuneError, ValueError) as exc:
        raise EvaluationFailed(f"evaluating {combo}: {exc}") from exc


def one_off_prune(base: FlagCombination, evaluate: Callable[[FlagCombination], float],
                  epsilon: float = DEFAULT_EPSILON, *,
                  max_evaluations: Optional[int] = None) -> FlagCombination:
    """Drop flags of ``base`` one at a time while the metric stays put.

    A flag goes when removing it moves the metric by less than ``epsilon``
    relative to the current combination and to ``base`` itself; the second
    test keeps the result within ``epsilon`` of ``base`` however many flags
    are dropped.  Uses at most ``len(base.flags) + 1`` evaluations.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    budget = len(base.flags) + 1 if max_evaluations is None else max_evaluations
    if budget < 1:
        return base
    base_metric = current_metric = _checked(evaluate, base)
    used, current = 1, base
    for flag in base.flags:
        if used >= budget:
            break
        trial = current.without(flag)
        metric = _checked(evaluate, trial)
        used += 1
        if _rel_change(metric, current_metric) < epsilon and _rel_change(metric, base_metric) < epsilon:
            current, current_metric = trial, metric
    assert _rel_change(current_metric, base_metric) < epsilon or current == base
    return current


# --------------------------------------------------------------- exploration


@dataclass(frozen=True)
class ExplorationConfig:
    strategy: str = "uniform_random"
    budget: int = 100
    seed: int = 0
    per_flag_probability: float = 0.5
    fixed_length: int = 1
    repeats: int = 1
    epsilon: float = DEFAULT_EPSILON
    dataset: int = 1
    reference_level: str = DEFAULT_REFERENCE_LEVEL
    aggregator: str = DEFAULT_AGGREGATOR

    def __post_init__(self):
        strategy = STRATEGIES.get(self.strategy, self.strategy)
        if strategy not in STRATEGIES.values():
            raise ValueError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "strategy", strategy)
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not 0 < self.per_flag_probability <= 1:
            raise ValueError("per_flag_probability must be in (0, 1]")
        if self.repeats < 1 or self.dataset < 1:
            raise ValueError("repeats and dataset must be >= 1")


@dataclass
class ExplorationReport:
    program: str
    config: ExplorationConfig
    baseline: OptimizationCase
    cases: List[OptimizationCase] = field(default_factory=list)
    history: List[Tuple[int, Optional[float]]] = field(default_factory=list)
    compilations: int = 0
    cached_runs: int = 0
    failed: int = 0
    pruned: Optional[FlagCombination] = None

    @property
    def best_case(self) -> Optional[OptimizationCase]:
        good = [c for c in self.cases if c.output_correct]
        # earliest wins among equals
        return max(good, key=lambda c: c.speedup, default=None)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def iterations_to_95pct(self) -> Optional[int]:
        best = self.best_case
        if best is None:
            return None
        for it, s in self.history:
            if s is not None and s >= 0.95 * best.speedup:
                return it
        return None

    def summary_fields(self):
        best = self.best_case
        out = [
            ("PROGRAM", self.program),
            ("STRATEGY", self.config.strategy),
            ("BUDGET", str(self.config.budget)),
            ("SEED", str(self.config.seed)),
            ("ITERATIONS", str(self.iterations)),
            ("COMPILATIONS", str(self.compilations)),
            ("CACHED_RUNS", str(self.cached_runs)),
            ("FAILED", str(self.failed)),
            ("BASELINE_RUN_ID", str(self.baseline.baseline_run_id)),
            ("BASELINE_OPT_FLAGS", self.baseline.opt.canonical()),
        ]
        if best is not None:
            out += [("BEST_COMPILE_ID", str(best.compilation.compile_id)),
                    ("BEST_OPT_FLAGS", best.opt.canonical()),
                    ("BEST_SPEEDUP", pk.fmt_float(best.speedup)),
                    ("BEST_SIZE_RATIO", pk.fmt_float(best.size_ratio)),
                    ("ITERATIONS_TO_95PCT", str(self.iterations_to_95pct))]
        if self.pruned is not None:
            out.append(("PRUNED_OPT_FLAGS", self.pruned.canonical()))
        return out


def session_ids(program: str, config: ExplorationConfig) -> IdFactory:
    """Id stream derived from everything that determines an exploration."""
    c = config
    return IdFactory.keyed("explore", program, c.strategy, c.budget, c.seed, c.per_flag_probability,
                           c.fixed_length, c.repeats, c.epsilon, c.dataset, c.reference_level)


class _Explorer:
    def __init__(self, program, program_id, space, config, backend, repository, ctx):
        self.program = program
        self.program_id = program_id
        self.space = space
        self.config = config
        self.backend = backend
        self.repo = repository
        self.ctx = ctx
        self.seen: Dict[str, Optional[OptimizationCase]] = {}
        self.report: Optional[ExplorationReport] = None

    def baseline(self) -> OptimizationCase:
        c = self.config
        try:
            comp, _ = compile(self.backend, self.program, FlagCombination(c.reference_level),
                              self.ctx, self.program_id)
            self.repo.record(comp)
            runs, outcome = run(self.backend, self.program, comp, c.dataset, self.ctx,
                                repeats=c.repeats, seed=c.seed)
        except DriverError as exc:
            raise BaselineFailed(f"baseline {c.reference_level} failed: {exc}") from exc
        for r in runs:
            self.repo.record(r)
        fv = self.backend.features(self.program)
        if fv is not None:
            self.repo.record(FeatureRecord(comp.compile_id, "", fv))
        self.reference = outcome.outputs
        self.base_comp, self.base_runs = comp, runs
        return derive_case(comp, runs, runs, comp, aggregator=c.aggregator)

    def evaluate(self, combo: FlagCombination) -> Optional[OptimizationCase]:
        rep = self.report
        key = combo.canonical()
        if key in self.seen:
            case = self.seen[key]
        else:
            case = self._measure(combo)
            self.seen[key] = case
            if case is not None:
                rep.cases.append(case)
        ok = case is not None and case.output_correct
        rep.history.append((len(rep.history) + 1, case.speedup if ok else None))
        return case

    def _measure(self, combo) -> Optional[OptimizationCase]:
        c, rep, anchor = self.config, self.report, self.base_runs[0].run_id
        rep.compilations += 1
        try:
            comp, _ = compile(self.backend, self.program, combo, self.ctx, self.program_id)
        except CompileFailed as exc:
            if getattr(exc, "record", None) is not None:
                self.repo.record(exc.record)
            rep.failed += 1
            log.info("compile of %s failed: %s", combo, exc)
            return None
        self.repo.record(comp)
        cached = skip_if_unchanged(comp.obj_md5, self.repo, self.program_id, c.dataset, anchor)
        if cached is not None:
            runs = reuse_executions(cached, comp, self.ctx, anchor)
            rep.cached_runs += 1
        else:
            try:
                runs, _ = run(self.backend, self.program, comp, c.dataset, self.ctx,
                              repeats=c.repeats, reference=self.reference, baseline_run_id=anchor,
                              seed=c.seed)
            except DriverError as exc:
                rep.failed += 1
                log.info("run of %s failed: %s", combo, exc)
                return None
        for r in runs:
            self.repo.record(r)
        return derive_case(comp, runs, self.base_runs, self.base_comp,
                           aggregator=c.aggregator, reject_incorrect=False)

    def metric(self, combo) -> float:
        case = self.evaluate(combo)
        return case.speedup if case is not None and case.output_correct else 0.0

    def candidates(self) -> List[FlagCombination]:
        c, s = self.config, self.space
        if c.strategy == "uniform_random":
            return gen_uniform_random(s, c.seed, c.per_flag_probability, c.budget)
        if c.strategy == "fixed_length_random":
            return gen_fixed_length(s, c.seed, c.fixed_length, c.budget)
        return gen_one_by_one(s)[:c.budget]


def explore(program: ProgramDescriptor, space: FlagSpace, config: ExplorationConfig,
            backend: Backend, repository, *, program_id: Optional[int] = None,
            ctx: Optional[ExperimentContext] = None) -> ExplorationReport:
    """Run one exploration session and record everything in ``repository``.

    A reference compile and run at ``config.reference_level`` comes first;
    every candidate is then associated with that baseline run.  Candidates
    whose object code matches an earlier one reuse its runs, and repeated
    combinations are evaluated once but still spend budget.
    """
    if ctx is None:
        deterministic = "deterministic" in backend.capabilities
        ctx = open_context(repository, backend,
                           ids=session_ids(program.name, config) if deterministic else IdFactory(),
                           clock=VirtualClock() if deterministic else WallClock())
    if program_id is None:
        program_id = program.id or repository.register_entity("program", replace(program, id=ctx.ids()))
    ex = _Explorer(program, program_id, space, config, backend, repository, ctx)
    ex.report = ExplorationReport(program.name, config, ex.baseline())

    if config.strategy == "one_off_prune":
        names = list(space.names)
        random.Random(config.seed).shuffle(names)
        start = FlagCombination(space.base_levels[0], tuple(names))
        ex.report.pruned = one_off_prune(start, ex.metric, config.epsilon,
                                         max_evaluations=config.budget)
    else:
        for combo in ex.candidates():
            ex.evaluate(combo)
    return ex.report


def exhaustive_best(space: FlagSpace, metric: Callable[[FlagCombination], float],
                    level: Optional[str] = None) -> Tuple[float, FlagCombination]:
    """Best metric over every subset of ``space`` (2^n evaluations)."""
    level = level or space.base_levels[0]
    names = space.names
    best = None
    for mask in range(1 << len(names)):
        combo = FlagCombination(level, tuple(n for i, n in enumerate(names) if mask >> i & 1))
        m = metric(combo)
        if best is None or m > best[0]:
            best = (m, combo)
    return best
