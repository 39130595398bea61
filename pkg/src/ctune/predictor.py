"""Feature-based prediction of good flag combinations.

Two models are trained from repository cases.  ``nearest_neighbor`` returns
the best known combination of the closest training program; the distance is
Euclidean over z-scored static features.  ``per_flag_probability`` keeps,
for every program, how often each flag shows up among its top-decile cases,
and predicts the flags whose probability (weighted over the nearest
programs) reaches one half.
"""

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import packets as pk
from .errors import EmptyFeatureVector, InsufficientData, ModelMismatch, PacketError
from .filters import pareto_filter, stable
from .model import FeatureVector, FlagCombination, OptimizationCase, q6
from .repository import QueryCriteria
from .stats import aggregate

KINDS = ("nearest_neighbor", "per_flag_probability")
OBJECTIVES = ("time", "size", "time_and_size")
NEIGHBORS = 3
THRESHOLD = 0.5
TOP_FRACTION = 0.1


def objective_metric(case: OptimizationCase, objective: str) -> float:
    return case.size_ratio if objective == "size" else case.speedup


def best_case(cases: Sequence[OptimizationCase], objective: str) -> OptimizationCase:
    """Best case for ``objective``; the earliest wins ties."""
    if objective == "time_and_size":
        cases = pareto_filter(list(cases))
    best = None
    for c in cases:
        if best is None or objective_metric(c, objective) > objective_metric(best, objective):
            best = c
    return best


def flag_probabilities(cases: Sequence[OptimizationCase], objective: str) -> Dict[str, float]:
    """Share of the top-decile cases (at least one) that contain each flag."""
    ranked = sorted(cases, key=lambda c: -objective_metric(c, objective))
    top = ranked[:max(1, math.ceil(len(ranked) * TOP_FRACTION))]
    counts = Counter(f for c in top for f in c.opt.flags)
    return {f: n / len(top) for f, n in sorted(counts.items())}


@dataclass(frozen=True)
class TrainingEntry:
    program_id: int
    features: Dict[str, float]
    best: FlagCombination
    best_metric: float
    flag_probs: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class PredictionQuery:
    platform_id: int
    compiler_id: int
    features: FeatureVector
    environment_id: int = 0
    model_kind: str = "nearest_neighbor"
    objective: str = "time"

    def __post_init__(self):
        if self.features is None or not self.features.entries:
            raise EmptyFeatureVector("query has no features")


@dataclass(frozen=True)
class Prediction:
    flags: FlagCombination
    matched_program_ids: Tuple[int, ...]
    distances: Tuple[float, ...]

    @property
    def distance(self) -> float:
        return self.distances[0]


@dataclass(frozen=True)
class Model:
    kind: str
    compiler_id: int
    platform_id: int
    objective: str
    entries: Tuple[TrainingEntry, ...]
    normalization: Dict[str, Tuple[float, float]]
    training_digest: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.entries:
            raise InsufficientData("a model needs at least one training program")
        if not self.training_digest:
            object.__setattr__(self, "training_digest", _digest(self))

    def z(self, features: Mapping[str, float]) -> Dict[str, float]:
        # indices missing from a vector count as zero before scaling
        return {k: (features.get(k, 0.0) - m) / s for k, (m, s) in self.normalization.items()}

    def to_text(self) -> str:
        head = [
            ("MODEL_KIND", self.kind),
            ("OBJECTIVE", self.objective),
            ("COMPILER_ID", str(self.compiler_id)),
            ("PLATFORM_ID", str(self.platform_id)),
            ("TRAINING_DIGEST", self.training_digest),
            ("NORMALIZATION", ", ".join(f"{k}={pk.fmt_num(m)}:{pk.fmt_num(s)}"
                                        for k, (m, s) in self.normalization.items())),
        ]
        body = [[
            ("PROGRAM_ID", str(e.program_id)),
            ("OPT_FLAGS", e.best.canonical()),
            ("BEST_METRIC", pk.fmt_num(e.best_metric)),
            ("STATIC_FEATURE_VECTOR", " " + ", ".join(f"{k}={pk.fmt_num(v)}" for k, v in e.features.items())),
            ("FLAG_PROBABILITIES", ", ".join(f"{f}={pk.fmt_num(p)}" for f, p in e.flag_probs.items())),
        ] for e in self.entries]
        return pk.format_stream([head] + body)

    @classmethod
    def from_text(cls, text: str) -> "Model":
        packets = pk.parse_stream(text)
        if not packets or "MODEL_KIND" not in packets[0]:
            raise PacketError("not a model file")
        h = packets[0]
        norm = {}
        for token in _tokens(h.get("NORMALIZATION", "")):
            k, _, ms = token.rpartition("=")
            m, s = ms.split(":")
            norm[k] = (float(m), float(s))
        entries = tuple(TrainingEntry(
            int(p["PROGRAM_ID"]),
            {k: float(v) for k, v in (t.rpartition("=")[::2] for t in _tokens(p["STATIC_FEATURE_VECTOR"]))},
            FlagCombination.parse(p["OPT_FLAGS"]),
            float(p["BEST_METRIC"]),
            {f: float(v) for f, v in (t.rpartition("=")[::2] for t in _tokens(p.get("FLAG_PROBABILITIES", "")))},
        ) for p in packets[1:])
        model = cls(h["MODEL_KIND"], int(h["COMPILER_ID"]), int(h["PLATFORM_ID"]), h["OBJECTIVE"],
                    entries, norm)
        if model.training_digest != h.get("TRAINING_DIGEST", model.training_digest):
            raise ModelMismatch("model file digest does not match its contents")
        return model


def _tokens(value: str) -> List[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def _digest(model: Model) -> str:
    h = hashlib.sha256(f"{model.kind}|{model.objective}|{model.compiler_id}|{model.platform_id}".encode())
    for e in model.entries:
        h.update(repr((e.program_id, sorted(e.features.items()), e.best.canonical(),
                       e.best_metric, sorted(e.flag_probs.items()))).encode())
    return h.hexdigest()


def program_features(repository, program_id: int) -> Optional[Dict[str, float]]:
    """Static features of a program: per-function vectors of its earliest
    compilation that has any, summed index by index."""
    for comp in sorted(repository.compilations(), key=lambda c: (c.date, c.time, c.compile_id)):
        if comp.program_id != program_id:
            continue
        recs = repository.features(comp.compile_id)
        if recs:
            total: Dict[str, float] = {}
            for r in recs:
                for k, v in r.features.entries.items():
                    total[k] = total.get(k, 0.0) + v
            return total
    return None


def training_entries(repository, compiler_id: int, platform_id: int, objective: str,
                     exclude: Sequence[int] = ()) -> List[TrainingEntry]:
    cases = repository.query(QueryCriteria(compiler_id=compiler_id, platform_id=platform_id,
                                           output_correct=True, include_baseline=True))
    by_program: Dict[int, List[OptimizationCase]] = {}
    for c in cases:
        if stable(c) and c.program_id not in exclude:
            by_program.setdefault(c.program_id, []).append(c)
    out = []
    for pid in sorted(by_program):
        feats = program_features(repository, pid)
        if not feats:
            continue
        best = best_case(by_program[pid], objective)
        out.append(TrainingEntry(pid, feats, best.opt, objective_metric(best, objective),
                                 flag_probabilities(by_program[pid], objective)))
    return out


def fit(entries: Sequence[TrainingEntry], kind: str, objective: str, compiler_id: int,
        platform_id: int) -> Model:
    if not entries:
        raise InsufficientData("no program has both features and a correct case")
    index = sorted({k for e in entries for k in e.features})
    norm = {}
    n = len(entries)
    for k in index:
        vals = [e.features.get(k, 0.0) for e in entries]
        mean = sum(vals) / n
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / n)
        if std > 0:
            norm[k] = (mean, std)
    return Model(kind, compiler_id, platform_id, objective, tuple(entries), norm)


def train(repository, compiler_id: int, platform_id: int, objective: str = "time",
          kind: str = "nearest_neighbor", *, exclude: Sequence[int] = ()) -> Model:
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    return fit(training_entries(repository, compiler_id, platform_id, objective, exclude),
               kind, objective, compiler_id, platform_id)


def _neighbors(model: Model, features: Mapping[str, float]) -> List[Tuple[float, TrainingEntry]]:
    q = model.z(features)
    scored = []
    for e in model.entries:
        ze = model.z(e.features)
        scored.append((math.sqrt(sum((q[k] - ze[k]) ** 2 for k in q)), e))
    scored.sort(key=lambda t: (t[0], t[1].program_id))
    return scored


def predict(model: Model, query: PredictionQuery) -> Prediction:
    if (query.compiler_id, query.platform_id) != (model.compiler_id, model.platform_id):
        raise ModelMismatch("model was trained for another compiler or platform")
    if query.model_kind != model.kind or query.objective != model.objective:
        raise ModelMismatch(f"model is {model.kind}/{model.objective}, query asked for "
                            f"{query.model_kind}/{query.objective}")
    if not query.features.entries:
        raise EmptyFeatureVector("query has no features")
    ranked = _neighbors(model, query.features.entries)
    if model.kind == "nearest_neighbor":
        d, e = ranked[0]
        return Prediction(e.best, (e.program_id,), (d,))

    near = ranked[:NEIGHBORS]
    exact = [(d, e) for d, e in near if d == 0]
    weighted = [(1.0, e) for _, e in exact] if exact else [(1.0 / d, e) for d, e in near]
    total = sum(w for w, _ in weighted)
    probs: Dict[str, float] = {}
    for w, e in weighted:
        for f, p in e.flag_probs.items():
            probs[f] = probs.get(f, 0.0) + w * p / total
    levels: Dict[str, float] = {}
    for w, e in weighted:
        levels[e.best.base_level] = levels.get(e.best.base_level, 0.0) + w
    level = max(levels, key=lambda lv: (levels[lv], lv == near[0][1].best.base_level))
    flags = tuple(sorted(f for f, p in probs.items() if p >= THRESHOLD - 1e-12))
    return Prediction(FlagCombination(level, flags), tuple(e.program_id for _, e in near),
                      tuple(d for d, _ in near))


# ----------------------------------------------------------- leave one out


@dataclass(frozen=True)
class HoldOutResult:
    program_id: int
    predicted: FlagCombination
    matched_program_id: int
    achieved: float
    best_known: float

    @property
    def fraction(self) -> float:
        return max(0.0, self.achieved / self.best_known) if self.best_known > 0 else 0.0


def _measure(repository, backend, program, program_id, flags, best, objective):
    """Objective value of ``flags`` on ``program`` against the baseline of ``best``.

    Runs already recorded for identical object code are reused; otherwise the
    backend runs it without touching the repository.
    """
    anchor = best.baseline_run_id
    base_runs = repository.baseline_runs(anchor)
    base_comp = repository.compilation(base_runs[0].compile_id)
    dataset = base_runs[0].dataset_number
    outcome = backend.compile(program, flags, {})
    if not outcome.success:
        return 0.0
    if objective == "size":
        return base_comp.bin_size / outcome.bin_size
    times = None
    for comp in repository.compilations_with_md5(outcome.obj_md5):
        if comp.program_id == program_id:
            runs = [e for e in repository.executions(comp.compile_id)
                    if e.run_id_associate == anchor and e.dataset_number == dataset]
            if runs:
                if not all(e.output_correct for e in runs):
                    return 0.0
                times = [e.run_time for e in runs]
                break
    if times is None:
        ref = backend.run(program, backend.artifact_from(base_comp, program), dataset, 1, {})
        got = backend.run(program, outcome.artifact, dataset, len(base_runs), {})
        if any(o != ref.outputs[0] for o in got.outputs):
            return 0.0
        times = [q6(t) for t in got.run_times]
    return aggregate([e.run_time for e in base_runs]) / aggregate(times)


def leave_one_out_evaluate(repository, backend, compiler_id: int, platform_id: int,
                           kind: str = "nearest_neighbor", objective: str = "time"
                           ) -> List[HoldOutResult]:
    entries = training_entries(repository, compiler_id, platform_id, objective)
    if len(entries) < 2:
        raise InsufficientData("leave-one-out needs at least two training programs")
    cases = repository.query(QueryCriteria(compiler_id=compiler_id, platform_id=platform_id,
                                           output_correct=True, include_baseline=True))
    results = []
    for held in entries:
        rest = [e for e in entries if e.program_id != held.program_id]
        model = fit(rest, kind, objective, compiler_id, platform_id)
        pred = predict(model, PredictionQuery(platform_id, compiler_id,
                                              FeatureVector("static", held.features),
                                              model_kind=kind, objective=objective))
        mine = [c for c in cases if c.program_id == held.program_id and stable(c)]
        best = best_case(mine, objective)
        program = repository.entity(held.program_id)
        achieved = _measure(repository, backend, program, held.program_id, pred.flags, best, objective)
        results.append(HoldOutResult(held.program_id, pred.flags, pred.matched_program_ids[0],
                                     achieved, held.best_metric))
    return results
