"""Discrete-event simulation of runtime adaptation with function clones.

A program carries several statically compiled clones of a hot function.  At
every invocation the monitor quantizes the dynamic features it observes into
a signature.  Signatures without a settled entry in the association table
are calibrated by trying untried clones round-robin; after that the fastest
clone seen for the signature is used until the entry is recalibrated.
"""

import csv
import io
import random
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import packets as pk
from .errors import EmptyTrace, NoCandidates, PacketError
from .filters import pareto_filter
from .model import FeatureVector, FlagCombination
from .repository import QueryCriteria

DEFAULT_OVERHEAD = 0.002
DEFAULT_BINS = 8
DEFAULT_RECALIBRATE = 1000


@dataclass(frozen=True)
class Clone:
    clone_id: int
    flags: FlagCombination
    phase_times: Dict[int, float]

    def __post_init__(self):
        if not self.phase_times or any(t <= 0 for t in self.phase_times.values()):
            raise ValueError(f"clone {self.clone_id}: phase times must be positive")

    def time(self, phase: int) -> float:
        try:
            return self.phase_times[phase]
        except KeyError:
            raise ValueError(f"clone {self.clone_id} has no time for phase {phase}") from None

    @property
    def mean_time(self) -> float:
        return sum(self.phase_times.values()) / len(self.phase_times)


@dataclass(frozen=True)
class AdaptiveProgram:
    program_id: int
    clones: Tuple[Clone, ...]
    monitor_overhead: float = DEFAULT_OVERHEAD

    def __post_init__(self):
        object.__setattr__(self, "clones", tuple(self.clones))
        ids = [c.clone_id for c in self.clones]
        if not ids:
            raise ValueError("an adaptive program needs at least the original clone")
        if len(set(ids)) != len(ids):
            raise ValueError("clone ids must be unique")
        if ids[0] != 0:
            raise ValueError("clone 0 (the original) must come first")
        if self.monitor_overhead < 0:
            raise ValueError("monitor_overhead must be >= 0")

    def clone(self, clone_id: int) -> Clone:
        return next(c for c in self.clones if c.clone_id == clone_id)

    def to_text(self) -> str:
        head = [("ADAPTIVE_PROGRAM_ID", str(self.program_id)),
                ("MONITOR_OVERHEAD", pk.fmt_num(self.monitor_overhead))]
        body = [[("CLONE_ID", str(c.clone_id)), ("OPT_FLAGS", c.flags.canonical()),
                 ("PHASE_TIMES", ", ".join(f"{p}={pk.fmt_num(t)}" for p, t in sorted(c.phase_times.items())))]
                for c in self.clones]
        return pk.format_stream([head] + body)

    @classmethod
    def from_text(cls, text: str) -> "AdaptiveProgram":
        packets = pk.parse_stream(text)
        if not packets or "ADAPTIVE_PROGRAM_ID" not in packets[0]:
            raise PacketError("adaptive program file must start with ADAPTIVE_PROGRAM_ID")
        head = packets[0]
        clones = []
        for p in packets[1:]:
            times = {int(k): float(v) for k, v in pk.parse_vector(p["PHASE_TIMES"]).items()}
            clones.append(Clone(int(p["CLONE_ID"]), FlagCombination.parse(p.get("OPT_FLAGS", "")), times))
        return cls(int(head["ADAPTIVE_PROGRAM_ID"]), tuple(clones),
                   float(head.get("MONITOR_OVERHEAD", DEFAULT_OVERHEAD)))


# ------------------------------------------------------------------- traces


@dataclass(frozen=True)
class PhaseTrace:
    steps: Tuple[Tuple[int, FeatureVector], ...]

    def __len__(self):
        return len(self.steps)

    @property
    def phases(self) -> List[int]:
        return [p for p, _ in self.steps]


def generate_trace(schedule: Sequence[Tuple[int, int]], centers: Mapping[int, Mapping[str, float]],
                   seed: int = 0, jitter: float = 0.01) -> PhaseTrace:
    """Steps following ``schedule`` (pairs of phase id and length); features
    are the phase centre scaled by ``1 + N(0, jitter)`` per index."""
    rng = random.Random(seed)
    steps = []
    for phase, length in schedule:
        center = centers[phase]
        for _ in range(length):
            feats = {k: v * (1 + rng.gauss(0.0, jitter)) if jitter else v for k, v in center.items()}
            steps.append((phase, FeatureVector("dynamic", feats)))
    return PhaseTrace(tuple(steps))


def markov_schedule(phases: Sequence[int], steps: int, mean_dwell: float, seed: int = 0
                    ) -> List[Tuple[int, int]]:
    """Random phase segments with geometric dwell times."""
    rng = random.Random(seed)
    out, left, current = [], steps, rng.choice(list(phases))
    while left > 0:
        n = min(left, 1 + int(rng.expovariate(1.0 / max(mean_dwell - 1, 1e-9))))
        out.append((current, n))
        left -= n
        others = [p for p in phases if p != current] or [current]
        current = rng.choice(others)
    return out


def load_trace(text: str) -> PhaseTrace:
    """Read either explicit steps (``PHASE_ID`` plus ``DYNAMIC_FEATURE_VECTOR``
    per packet) or a phase model (``PHASE_ID`` packets with centres and one
    packet with ``SCHEDULE``, ``SEED`` and ``JITTER``)."""
    packets = pk.parse_stream(text)
    model = [p for p in packets if "SCHEDULE" in p]
    if not model:
        return PhaseTrace(tuple((int(p["PHASE_ID"]), FeatureVector.parse(p["DYNAMIC_FEATURE_VECTOR"], "dynamic"))
                                for p in packets))
    m = model[0]
    centers = {int(p["PHASE_ID"]): pk.parse_vector(p["DYNAMIC_FEATURE_VECTOR"])
               for p in packets if "PHASE_ID" in p}
    schedule = [(int(a), int(b)) for a, b in (t.split(":") for t in m["SCHEDULE"].replace(",", " ").split())]
    return generate_trace(schedule, centers, int(m.get("SEED", "0")), float(m.get("JITTER", "0.01")))


def dump_trace(trace: PhaseTrace) -> str:
    return pk.format_stream([[("PHASE_ID", str(p)), ("DYNAMIC_FEATURE_VECTOR", " " + f.format())]
                             for p, f in trace.steps])


# --------------------------------------------------------------- simulation


@dataclass(frozen=True)
class AdaptationPolicy:
    bins: int = DEFAULT_BINS
    recalibrate_every: int = DEFAULT_RECALIBRATE

    def __post_init__(self):
        if self.bins < 1 or self.recalibrate_every < 1:
            raise ValueError("bins and recalibrate_every must be >= 1")


class Quantizer:
    """Equal-width bins per feature index over the range seen in a trace."""

    def __init__(self, trace: PhaseTrace, bins: int):
        self.bins = bins
        self.ranges: Dict[str, Tuple[float, float]] = {}
        for _, fv in trace.steps:
            for k, v in fv.entries.items():
                lo, hi = self.ranges.get(k, (v, v))
                self.ranges[k] = (min(lo, v), max(hi, v))
        self.keys = sorted(self.ranges)

    def __call__(self, fv: FeatureVector) -> Tuple[int, ...]:
        sig = []
        for k in self.keys:
            lo, hi = self.ranges[k]
            v = fv.entries.get(k, lo)
            b = 0 if hi == lo else int((v - lo) / (hi - lo) * self.bins)
            sig.append(min(max(b, 0), self.bins - 1))
        return tuple(sig)


@dataclass
class TableRow:
    best_clone: int
    evidence: int
    observed: Dict[int, float] = field(default_factory=dict)
    calibrated_at: int = 0


@dataclass
class SimReport:
    total_time: float
    oracle_time: float
    choices: List[int]
    calibrating: List[bool]
    phases: List[int]
    step_times: List[float]
    oracle_step_times: List[float]
    table: Dict[Tuple[int, ...], TableRow]
    overhead: float = 0.0

    @property
    def regret(self) -> float:
        return self.total_time / self.oracle_time - 1.0

    @property
    def steady_mismatches(self) -> int:
        """Non-calibration steps whose clone was slower than the best one."""
        scale = 1.0 + self.overhead
        return sum(1 for cal, t, o in zip(self.calibrating, self.step_times, self.oracle_step_times)
                   if not cal and t > o * scale * (1 + 1e-12))

    def summary_fields(self):
        return [
            ("STEPS", str(len(self.choices))),
            ("TOTAL_TIME", pk.fmt_float(self.total_time)),
            ("ORACLE_TIME", pk.fmt_float(self.oracle_time)),
            ("REGRET", pk.fmt_float(self.regret)),
            ("CALIBRATION_STEPS", str(sum(self.calibrating))),
            ("STEADY_MISMATCHES", str(self.steady_mismatches)),
            ("TABLE_ROWS", str(len(self.table))),
        ]

    def to_text(self) -> str:
        rows = [[("SIGNATURE", " ".join(map(str, sig))), ("CLONE_ID", str(r.best_clone)),
                 ("EVIDENCE", str(r.evidence))] for sig, r in sorted(self.table.items())]
        return pk.format_stream([self.summary_fields()] + rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "phase", "clone", "time", "oracle_time", "cumulative_time",
                    "cumulative_oracle_time", "calibrating"])
        cum = cum_o = 0.0
        for i, (ph, cl, t, o, cal) in enumerate(zip(self.phases, self.choices, self.step_times,
                                                      self.oracle_step_times, self.calibrating), 1):
            cum += t
            cum_o += o
            w.writerow([i, ph, cl, f"{t:.6f}", f"{o:.6f}", f"{cum:.6f}", f"{cum_o:.6f}", int(cal)])
        return buf.getvalue()


def simulate(program: AdaptiveProgram, trace: PhaseTrace,
             policy: AdaptationPolicy = AdaptationPolicy()) -> SimReport:
    if not len(trace):
        raise EmptyTrace("trace has no steps")
    quantize = Quantizer(trace, policy.bins)
    clone_ids = [c.clone_id for c in program.clones]
    scale = 1.0 + program.monitor_overhead
    table: Dict[Tuple[int, ...], TableRow] = {}
    choices, calibrating, step_times, oracle_times = [], [], [], []

    for step, (phase, fv) in enumerate(trace.steps):
        sig = quantize(fv)
        row = table.get(sig)
        if row is not None and step - row.calibrated_at >= policy.recalibrate_every:
            row.observed.clear()
            row.calibrated_at = step
        untried = [c for c in clone_ids if row is None or c not in row.observed]
        if untried:
            chosen = untried[0]
            t = program.clone(chosen).time(phase)
            if row is None:
                row = table[sig] = TableRow(chosen, 0, calibrated_at=step)
            row.observed[chosen] = t
            row.best_clone = min(row.observed, key=lambda c: (row.observed[c], c))
            row.evidence += 1
            calibrating.append(True)
        else:
            chosen = row.best_clone
            calibrating.append(False)
        choices.append(chosen)
        step_times.append(program.clone(chosen).time(phase) * scale)
        oracle_times.append(min(c.time(phase) for c in program.clones))

    return SimReport(sum(step_times), sum(oracle_times), choices, calibrating, trace.phases,
                     step_times, oracle_times, table, program.monitor_overhead)


# ----------------------------------------------------------------- evolution


def observed_means(report: SimReport) -> Dict[int, float]:
    """Mean per-invocation time of each clone over the steps it ran."""
    sums: Dict[int, List[float]] = {}
    for c, t in zip(report.choices, report.step_times):
        sums.setdefault(c, []).append(t)
    return {c: sum(v) / len(v) for c, v in sums.items()}


def evolve_clones(program: AdaptiveProgram, repository, k: int, *,
                  observed: Optional[Mapping[int, float]] = None) -> AdaptiveProgram:
    """Swap the ``k`` slowest clones for the best unused frontier cases.

    Clone speed comes from ``observed`` (clone id to mean time) when given,
    otherwise from the mean of each clone's phase times.  A new clone's phase
    times are the original's divided by the case speedup.  The original
    clone is never replaced.
    """
    if k <= 0:
        return program
    cases = repository.query(QueryCriteria(program_id=program.program_id, output_correct=True))
    used = {c.flags.canonical() for c in program.clones}
    frontier = sorted(pareto_filter(cases), key=lambda c: -c.speedup)
    fresh, seen = [], set(used)
    for case in frontier:
        key = case.opt.canonical()
        if key not in seen:
            seen.add(key)
            fresh.append(case)
    if not fresh:
        raise NoCandidates(f"no unused frontier cases for program {program.program_id}")

    means = dict(observed or {})
    for c in program.clones:
        means.setdefault(c.clone_id, c.mean_time)
    victims = sorted((c for c in program.clones if c.clone_id != 0),
                     key=lambda c: (-means[c.clone_id], c.clone_id))[:k]
    original = program.clones[0]
    next_id = max(c.clone_id for c in program.clones) + 1
    replacements = {}
    for victim, case in zip(victims, fresh):
        replacements[victim.clone_id] = Clone(
            next_id, case.opt, {p: t / case.speedup for p, t in original.phase_times.items()})
        next_id += 1
    clones = tuple(replacements.get(c.clone_id, c) for c in program.clones)
    return replace(program, clones=clones)
