"""Filter plugins that pick profitable optimization cases worth sharing."""

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

from .model import OptimizationCase
from .stats import DEFAULT_NOISE_GATE, NoiseAssessment, assess_noise

TWO_OBJECTIVES = ("speedup", "size_ratio")
THREE_OBJECTIVES = ("speedup", "size_ratio", "compile_time_ratio")


@dataclass(frozen=True)
class MetricPoint:
    case_ref: Tuple[int, int]
    speedup: float
    size_ratio: float
    compile_time_ratio: float = 1.0
    dispersion: float = 0.0

    def __post_init__(self):
        if self.speedup <= 0 or self.size_ratio <= 0:
            raise ValueError("speedup and size_ratio must be positive")
        if self.dispersion < 0:
            raise ValueError("dispersion must be >= 0")

    @classmethod
    def of(cls, case: OptimizationCase) -> "MetricPoint":
        return cls(case.case_id, case.speedup, case.size_ratio, case.compile_time_ratio,
                   case.dispersion)


def stable(case, noise_gate: float = DEFAULT_NOISE_GATE) -> bool:
    return case.dispersion <= noise_gate


def best_time_filter(cases: Sequence[OptimizationCase], min_speedup: float = 1.0,
                     noise_gate: float = DEFAULT_NOISE_GATE) -> List[OptimizationCase]:
    """Correct, stable cases at or above ``min_speedup``, fastest first."""
    kept = [c for c in cases if c.output_correct and stable(c, noise_gate) and c.speedup >= min_speedup]
    return sorted(kept, key=lambda c: -c.speedup)


def _dominates(a, b, objectives) -> bool:
    va = [getattr(a, o) for o in objectives]
    vb = [getattr(b, o) for o in objectives]
    return all(x >= y for x, y in zip(va, vb)) and va != vb


def pareto_filter(cases: Sequence, objectives: Sequence[str] = TWO_OBJECTIVES) -> List:
    """Cases not dominated on ``objectives`` (higher is better), in input order.

    Of several cases with identical values on every objective only the
    earliest survives.  Two objectives use an O(n log n) sweep; more use the
    pairwise check.
    """
    objectives = tuple(objectives)
    if len(objectives) == 2:
        keep = _sweep2(cases, objectives)
    else:
        keep = set()
        seen = set()
        for i, c in enumerate(cases):
            key = tuple(getattr(c, o) for o in objectives)
            if key in seen:
                continue
            seen.add(key)
            if not any(_dominates(d, c, objectives) for d in cases):
                keep.add(i)
    return [c for i, c in enumerate(cases) if i in keep]


def _sweep2(cases, objectives):
    x, y = objectives
    order = sorted(range(len(cases)), key=lambda i: (-getattr(cases[i], x), -getattr(cases[i], y), i))
    keep, best_y = set(), None
    for i in order:
        v = getattr(cases[i], y)
        # everything earlier in the order is at least as good on x
        if best_y is None or v > best_y:
            keep.add(i)
            best_y = v
    return keep


def rank_case(case: OptimizationCase, rank: int, repository) -> OptimizationCase:
    compile_id, baseline_run_id = case.case_id
    repository.set_rank(compile_id, baseline_run_id, rank)
    return replace(case, rank=int(rank))


def shareable(cases: Sequence[OptimizationCase], noise_gate: float = DEFAULT_NOISE_GATE
              ) -> List[OptimizationCase]:
    """Merge selector: correct cases whose timing noise is under the gate."""
    return [c for c in cases if c.output_correct and stable(c, noise_gate)]


FILTERS: Dict[str, Callable] = {
    "get-all-best-flags-time": best_time_filter,
    "get-all-best-flags-time-size-pareto": pareto_filter,
}


__all__ = ["FILTERS", "MetricPoint", "NoiseAssessment", "THREE_OBJECTIVES", "TWO_OBJECTIVES",
           "assess_noise", "best_time_filter", "pareto_filter", "rank_case", "shareable", "stable"]
