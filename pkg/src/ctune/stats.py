"""Aggregation of repeated timings and the noise gate."""

import statistics
from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyInput

AGGREGATORS = {
    "min": min,
    "median": statistics.median,
    "mean": statistics.fmean,
}

DEFAULT_AGGREGATOR = "median"
DEFAULT_NOISE_GATE = 0.05


def aggregate(times: Sequence[float], aggregator: str = DEFAULT_AGGREGATOR) -> float:
    if not times:
        raise EmptyInput("no timings to aggregate")
    try:
        fn = AGGREGATORS[aggregator]
    except KeyError:
        raise ValueError(f"unknown aggregator {aggregator!r}; use min, median or mean") from None
    return float(fn(times))


@dataclass(frozen=True)
class NoiseAssessment:
    aggregate: float
    dispersion: float
    stable: bool


def assess_noise(run_times: Sequence[float], aggregator: str = DEFAULT_AGGREGATOR,
                 gate: float = DEFAULT_NOISE_GATE) -> NoiseAssessment:
    """Aggregate repeated run times and flag them unstable when spread exceeds ``gate``.

    Dispersion is ``(max - min) / median``, a relative range that stays
    meaningful for the two or three repeats typically available.
    """
    if not run_times:
        raise EmptyInput("assess_noise needs at least one run time")
    agg = aggregate(run_times, aggregator)
    spread = max(run_times) - min(run_times)
    med = statistics.median(run_times)
    if spread == 0:
        dispersion = 0.0
    elif med == 0:
        dispersion = float("inf")
    else:
        dispersion = spread / med
    return NoiseAssessment(agg, dispersion, dispersion <= gate)
