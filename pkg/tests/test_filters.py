import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

import gen
from ctune.errors import EmptyInput, UnknownCase
from ctune.filters import (MetricPoint, THREE_OBJECTIVES, best_time_filter, pareto_filter,
                           rank_case, shareable)
from ctune.repository import QueryCriteria, Repository
from ctune.stats import assess_noise


def pt(s, z, i=0, c=1.0, d=0.0):
    return MetricPoint((i, 0), s, z, c, d)


def brute_pareto(points, objectives=("speedup", "size_ratio")):
    # O(n^2) oracle; identical points keep the earliest
    out = []
    for i, p in enumerate(points):
        vp = [getattr(p, o) for o in objectives]
        beaten = False
        for j, q in enumerate(points):
            vq = [getattr(q, o) for o in objectives]
            if all(a >= b for a, b in zip(vq, vp)) and (vq != vp or j < i):
                beaten = True
                break
        if not beaten:
            out.append(p)
    return out


def test_pareto_examples():
    pts = [pt(2.0, 0.9, 1), pt(1.5, 1.2, 2), pt(1.4, 1.1, 3)]
    assert pareto_filter(pts) == pts[:2]
    assert pareto_filter(pts[:1]) == pts[:1]
    twins = [pt(1.5, 1.0, 1), pt(1.5, 1.0, 2)]
    assert pareto_filter(twins) == twins[:1]
    assert pareto_filter([]) == []


def random_points(rng, n, grid=False):
    val = (lambda: rng.randint(1, 8) / 4) if grid else (lambda: rng.uniform(0.5, 2.5))
    return [pt(val(), val(), i, val()) for i in range(n)]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 120), st.booleans())
def test_pareto_matches_bruteforce(seed, n, grid):
    pts = random_points(random.Random(seed), n, grid)
    front = pareto_filter(pts)
    assert front == brute_pareto(pts)
    assert pareto_filter(front) == front
    for p in pts:
        if p not in front:
            assert any(q.speedup >= p.speedup and q.size_ratio >= p.size_ratio for q in front)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 60), st.booleans())
def test_three_objective_pareto(seed, n, grid):
    pts = random_points(random.Random(seed), n, grid)
    assert pareto_filter(pts, THREE_OBJECTIVES) == brute_pareto(pts, THREE_OBJECTIVES)


class Case:
    # stand-in exposing the attributes the filters read
    def __init__(self, speedup, correct=True, dispersion=0.0, size_ratio=1.0):
        self.speedup, self.output_correct = speedup, correct
        self.dispersion, self.size_ratio = dispersion, size_ratio


def test_best_time_filter():
    cases = [Case(1.01), Case(2.0), Case(0.9)]
    assert best_time_filter(cases, 1.05) == [cases[1]]
    assert best_time_filter([], 1.05) == []
    assert best_time_filter([Case(3.0, correct=False)]) == []
    assert best_time_filter([Case(3.0, dispersion=0.4)]) == []
    many = [Case(s) for s in (1.2, 1.9, 1.5, 1.1)]
    got = best_time_filter(many, 1.0)
    assert [c.speedup for c in got] == [1.9, 1.5, 1.2, 1.1]
    assert set(pareto_filter(got)) <= set(got)


def test_assess_noise():
    n = assess_noise([10.0, 10.0, 10.0])
    assert (n.aggregate, n.dispersion, n.stable) == (10.0, 0.0, True)
    n = assess_noise([10.0, 10.2, 9.8])
    assert n.aggregate == 10.0 and n.dispersion == pytest.approx(0.04) and n.stable
    n = assess_noise([10.0, 15.0])
    assert n.dispersion == pytest.approx(0.4) and not n.stable
    with pytest.raises(EmptyInput):
        assess_noise([])


def test_rank_case():
    repo = Repository.memory()
    rng = random.Random(4)
    ids = gen.register_basics(repo)
    _, base = gen.add_case(repo, rng, ids, [10.0])
    gen.add_case(repo, rng, ids, [5.0], baseline_run=base[0].run_id)
    (case,) = repo.query(QueryCriteria.all())
    ranked = rank_case(case, 5, repo)
    assert ranked.rank == 5
    assert len(repo.query(QueryCriteria(min_rank=5))) == 1
    assert repo.query(QueryCriteria(min_rank=6)) == []
    rank_case(case, 7, repo)
    assert repo.query(QueryCriteria(min_rank=6))[0].rank == 7
    with pytest.raises(UnknownCase):
        rank_case(replace(ranked, baseline_run_id=1), 1, repo)


def test_shareable():
    good = Case(2.0)
    assert shareable([good, Case(2.0, correct=False), Case(2.0, dispersion=0.2)]) == [good]
