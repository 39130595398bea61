"""Acceptance criteria 1 to 10, one test each.

Every test prints a PASS/FAIL line, collected again in the terminal summary.
Oracles are independent of the code under test: brute-force dominance,
subset enumeration, exhaustive search and closed-form phase timings.
"""

import itertools
import random
import statistics
import time
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import gen
from conftest import read_data
from ctune import packets as pk
from ctune.driver import SyntheticBackend, SyntheticProgram
from ctune.filters import MetricPoint, pareto_filter
from ctune.model import (CompilationRecord, ExecutionRecord, FlagCombination, derive_case, q6,
                         record_from_packet, serialize_packet)
from ctune.predictor import leave_one_out_evaluate, train
from ctune.repository import Repository, merge
from ctune.search import ExplorationConfig, FlagSpace, exhaustive_best, explore, one_off_prune
from ctune.service import raw_query, serve
from ctune.unidapt import AdaptationPolicy, AdaptiveProgram, Clone, generate_trace, simulate

FLAGS10 = tuple(f"-f{name}" for name in ("unroll-loops", "tracer", "peel-loops", "gcse", "ivopts",
                                         "tree-pre", "schedule-insns", "rename-registers",
                                         "prefetch-loop-arrays", "inline-functions"))


# 1 ----------------------------------------------------------- packets

def test_01_packet_round_trip(criterion):
    with criterion(1, "packet round-trip") as c:
        start = time.perf_counter()
        rng = random.Random(20090604)
        for _ in range(1000):
            text = serialize_packet(gen.any_record(rng))
            assert serialize_packet(record_from_packet(text)) == text
        comp_text, run_text = read_data("sample_comp.pk"), read_data("sample_run.pk")
        assert "COMPILE_TIME=69.000000" in comp_text.splitlines()
        assert "RUN_TIME=16.355512" in run_text.splitlines()
        comp, run = record_from_packet(comp_text), record_from_packet(run_text)
        assert isinstance(comp, CompilationRecord) and comp.compile_time == 69.0
        assert isinstance(run, ExecutionRecord) and run.run_time == 16.355512
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        c.detail = f"1000 records, {elapsed:.2f}s"


# 2 ------------------------------------------------------------ pareto

def brute_front(values):
    """Indices kept by O(n^2) dominance; identical points keep the earliest."""
    v = np.asarray(values)
    n = len(v)
    if n == 0:
        return []
    ge = (v[None, :, :] >= v[:, None, :]).all(-1)    # ge[i, j]: j at least as good as i
    eq = (v[None, :, :] == v[:, None, :]).all(-1)
    earlier = np.arange(n)[None, :] < np.arange(n)[:, None]
    beaten = (ge & (~eq | earlier)).any(1)
    return [i for i in range(n) if not beaten[i]]


def test_02_pareto_oracle(criterion):
    with criterion(2, "Pareto filter equals brute-force dominance") as c:
        rng = random.Random(2)
        spent, largest = 0.0, 0
        for trial in range(200):
            n = rng.randint(0, 1000)
            largest = max(largest, n)
            grid = trial % 3 == 0
            val = (lambda: rng.randint(1, 12) / 4) if grid else (lambda: rng.uniform(0.5, 2.5))
            pts = [MetricPoint((i, 0), val(), val(), val(), 0.0) for i in range(n)]
            objectives = ("speedup", "size_ratio", "compile_time_ratio") if trial % 10 == 9 \
                else ("speedup", "size_ratio")
            t0 = time.perf_counter()
            front = pareto_filter(pts, objectives)
            spent += time.perf_counter() - t0
            want = brute_front([[getattr(p, o) for o in objectives] for p in pts])
            assert [p.case_ref[0] for p in front] == want
        assert spent < 10.0
        c.detail = f"200 sets, n up to {largest}, filter time {spent:.2f}s"


# 3 ------------------------------------------------------------ pruning

def test_03_one_off_minimal(criterion):
    with criterion(3, "one-off pruning returns the minimal influential set") as c:
        rng = random.Random(3)
        start = time.perf_counter()
        evaluations = []
        for _ in range(100):
            n = rng.randint(1, 10)
            flags = tuple(rng.sample(FLAGS10, n))
            # additive: each flag either does nothing or adds at least 0.2
            weights = {f: (0.0 if rng.random() < 0.5 else rng.uniform(0.2, 0.5)) for f in flags}

            def metric(combo, w=weights):
                return 1.0 + sum(w[f] for f in combo.flags)
            calls = []
            base = FlagCombination("-O3", flags)
            got = one_off_prune(base, lambda cmb: calls.append(cmb) or metric(cmb), 0.02)
            evaluations.append(len(calls))
            assert len(calls) <= n + 1
            m0 = metric(base)
            within = [set(s) for r in range(n + 1) for s in itertools.combinations(flags, r)
                      if abs(metric(FlagCombination("-O3", s)) - m0) / m0 < 0.02]
            smallest = min(len(s) for s in within)
            minimal = [s for s in within if len(s) == smallest]
            assert len(minimal) == 1 and set(got.flags) == minimal[0]
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0
        c.detail = f"100 surrogates, max {max(evaluations)} evaluations, {elapsed:.2f}s"


# 4 -------------------------------------------------------- convergence

def surrogate(seed):
    rng = random.Random(seed)
    effects = {f: (rng.choice([1.0, rng.uniform(0.7, 1.2)]), rng.uniform(0.9, 1.1)) for f in FLAGS10}
    return SyntheticProgram(f"conv{seed}", base_time=10.0, base_size=50000, flag_effects=effects)


def test_04_exploration_convergence(criterion):
    with criterion(4, "uniform random reaches 95% of the exhaustive best") as c:
        start = time.perf_counter()
        space = FlagSpace(("-O3",), FLAGS10)
        hits = []
        for seed in range(20):
            sp = surrogate(seed)
            # records keep microseconds, so the oracle compares quantized times
            best, _ = exhaustive_best(space, lambda cmb: q6(sp.run_time(FlagCombination("-O3"))) /
                                      q6(sp.run_time(cmb)))
            rep = explore(sp.descriptor(), space,
                          ExplorationConfig(budget=500, seed=seed, per_flag_probability=0.5),
                          SyntheticBackend([sp]), Repository.memory())
            assert rep.best_case.speedup <= best
            first = next((it for it, s in rep.history if s is not None and s >= 0.95 * best), None)
            assert first is not None
            hits.append(first)
        median = statistics.median(hits)
        elapsed = time.perf_counter() - start
        assert median <= 100
        assert elapsed < 60.0
        c.detail = f"median first hit {median}, worst {max(hits)}, {elapsed:.1f}s"


# 5 -------------------------------------------------------- determinism

def test_05_determinism(criterion, tmp_path):
    with criterion(5, "seeded explorations give byte-identical repositories") as c:
        programs = [surrogate(100 + i) for i in range(3)]
        space = FlagSpace(("-O3", "-O2"), FLAGS10)
        configs = [ExplorationConfig(strategy, budget=60, seed=9, fixed_length=3)
                   for strategy in ("glob-flags-rnd-uniform", "glob-flags-rnd-fixed",
                                    "glob-flags-one-by-one", "glob-flags-one-off-rnd")]
        snapshots = []
        for name in ("first", "second"):
            with Repository(tmp_path / name, instance_id=42, created="2009-06-04T14:06:47") as repo:
                for sp in programs:
                    for cfg in configs:
                        explore(sp.descriptor(), space, cfg, SyntheticBackend(programs), repo)
            snapshots.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
        assert snapshots[0] == snapshots[1]
        size = sum(len(b) for b in snapshots[0].values())
        assert len(snapshots[0]["compilations.pk"]) > 0
        c.detail = f"{len(snapshots[0])} files, {size} bytes identical"


# 6 -------------------------------------------------------------- merge

def _pair(rng):
    """Two repositories with shared, one-sided and conflicting records."""
    a, b = Repository.memory(), Repository.memory()
    ids = gen.register_basics(a, name=f"p{rng.randrange(10**6)}")
    merge(a, b)
    _, base = gen.add_case(a, rng, ids, [10.0])
    merge(a, b)
    anchor = base[0].run_id
    expect = {"new": 0, "duplicate": len(b), "conflicting": 0}
    conflicts = []
    for _ in range(rng.randint(0, 12)):
        kind = rng.choice(["a", "b", "both", "conflict"])
        times = [rng.uniform(1, 20) for _ in range(rng.randint(0, 3))]
        if kind == "a":
            gen.add_case(a, rng, ids, times, baseline_run=anchor)
        elif kind == "b":
            gen.add_case(b, rng, ids, times, baseline_run=anchor)
            expect["new"] += 1 + len(times)
        elif kind == "both":
            comp, runs = gen.add_case(a, rng, ids, times, baseline_run=anchor)
            b.record(comp)
            for r in runs:
                b.record(r)
            expect["duplicate"] += 1 + len(runs)
        else:
            comp, runs = gen.add_case(a, rng, ids, [5.0], baseline_run=anchor)
            b.record(comp)
            b.record(replace(runs[0], run_time=6.0))
            expect["duplicate"] += 1
            expect["conflicting"] += 1
            conflicts.append(runs[0])
    return a, b, expect, conflicts


def test_06_merge_algebra(criterion):
    with criterion(6, "merge is idempotent, counts exactly, never overwrites") as c:
        rng = random.Random(6)
        start = time.perf_counter()
        totals = {"new": 0, "duplicate": 0, "conflicting": 0}
        for _ in range(100):
            a, b, expect, conflicts = _pair(rng)
            # self-merge and copy-then-remerge add nothing
            again = merge(a, a)
            assert (again.new, again.duplicate, again.conflicting) == (0, len(a), 0)
            copy = Repository.memory()
            first = merge(a, copy)
            second = merge(a, copy)
            assert first.new == len(a) and (second.new, second.conflicting) == (0, 0)
            before = len(a)
            stats = merge(b, a)
            got = {"new": stats.new, "duplicate": stats.duplicate, "conflicting": stats.conflicting}
            assert got == expect
            assert len(a) == before + expect["new"]
            for r in conflicts:
                assert a.execution(r.run_id) == r
            assert merge(b, a).new == 0
            for k in totals:
                totals[k] += got[k]
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0
        c.detail = (f"100 pairs, new={totals['new']} duplicate={totals['duplicate']} "
                    f"conflicting={totals['conflicting']}, {elapsed:.2f}s")


# 7 ---------------------------------------------------------- predictor

def test_07_leave_one_out(criterion):
    with criterion(7, "leave-one-out on a locally constant family") as c:
        start = time.perf_counter()
        repo = Repository.memory()
        backend, _, compiler, platform = gen.explore_family(gen.family(n=50), repo, budget=64)
        nn = leave_one_out_evaluate(repo, backend, compiler, platform)
        perfect = sum(1 for r in nn if r.fraction >= 1.0 - 1e-9)
        pf = leave_one_out_evaluate(repo, backend, compiler, platform, kind="per_flag_probability")
        mean_pf = sum(r.fraction for r in pf) / len(pf)
        elapsed = time.perf_counter() - start
        assert len(nn) == 50
        assert perfect >= 48
        assert mean_pf >= 0.9
        assert elapsed < 60.0
        c.detail = f"1-NN {perfect}/50 at 1.0, per-flag mean {mean_pf:.3f}, {elapsed:.1f}s"


# 8 ------------------------------------------------------------ service

def test_08_service_contract(criterion):
    with criterion(8, "prediction service contract") as c:
        repo = Repository.memory()
        _, _, compiler, platform = gen.explore_family(gen.family(n=12, clusters=4, seed=8), repo,
                                                      budget=32)
        model = train(repo, compiler, platform)
        server = serve(repo)
        try:
            for e in model.entries:
                body = pk.format_packet([
                    ("PLATFORM_ID", str(platform)), ("COMPILER_ID", str(compiler)),
                    ("MODEL", "nearest_neighbor"), ("OBJECTIVE", "time"),
                    ("STATIC_FEATURE_VECTOR", " " + pk.format_vector(e.features))])
                resp = pk.parse_fields(raw_query(server.url, body))
                assert resp["STATUS"] == "OK"
                assert resp["OPT_FLAGS"] == e.best.canonical()
                assert resp["DISTANCE"] == "0.000000"
            for bad in ("", "this is not a packet", "PLATFORM_ID=1\n"):
                assert pk.parse_fields(raw_query(server.url, bad))["STATUS"] == "MALFORMED_QUERY"
            with ThreadPoolExecutor(20) as pool:
                bodies = list(pool.map(lambda _: raw_query(server.url, body), range(100)))
            assert len(bodies) == 100 and len(set(bodies)) == 1
        finally:
            server.shutdown()
        c.detail = f"{len(model.entries)} exact matches, 100 concurrent identical"


# 9 ------------------------------------------------------------ unidapt

CENTERS = {1: {"PAPI_L1_DCM": 100.0, "PAPI_TOT_INS": 5000.0},
           2: {"PAPI_L1_DCM": 900.0, "PAPI_TOT_INS": 2000.0}}


def two_clone(overhead):
    return AdaptiveProgram(1, (Clone(0, FlagCombination("-O3"), {1: 1.0, 2: 2.0}),
                               Clone(1, FlagCombination("-O3", ("-funroll-loops",)), {1: 2.0, 2: 1.0})),
                           overhead)


def test_09_unidapt_regret(criterion):
    with criterion(9, "two-phase adaptation regret") as c:
        start = time.perf_counter()
        n1, n2 = 6000, 6000
        trace = generate_trace([(1, n1), (2, n2)], CENTERS, seed=9)
        # closed form: the right clone always costs 1.0 s
        oracle = n1 * 1.0 + n2 * 1.0
        plain = simulate(two_clone(0.0), trace, AdaptationPolicy())
        assert plain.oracle_time == oracle
        assert plain.steady_mismatches == 0
        steady = [(ch, ph) for ch, ph, cal in zip(plain.choices, plain.phases, plain.calibrating)
                  if not cal]
        assert all(ch == ph - 1 for ch, ph in steady)
        assert plain.regret < 0.01
        watched = simulate(two_clone(0.002), trace, AdaptationPolicy())
        assert watched.regret < 0.015
        assert time.perf_counter() - start < 10.0
        c.detail = (f"{len(trace)} steps, regret {100 * plain.regret:.3f}% and "
                    f"{100 * watched.regret:.3f}% with 0.2% overhead")


# 10 ----------------------------------------------------------- speedup

def test_10_speedup_arithmetic(criterion):
    with criterion(10, "speedup arithmetic on the sample baseline") as c:
        rng = random.Random(10)
        base_comp = gen.compilation(rng, bin_size=48870, obj_md5="a" * 32, compile_time=69.0)
        comp = gen.compilation(rng, bin_size=48870, obj_md5="b" * 32, compile_time=69.0)
        base = [gen.execution(rng, run_id=1000, run_id_associate=1000, compile_id=base_comp.compile_id,
                              run_time=16.355512, dataset_number=1, output_correct=True)]
        runs = [gen.execution(rng, run_id=2000, run_id_associate=1000, compile_id=comp.compile_id,
                              run_time=8.177756, dataset_number=1, output_correct=True)]
        case = derive_case(comp, runs, base, base_comp)
        assert abs(case.speedup - 2.0) <= 1e-9
        assert pk.fmt_float(case.speedup) == "2.000000"
        c.detail = f"speedup {case.speedup!r}"
