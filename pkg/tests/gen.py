"""Randomized record builders shared by property and acceptance tests."""

import random
import string

from ctune.model import CompilationRecord, ExecutionRecord, FlagCombination

_TEXT = string.ascii_letters + string.digits + " _-./=,{}()<>"


def rid(rng):
    return rng.getrandbits(128) or 1


def text(rng, n=12):
    return "".join(rng.choice(_TEXT) for _ in range(rng.randint(0, n)))


def flag_combo(rng):
    pool = [f"-f{w}" for w in ("unroll-loops", "tracer", "peephole2", "no-tree-ccp",
                                "inline-limit=64", "schedule-insns", "rename-registers",
                                "align-loops=10", "no-ivopts", "prefetch-loop-arrays")]
    picked = rng.sample(pool, rng.randint(0, len(pool)))
    cut = rng.randint(0, len(picked))
    return FlagCombination(rng.choice(["-O1", "-O2", "-O3", "-Os", ""]),
                           tuple(picked[:cut]), tuple(picked[cut:]))


def micros(rng, hi=100.0):
    return round(rng.uniform(0, hi), 6)


def extensions(rng, taken):
    out = {}
    for _ in range(rng.randint(0, 3)):
        key = rng.choice(["RUN_POWER", "RUN_ENERGY", "PAR_DYNAMIC", "OPT_FINE", "X_EXTRA",
                          "RUN_TIME1", "ICI_PASSES_USE"])
        if key not in taken:
            out[key] = rng.choice(["", text(rng)])
    return out


def compilation(rng, **over):
    md5 = "".join(rng.choice("0123456789abcdef") for _ in range(32))
    failed = rng.random() < 0.1
    kw = dict(
        compile_id=rid(rng), platform_id=rid(rng), environment_id=rid(rng),
        compiler_id=rid(rng), program_id=rid(rng), opt=flag_combo(rng),
        compile_time=micros(rng), bin_size=0 if failed else rng.randint(1, 10**7),
        obj_md5="" if failed else md5, date="2009-06-04", time="14:06:47",
        notes=text(rng), extensions=extensions(rng, CompilationRecord.KEYS),
    )
    kw.update(over)
    return CompilationRecord(**kw)


def execution(rng, **over):
    profile = {f"fn{i}": (rng.uniform(0, 20), rng.randint(0, 10**6), rng.random())
               for i in range(rng.randint(0, 3))}
    counters = {c: rng.randint(0, 2**40) for c in
                rng.sample(["PAPI_TOT_INS", "PAPI_FP_INS", "PAPI_BR_INS", "PAPI_L1_DCM"],
                           rng.randint(0, 4))}
    run_id = rid(rng)
    kw = dict(
        run_id=run_id, run_id_associate=run_id if rng.random() < 0.3 else rid(rng),
        compile_id=rid(rng), compiler_id=rid(rng), program_id=rid(rng),
        platform_id=rid(rng), environment_id=rid(rng), dataset_number=rng.randint(1, 20),
        bin_size=rng.randint(0, 10**7), output_correct=rng.random() < 0.9,
        run_time=micros(rng), run_time_user=micros(rng), run_time_sys=micros(rng, 5),
        run_command_line=text(rng, 30), profile=profile, hardware_counters=counters,
        processor_num=rng.randint(-1, 7), rank=rng.randint(-3, 10),
        date="2009-06-04", time="14:35:26", notes=text(rng),
        extensions=extensions(rng, ExecutionRecord.KEYS),
    )
    kw.update(over)
    return ExecutionRecord(**kw)


def any_record(rng):
    return compilation(rng) if rng.random() < 0.5 else execution(rng)


def seeded(seed):
    return random.Random(seed)


def register_basics(repo, name="prog"):
    from ctune.model import (CompilerDescriptor, DatasetEntry, EnvironmentDescriptor,
                             PlatformDescriptor, ProgramDescriptor)
    plat = repo.register_entity("platform", PlatformDescriptor("amd-athlon64-3700"))
    env = repo.register_entity("environment", EnvironmentDescriptor("linux"))
    comp = repo.register_entity("compiler", CompilerDescriptor("gcc44-plugin"))
    prog = repo.register_entity("program", ProgramDescriptor(
        name, datasets=(DatasetEntry(1, "in.dat"), DatasetEntry(2, "in2.dat"))))
    return dict(platform_id=plat, environment_id=env, compiler_id=comp, program_id=prog)


def add_case(repo, rng, ids, run_times, *, baseline_run=None, bin_size=40000, correct=True,
             opt=None, dataset=1):
    """Record a compilation plus runs; with ``baseline_run=None`` it becomes the baseline."""
    comp = CompilationRecord(compile_id=rid(rng), opt=opt or flag_combo(rng),
                             compile_time=10.0, bin_size=bin_size,
                             obj_md5="".join(rng.choice("0123456789abcdef") for _ in range(32)),
                             date="2009-06-04", time="14:06:47", **ids)
    repo.record(comp)
    runs = []
    anchor = baseline_run
    for t in run_times:
        run_id = rid(rng)
        if anchor is None:
            anchor = run_id
        e = ExecutionRecord(run_id=run_id, run_id_associate=anchor, compile_id=comp.compile_id,
                            compiler_id=ids["compiler_id"], program_id=ids["program_id"],
                            platform_id=ids["platform_id"], environment_id=ids["environment_id"],
                            dataset_number=dataset, bin_size=bin_size, output_correct=correct,
                            run_time=t)
        repo.record(e)
        runs.append(e)
    return comp, runs


FAMILY_FLAGS = tuple(f"-f{c}" for c in "abcdefghij")


def family(n=50, clusters=5, seed=0, improving=3):
    """Synthetic programs in feature clusters; each cluster has its own improving
    flags and every other flag leaves the code unchanged, so programs that share
    a cluster share their optimum."""
    from ctune.driver import SyntheticProgram
    from ctune.model import FeatureVector
    rng = random.Random(seed)
    centers = [{f"ft{i}": rng.uniform(0, 100) for i in range(1, 9)} for _ in range(clusters)]
    good = [{f: rng.uniform(0.6, 0.9) for f in rng.sample(FAMILY_FLAGS, improving)}
            for _ in range(clusters)]
    out = []
    for i in range(n):
        c = i % clusters
        feats = {k: round(v + rng.gauss(0, 1.0), 3) for k, v in centers[c].items()}
        out.append(SyntheticProgram(
            f"fam{i:02d}", base_time=rng.uniform(5, 20), base_size=rng.randint(20000, 80000),
            flag_effects={f: (m, 1.0) for f, m in good[c].items()},
            feature_vector=FeatureVector("static", feats)))
    return out


def explore_family(programs, repo, budget=64, seed=0):
    from ctune.driver import SyntheticBackend
    from ctune.search import ExplorationConfig, FlagSpace, explore
    backend = SyntheticBackend(programs)
    space = FlagSpace(("-O3",), FAMILY_FLAGS)
    reports = [explore(sp.descriptor(), space, ExplorationConfig(budget=budget, seed=seed + i),
                       backend, repo) for i, sp in enumerate(programs)]
    compiler = repo.find_entity("compiler", "synthetic").id
    platform = repo.find_entity("platform", "synthetic-surrogate").id
    return backend, reports, compiler, platform
