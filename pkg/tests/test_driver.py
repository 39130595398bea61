import os
import shutil
import textwrap
import time
from dataclasses import replace

import pytest

from ctune.driver import (RealBackend, RunTimeout, SyntheticBackend, SyntheticProgram, compile,
                          dump_synthetic_programs, load_synthetic_programs, open_context, run,
                          reuse_executions, skip_if_unchanged)
from ctune.errors import (CompileFailed, CompilerNotFound, MissingReference, RunFailed, Timeout,
                          UnsupportedRuntime)
from ctune.model import (CompilerDescriptor, DatasetEntry, FeatureVector, FlagCombination,
                         IdFactory, ProgramDescriptor, VirtualClock)
from ctune.repository import Repository

SP = SyntheticProgram(
    "prog1", base_time=10.0, base_size=48870,
    flag_effects={"-fa": (0.8, 0.9), "-fb": (0.5, 1.0), "-fnoop": (1.0, 1.0), "-fslow": (1.3, 1.1, 2.0)},
    interactions=((frozenset({"-fa", "-fb"}), 1.5),),
    dataset_modifiers={1: 1.0, 2: 1.7}, faulty_flags=frozenset({"-fbad"}),
    feature_vector=FeatureVector("static", {"ft1": 9, "ft2": 4}))


def oracle_time(sp, flags, dataset=1):
    # independent restatement of the surrogate formula
    t = sp.base_time
    for f in flags:
        t *= sp.flag_effects.get(f, (1.0, 1.0, 1.0))[0]
    for s, m in sp.interactions:
        if s.issubset(flags):
            t *= m
    return t * sp.dataset_modifiers.get(dataset, 1.0)


def combo(*flags):
    return FlagCombination("-O3", tuple(flags))


@pytest.fixture
def setup():
    repo = Repository.memory()
    backend = SyntheticBackend([SP])
    ctx = open_context(repo, backend, ids=IdFactory(1), clock=VirtualClock())
    desc = SP.descriptor()
    pid = repo.register_entity("program", desc)
    return repo, backend, ctx, replace(desc, id=pid)


def test_compile_sizes_and_md5(setup):
    repo, backend, ctx, prog = setup
    rec, out = compile(backend, prog, combo(), ctx)
    assert rec.bin_size == 48870 and out.success
    rec, _ = compile(backend, prog, combo("-fa"), ctx)
    assert rec.bin_size == 43983
    a, _ = compile(backend, prog, combo("-fa"), ctx)
    b, _ = compile(backend, prog, combo("-fa", "-fnoop"), ctx)
    c, _ = compile(backend, prog, combo("-fb"), ctx)
    assert a.obj_md5 == b.obj_md5 != c.obj_md5
    assert compile(backend, prog, combo("-fslow"), ctx)[0].compile_time == 2.0


def test_aux_flags_go_to_platform_flags(setup):
    repo, backend, ctx, prog = setup
    ctx.env = {"CCC_OPT_PLATFORM": "-msse2", "CCC_OPT_FINE": "x"}
    rec, _ = compile(backend, prog, combo("-fa"), ctx)
    assert rec.opt.flags == ("-fa",)
    assert rec.opt.platform_flags == ("-msse2",)
    assert rec.extensions == {"OPT_FINE": "x"}


@pytest.mark.parametrize("flags, dataset, expected", [
    ((), 1, 10.0), (("-fa",), 1, 8.0), (("-fa", "-fb"), 1, 6.0), (("-fa", "-fnoop"), 2, 13.6)])
def test_run_time_closed_form(setup, flags, dataset, expected):
    repo, backend, ctx, prog = setup
    comp, _ = compile(backend, prog, combo(*flags), ctx)
    repo.record(comp)
    recs, out = run(backend, prog, comp, dataset, ctx, repeats=3)
    assert len(out.times) == 3 and len(recs) == 3
    for t in out.run_times:
        assert t == pytest.approx(expected, rel=1e-12)
        assert t == pytest.approx(oracle_time(SP, set(flags), dataset), rel=1e-12)
    assert recs[0].is_baseline and recs[0].output_correct
    assert all(r.run_id_associate == recs[0].run_id for r in recs)
    assert recs[0].run_command_line.startswith(f"{dataset}) ")


def test_noise_is_seeded_and_reproducible(setup):
    repo, backend, ctx, prog = setup
    noisy = replace(SP, name="noisy", noise_sigma=0.05)
    backend.add(noisy)
    desc = noisy.descriptor()
    a = backend.run(desc, combo("-fa"), 1, 5, {}, seed=3)
    b = backend.run(desc, combo("-fa"), 1, 5, {}, seed=3)
    c = backend.run(desc, combo("-fa"), 1, 5, {}, seed=4)
    assert a == b and a.times != c.times
    assert len(set(a.run_times)) == 5


def test_output_validation(setup):
    repo, backend, ctx, prog = setup
    base, _ = compile(backend, prog, combo(), ctx)
    recs, ref = run(backend, prog, base, 1, ctx)
    good, _ = compile(backend, prog, combo("-fa"), ctx)
    bad, _ = compile(backend, prog, combo("-fbad"), ctx)
    r_good, _ = run(backend, prog, good, 1, ctx, reference=ref.outputs, baseline_run_id=recs[0].run_id)
    r_bad, _ = run(backend, prog, bad, 1, ctx, reference=ref.outputs, baseline_run_id=recs[0].run_id)
    assert r_good[0].output_correct and not r_bad[0].output_correct
    assert r_good[0].run_id_associate == recs[0].run_id
    with pytest.raises(MissingReference):
        run(backend, prog, good, 1, ctx, baseline_run_id=recs[0].run_id)


def test_runtime_env_rejected(setup):
    repo, backend, ctx, prog = setup
    comp, _ = compile(backend, prog, combo(), ctx)
    ctx.env = {"CCC_RUN_RE": "unisim"}
    with pytest.raises(UnsupportedRuntime):
        run(backend, prog, comp, 1, ctx)


def test_runs_from_env(setup):
    repo, backend, ctx, prog = setup
    comp, _ = compile(backend, prog, combo(), ctx)
    ctx.env = {"CCC_RUNS": "4", "CCC_PROCESSOR_NUM": "2"}
    recs, _ = run(backend, prog, comp, 1, ctx)
    assert len(recs) == 4 and recs[0].processor_num == 2


def test_skip_if_unchanged(setup):
    repo, backend, ctx, prog = setup
    comp, _ = compile(backend, prog, combo("-fa"), ctx)
    repo.record(comp)
    recs, _ = run(backend, prog, comp, 1, ctx)
    for r in recs:
        repo.record(r)
    twin, _ = compile(backend, prog, combo("-fa", "-fnoop"), ctx)
    hit = skip_if_unchanged(twin.obj_md5, repo, prog.id, 1)
    assert hit == recs
    assert skip_if_unchanged("f" * 32, repo, prog.id, 1) is None
    assert skip_if_unchanged(twin.obj_md5, repo, prog.id, 2) is None
    repo.record(twin)
    copies = reuse_executions(hit, twin, ctx, recs[0].run_id)
    assert [c.run_time for c in copies] == [r.run_time for r in recs]
    assert copies[0].extensions["CACHED_RUN_ID"] == str(recs[0].run_id)


def test_sprog_round_trip():
    text = dump_synthetic_programs([SP])
    assert "FLAG_EFFECTS=-fa=0.8:0.9:1" in text
    (back,) = load_synthetic_programs(text)
    assert back == SP


def test_sprog_flag_with_equals():
    (sp,) = load_synthetic_programs("SPROG_NAME=x\nBASE_TIME=2\nBASE_SIZE=100\n"
                                    "FLAG_EFFECTS=-finline-limit=64=0.5:1.0\n")
    assert sp.run_time(combo("-finline-limit=64")) == 1.0


def test_synthetic_validation():
    with pytest.raises(ValueError):
        SyntheticProgram("x", base_time=0.0, base_size=1)
    with pytest.raises(ValueError):
        SyntheticProgram("x", base_time=1.0, base_size=1, flag_effects={"-fa": (0.0, 1.0)})


# ---------------------------------------------------------------- real backend

CC = shutil.which("cc") or shutil.which("gcc")


@pytest.fixture
def c_program(tmp_path):
    src = tmp_path / "prog"
    src.mkdir()
    (src / "main.c").write_text(textwrap.dedent("""\
        #include <stdio.h>
        #include <stdlib.h>
        int main(int argc, char **argv) {
            int n = argc > 1 ? atoi(argv[1]) : 10;
            long s = 0;
            for (int i = 0; i < n; i++) s += i;
            printf("%ld\\n", s);
            return 0;
        }
    """))
    return ProgramDescriptor("sum", str(src), (DatasetEntry(1, "100"), DatasetEntry(2, "1000")),
                             output_files=("stdout",))


@pytest.mark.skipif(CC is None, reason="no C compiler")
def test_real_backend_compile_and_run(c_program):
    repo = Repository.memory()
    backend = RealBackend(CompilerDescriptor("cc", CC + " {flags} {sources} -o {output}"))
    ctx = open_context(repo, backend, ids=IdFactory(2))
    pid = repo.register_entity("program", c_program)
    prog = replace(c_program, id=pid)
    base, out = compile(backend, prog, FlagCombination("-O2"), ctx)
    assert out.success and base.bin_size > 0 and len(base.obj_md5) == 32
    recs, ref = run(backend, prog, base, 1, ctx, repeats=2)
    assert len(recs) == 2 and ref.outputs[0]["stdout"] == b"4950\n"
    other, _ = compile(backend, prog, FlagCombination("-O1"), ctx)
    again, _ = run(backend, prog, other, 1, ctx, reference=ref.outputs, baseline_run_id=recs[0].run_id)
    assert again[0].output_correct
    wrong, _ = run(backend, prog, other, 2, ctx, reference=ref.outputs, baseline_run_id=recs[0].run_id)
    assert not wrong[0].output_correct


@pytest.mark.skipif(CC is None, reason="no C compiler")
def test_real_backend_compile_failure(c_program):
    with open(os.path.join(c_program.source_dir, "main.c"), "a") as fh:
        fh.write("syntax error")
    backend = RealBackend(CompilerDescriptor("cc", CC + " {flags} {sources} -o {output}"))
    repo = Repository.memory()
    ctx = open_context(repo, backend)
    with pytest.raises(CompileFailed) as err:
        compile(backend, c_program, FlagCombination("-O2"), ctx, program_id=1)
    assert err.value.record.bin_size == 0 and err.value.record.obj_md5 == ""


def test_real_backend_missing_compiler(c_program):
    backend = RealBackend(CompilerDescriptor("nope", "no-such-cc-xyz {flags} {sources} -o {output}"))
    with pytest.raises(CompilerNotFound, match="nope"):
        backend.compile(c_program, FlagCombination("-O2"), {})


def test_real_backend_timeout_kills_group(tmp_path):
    src = tmp_path / "slow"
    src.mkdir()
    marker = tmp_path / "child.pid"
    script = src / "a.out"
    script.write_text(f"#!/bin/sh\nsleep 30 &\necho $! > {marker}\nwait\n")
    script.chmod(0o755)
    prog = ProgramDescriptor("slow", str(src), (DatasetEntry(1, ""),))
    backend = RealBackend(CompilerDescriptor("sh", "true {flags} {sources} -o {output}"), run_timeout=0.5)
    with pytest.raises(RunFailed) as err:
        backend.run(prog, str(script), 1, 1, {})
    assert isinstance(err.value, Timeout) and isinstance(err.value, RunTimeout)
    child = int(marker.read_text())
    for _ in range(50):
        try:
            os.kill(child, 0)
        except ProcessLookupError:
            break
        # a zombie still answers kill(0); check its state
        with open(f"/proc/{child}/stat") as fh:
            if fh.read().split()[2] == "Z":
                break
        time.sleep(0.05)
    else:
        pytest.fail("orphan process survived the timeout")
