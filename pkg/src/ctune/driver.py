"""Compile-and-run backends.

:class:`SyntheticBackend` is a closed-form surrogate of a compiler and a
benchmark: every flag scales run time, binary size and compile time by a
fixed factor.  :class:`RealBackend` shells out to an installed compiler and
runs the produced binary on a program's datasets.  Both feed
:func:`compile` and :func:`run`, which turn outcomes into repository records.
"""

import contextlib
import fcntl
import glob
import hashlib
import logging
import os
import platform as _platform
import random
import resource
import shlex
import signal
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from . import packets as pk
from .errors import (CompileFailed, CompilerNotFound, MissingReference, RunFailed, Timeout,
                     UnsupportedRuntime)
from .model import (CompilationRecord, CompilerDescriptor, DatasetEntry, EnvironmentDescriptor,
                    ExecutionRecord, FeatureVector, FlagCombination, IdFactory, PlatformDescriptor,
                    ProgramDescriptor, WallClock, q6, stamp)

log = logging.getLogger(__name__)

COMPILE_TIMEOUT = 300.0
RUN_TIMEOUT = 60.0

# environment variables copied verbatim into record extension fields
COMPILE_ENV_FIELDS = {
    "CCC_OPT_FINE": "OPT_FINE",
    "CCC_OPT_PAR_STATIC": "OPT_PAR_STATIC",
    "CCC_ICI_PASSES_USE": "ICI_PASSES_USE",
    "CCC_ICI_FEATURES_STATIC_EXTRACT": "ICI_FEATURES_STATIC_EXTRACT",
    "CCC_ARCH_CFG": "ARCH_CFG",
    "CCC_ARCH_SIZE": "ARCH_SIZE",
}
RUN_ENV_FIELDS = {
    "CCC_RUN_POWER": "RUN_POWER",
    "CCC_RUN_ENERGY": "RUN_ENERGY",
    "CCC_PAR_DYNAMIC": "PAR_DYNAMIC",
}
# accepted so that existing scripts keep working, but they change nothing here
IGNORED_ENV = ("CCC_ICI_PASSES_RECORD", "ICI_PROG_FEAT_PASS", "CCC_HC_PAPI_USE", "CCC_GPROF",
               "CCC_OPROF", "CCC_OPROF_PARAM", "CCC_URL", "CCC_USER", "CCC_PASS", "CCC_SSL",
               "CCC_C_URL", "CCC_C_DB", "CCC_C_USER", "CCC_C_PASS", "CCC_C_SSL", "CCC_CT_URL",
               "CCC_CT_USER", "CCC_CT_PASS", "CCC_CT_SSL")


class CompileTimeout(Timeout, CompileFailed):
    pass


class RunTimeout(Timeout, RunFailed):
    pass


@dataclass(frozen=True)
class CompileOutcome:
    success: bool
    compile_time: float
    bin_size: int
    obj_md5: str
    log: str = ""
    artifact: object = None

    def __post_init__(self):
        if self.success and (self.bin_size <= 0 or not self.obj_md5):
            raise ValueError("a successful compile needs a binary size and an md5")


@dataclass(frozen=True)
class RunOutcome:
    times: Tuple[Tuple[float, float, float], ...]
    output_correct: bool
    outputs: Tuple[Dict[str, bytes], ...] = ()
    profile: Dict[str, Tuple[float, int, float]] = field(default_factory=dict)
    hardware_counters: Dict[str, int] = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.times:
            raise ValueError("a run outcome needs at least one repeat")
        if any(t < 0 for rep in self.times for t in rep):
            raise ValueError("times must be >= 0")

    @property
    def run_times(self) -> List[float]:
        return [t[0] for t in self.times]


# ------------------------------------------------------------ synthetic model


Effect = Tuple[float, float, float]   # time, size, compile-time multipliers


@dataclass(frozen=True)
class SyntheticProgram:
    """Closed-form stand-in for a benchmark.

    Run time of one repeat is ``base_time`` times the time multipliers of the
    base level and of every active flag, times each interaction multiplier
    whose flag set is active, times the dataset modifier, times
    ``1 + N(0, noise_sigma)``.
    """

    name: str
    base_time: float
    base_size: int
    flag_effects: Dict[str, Effect] = field(default_factory=dict)
    interactions: Tuple[Tuple[FrozenSet[str], float], ...] = ()
    feature_vector: Optional[FeatureVector] = None
    noise_sigma: float = 0.0
    dataset_modifiers: Dict[int, float] = field(default_factory=dict)
    base_compile_time: float = 1.0
    level_effects: Dict[str, Effect] = field(default_factory=dict)
    faulty_flags: FrozenSet[str] = frozenset()
    dataset_count: int = 0
    id: int = 0

    def __post_init__(self):
        effects = {k: _effect(v) for k, v in self.flag_effects.items()}
        object.__setattr__(self, "flag_effects", effects)
        object.__setattr__(self, "level_effects", {k: _effect(v) for k, v in self.level_effects.items()})
        object.__setattr__(self, "interactions",
                           tuple((frozenset(s), float(m)) for s, m in self.interactions))
        object.__setattr__(self, "faulty_flags", frozenset(self.faulty_flags))
        object.__setattr__(self, "dataset_modifiers",
                           {int(k): float(v) for k, v in self.dataset_modifiers.items()})
        if self.base_time <= 0 or self.base_size <= 0 or self.base_compile_time <= 0:
            raise ValueError("base time, size and compile time must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        mults = [m for e in list(effects.values()) + list(self.level_effects.values()) for m in e]
        mults += [m for _, m in self.interactions] + list(self.dataset_modifiers.values())
        if any(m <= 0 for m in mults):
            raise ValueError("all multipliers must be positive")
        if not self.dataset_count:
            object.__setattr__(self, "dataset_count", max(self.dataset_modifiers, default=1))

    def effective_flags(self, combo: FlagCombination) -> Tuple[str, Tuple[str, ...]]:
        """Base level and sorted flags of ``combo`` that change the generated code."""
        touched = set().union(*(s for s, _ in self.interactions)) if self.interactions else set()
        active = combo.flags + combo.platform_flags
        kept = sorted(f for f in active
                      if self.flag_effects.get(f, (1.0, 1.0, 1.0)) != (1.0, 1.0, 1.0)
                      or f in touched or f in self.faulty_flags)
        level = combo.base_level
        if self.level_effects.get(level, (1.0, 1.0, 1.0)) == (1.0, 1.0, 1.0):
            level = ""
        return level, tuple(kept)

    def _product(self, combo: FlagCombination, slot: int) -> float:
        value = self.level_effects.get(combo.base_level, (1.0, 1.0, 1.0))[slot]
        for f in combo.flags + combo.platform_flags:
            value *= self.flag_effects.get(f, (1.0, 1.0, 1.0))[slot]
        return value

    def run_time(self, combo: FlagCombination, dataset: int = 1) -> float:
        """Noise-free run time."""
        active = set(combo.flags + combo.platform_flags)
        t = self.base_time * self._product(combo, 0)
        for flags, mult in self.interactions:
            if flags <= active:
                t *= mult
        return t * self.dataset_modifiers.get(dataset, 1.0)

    def bin_size(self, combo: FlagCombination) -> int:
        return max(1, int(round(self.base_size * self._product(combo, 1))))

    def compile_time(self, combo: FlagCombination) -> float:
        return self.base_compile_time * self._product(combo, 2)

    def md5(self, combo: FlagCombination) -> str:
        level, kept = self.effective_flags(combo)
        return hashlib.md5(f"{self.name}|{level}|{' '.join(kept)}".encode()).hexdigest()

    def faulty(self, combo: FlagCombination) -> bool:
        return bool(self.faulty_flags & set(combo.flags + combo.platform_flags))

    def descriptor(self) -> ProgramDescriptor:
        return ProgramDescriptor(
            self.name, source_dir=f"synthetic:{self.name}",
            datasets=tuple(DatasetEntry(n, f"synthetic-input-{n}") for n in range(1, self.dataset_count + 1)),
            output_files=("stdout",))

    # packet form
    def to_fields(self):
        out = [
            ("SPROG_NAME", self.name),
            ("BASE_TIME", pk.fmt_num(self.base_time)),
            ("BASE_SIZE", str(self.base_size)),
            ("BASE_COMPILE_TIME", pk.fmt_num(self.base_compile_time)),
            ("NOISE_SIGMA", pk.fmt_num(self.noise_sigma)),
            ("DATASETS", str(self.dataset_count)),
            ("FLAG_EFFECTS", _fmt_effects(self.flag_effects)),
            ("LEVEL_EFFECTS", _fmt_effects(self.level_effects)),
            ("INTERACTIONS", ", ".join("+".join(sorted(s)) + "=" + pk.fmt_num(m)
                                       for s, m in self.interactions)),
            ("DATASET_MODIFIERS", ", ".join(f"{k}={pk.fmt_num(v)}"
                                            for k, v in sorted(self.dataset_modifiers.items()))),
            ("FAULTY_FLAGS", " ".join(sorted(self.faulty_flags))),
        ]
        if self.feature_vector is not None:
            out.append(("STATIC_FEATURE_VECTOR", " " + self.feature_vector.format()))
        return out

    @classmethod
    def from_fields(cls, f: Mapping[str, str]) -> "SyntheticProgram":
        for key in ("SPROG_NAME", "BASE_TIME", "BASE_SIZE"):
            if key not in f:
                from .errors import MissingRequiredKey
                raise MissingRequiredKey(f"SPROG packet missing {key}")
        interactions = []
        for token in _tokens(f.get("INTERACTIONS", "")):
            names, _, mult = token.rpartition("=")
            interactions.append((frozenset(names.split("+")), float(mult)))
        fv = f.get("STATIC_FEATURE_VECTOR", "").strip()
        return cls(
            name=f["SPROG_NAME"],
            base_time=float(f["BASE_TIME"]),
            base_size=int(f["BASE_SIZE"]),
            base_compile_time=float(f.get("BASE_COMPILE_TIME", "1")),
            noise_sigma=float(f.get("NOISE_SIGMA", "0")),
            dataset_count=int(f.get("DATASETS", "0")),
            flag_effects=_parse_effects(f.get("FLAG_EFFECTS", "")),
            level_effects=_parse_effects(f.get("LEVEL_EFFECTS", "")),
            interactions=tuple(interactions),
            dataset_modifiers={int(k): float(v) for k, v in
                               (t.rpartition("=")[::2] for t in _tokens(f.get("DATASET_MODIFIERS", "")))},
            faulty_flags=frozenset(f.get("FAULTY_FLAGS", "").split()),
            feature_vector=FeatureVector.parse(fv) if fv else None,
        )


def _effect(v) -> Effect:
    v = tuple(float(x) for x in v)
    if len(v) == 2:
        v = v + (1.0,)
    if len(v) != 3:
        raise ValueError(f"flag effect needs (time, size[, compile]) multipliers, got {v}")
    return v


def _tokens(value: str) -> List[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def _parse_effects(value: str) -> Dict[str, Effect]:
    out = {}
    for token in _tokens(value):
        name, sep, body = token.rpartition("=")
        if not sep:
            raise ValueError(f"bad effect entry {token!r}")
        out[name] = _effect(body.split(":"))
    return out


def _fmt_effects(effects: Mapping[str, Effect]) -> str:
    return ", ".join(f"{k}=" + ":".join(pk.fmt_num(x) for x in v) for k, v in effects.items())


def load_synthetic_programs(text: str) -> List[SyntheticProgram]:
    return [SyntheticProgram.from_fields(f) for f in pk.parse_stream(text) if "SPROG_NAME" in f]


def dump_synthetic_programs(programs: Sequence[SyntheticProgram]) -> str:
    return pk.format_stream(p.to_fields() for p in programs)


# ------------------------------------------------------------------ backends


class Backend:
    """Interface shared by the synthetic surrogate and the real driver."""

    name = "abstract"
    capabilities: FrozenSet[str] = frozenset()

    def platform(self) -> PlatformDescriptor:
        raise NotImplementedError

    def environment(self) -> EnvironmentDescriptor:
        raise NotImplementedError

    def compiler(self) -> CompilerDescriptor:
        raise NotImplementedError

    def compile(self, program: ProgramDescriptor, flags: FlagCombination,
                env: Mapping[str, str]) -> CompileOutcome:
        raise NotImplementedError

    def run(self, program: ProgramDescriptor, artifact, dataset: int, repeats: int,
            env: Mapping[str, str], seed: int = 0) -> RunOutcome:
        raise NotImplementedError

    def features(self, program: ProgramDescriptor) -> Optional[FeatureVector]:
        return None

    def artifact_from(self, compilation: CompilationRecord, program: ProgramDescriptor):
        """Rebuild the handle ``run`` needs from a recorded compilation."""
        raise NotImplementedError


class SyntheticBackend(Backend):
    name = "synthetic"
    capabilities = frozenset({"deterministic", "features", "virtual-time"})
    USER_FRACTION = 0.845

    def __init__(self, programs: Sequence[SyntheticProgram] = ()):
        self.programs = {p.name: p for p in programs}

    def add(self, program: SyntheticProgram) -> ProgramDescriptor:
        self.programs[program.name] = program
        return program.descriptor()

    def program(self, program: ProgramDescriptor) -> SyntheticProgram:
        try:
            return self.programs[program.name]
        except KeyError:
            raise RunFailed(f"synthetic backend has no program {program.name!r}") from None

    def platform(self):
        return PlatformDescriptor("synthetic-surrogate", "closed-form timing model")

    def environment(self):
        return EnvironmentDescriptor("synthetic")

    def compiler(self):
        return CompilerDescriptor("synthetic", "synthetic {flags} {sources} -o {output}")

    def compile(self, program, flags, env):
        sp = self.program(program)
        return CompileOutcome(True, sp.compile_time(flags), sp.bin_size(flags), sp.md5(flags),
                              artifact=flags)

    def run(self, program, artifact, dataset, repeats, env, seed=0):
        sp = self.program(program)
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 1 <= dataset <= sp.dataset_count:
            raise RunFailed(f"{sp.name} has no dataset {dataset}")
        clean = sp.run_time(artifact, dataset)
        level, kept = sp.effective_flags(artifact)
        key = f"{sp.name}|{level}|{' '.join(kept)}|{dataset}|{seed}"
        rng = random.Random(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big"))
        times = []
        for _ in range(repeats):
            factor = 1.0 + rng.gauss(0.0, sp.noise_sigma) if sp.noise_sigma else 1.0
            t = clean * max(factor, 1e-3)
            times.append((t, t * self.USER_FRACTION, t * (1 - self.USER_FRACTION)))
        out = hashlib.sha256(f"{sp.name}|{dataset}".encode()).digest()
        if sp.faulty(artifact):
            out += b"corrupt"
        return RunOutcome(tuple(times), True, tuple({"stdout": out} for _ in times), seed=seed)

    def features(self, program):
        return self.program(program).feature_vector

    def artifact_from(self, compilation, program):
        return compilation.opt


@contextlib.contextmanager
def _dir_lock(directory: Path):
    fd = os.open(directory / ".ctune.lock", os.O_RDWR | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    proc.wait()


SOURCE_PATTERNS = ("*.c", "*.cc", "*.cpp", "*.cxx", "*.f", "*.f90")


class RealBackend(Backend):
    """Drive an installed compiler through a descriptor's invocation template.

    The template receives ``{flags}``, ``{sources}`` and ``{output}``; the
    binary is written to ``<source_dir>/a.out`` and each dataset's command
    line is appended to it and run through the shell in the source directory.
    """

    name = "real"
    capabilities = frozenset({"wall-clock", "output-validation"})
    BINARY = "a.out"

    def __init__(self, compiler: CompilerDescriptor, *, compile_timeout: float = COMPILE_TIMEOUT,
                 run_timeout: float = RUN_TIMEOUT, counter_hook: Optional[str] = None):
        self._compiler = compiler
        self.compile_timeout = compile_timeout
        self.run_timeout = run_timeout
        self.counter_hook = counter_hook

    def platform(self):
        uname = _platform.uname()
        return PlatformDescriptor(f"{uname.machine}-{uname.processor or 'cpu'}-{os.cpu_count()}cores")

    def environment(self):
        return EnvironmentDescriptor(f"{_platform.system()} {_platform.release()}")

    def compiler(self):
        return self._compiler

    def _child_env(self, env, extra=None):
        child = dict(os.environ)
        child.update(env)
        child.update(extra or {})
        return child

    def compile(self, program, flags, env):
        src = Path(program.source_dir)
        exe = shlex.split(self._compiler.invocation_template)[0]
        if not exe or (not os.path.isabs(exe) and _which(exe) is None) or (
                os.path.isabs(exe) and not os.access(exe, os.X_OK)):
            raise CompilerNotFound(f"compiler {self._compiler.name!r}: executable {exe!r} not found")
        sources = sorted({p for pat in SOURCE_PATTERNS for p in glob.glob(str(src / pat))})
        output = src / self.BINARY
        cmd = self._compiler.invocation_template.format(
            flags=" ".join(shlex.quote(f) for f in flags.command_flags()),
            sources=" ".join(shlex.quote(os.path.basename(s)) for s in sources),
            output=shlex.quote(self.BINARY))
        with _dir_lock(src):
            if output.exists():
                output.unlink()
            start = time.perf_counter()
            proc = subprocess.Popen(cmd, shell=True, cwd=src, stdout=subprocess.PIPE,
                                    stderr=subprocess.STDOUT, env=self._child_env(env),
                                    start_new_session=True)
            try:
                out, _ = proc.communicate(timeout=self.compile_timeout)
            except subprocess.TimeoutExpired:
                _kill_group(proc)
                raise CompileTimeout(f"compilation exceeded {self.compile_timeout}s") from None
            elapsed = time.perf_counter() - start
            text = out.decode(errors="replace")
            if proc.returncode != 0 or not output.exists():
                return CompileOutcome(False, elapsed, 0, "", text, None)
            data = output.read_bytes()
        return CompileOutcome(True, elapsed, len(data), hashlib.md5(data).hexdigest(), text,
                              str(output))

    def artifact_from(self, compilation, program):
        return str(Path(program.source_dir) / self.BINARY)

    def run(self, program, artifact, dataset, repeats, env, seed=0):
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        entry = program.dataset(dataset)
        src = Path(program.source_dir)
        binary = Path(artifact)
        if not binary.exists():
            raise RunFailed(f"binary {binary} does not exist")
        cmd = f"{shlex.quote(str(binary))} {entry.command_line}"
        child_env = self._child_env(env, {"CCC_LOOP_WRAPPER": str(entry.loop_wrapper_bound)})
        preexec = _pin(env.get("CCC_PROCESSOR_NUM", ""))
        times, outputs, counters = [], [], {}
        with _dir_lock(src):
            for _ in range(repeats):
                for name in program.output_files:
                    if name != "stdout":
                        with contextlib.suppress(FileNotFoundError):
                            (src / name).unlink()
                ru0 = resource.getrusage(resource.RUSAGE_CHILDREN)
                start = time.perf_counter()
                proc = subprocess.Popen(cmd, shell=True, cwd=src, stdout=subprocess.PIPE,
                                        stderr=subprocess.PIPE, env=child_env,
                                        start_new_session=True, preexec_fn=preexec)
                try:
                    out, err = proc.communicate(timeout=self.run_timeout)
                except subprocess.TimeoutExpired:
                    _kill_group(proc)
                    raise RunTimeout(f"run exceeded {self.run_timeout}s; process group killed") from None
                wall = time.perf_counter() - start
                ru1 = resource.getrusage(resource.RUSAGE_CHILDREN)
                if proc.returncode != 0:
                    raise RunFailed(f"exit status {proc.returncode}: {err.decode(errors='replace')[-500:]}")
                produced = {"stdout": out}
                for name in program.output_files:
                    if name != "stdout":
                        path = src / name
                        produced[name] = path.read_bytes() if path.exists() else b""
                outputs.append(produced)
                times.append((wall, max(0.0, ru1.ru_utime - ru0.ru_utime),
                              max(0.0, ru1.ru_stime - ru0.ru_stime)))
                if self.counter_hook:
                    counters = self._counters(src, child_env)
        return RunOutcome(tuple(times), True, tuple(outputs), hardware_counters=counters, seed=seed)

    def _counters(self, cwd, env) -> Dict[str, int]:
        proc = subprocess.run(self.counter_hook, shell=True, cwd=cwd, env=env,
                              capture_output=True, timeout=self.run_timeout)
        if proc.returncode != 0:
            log.warning("counter hook failed: %s", proc.stderr.decode(errors="replace"))
            return {}
        return {k: int(v) for k, v in pk.parse_fields(proc.stdout.decode()).items()}


def _which(exe):
    import shutil
    return shutil.which(exe)


def _pin(value: str):
    if not value.strip():
        return None
    try:
        cpu = int(value)
    except ValueError:
        log.warning("ignoring CCC_PROCESSOR_NUM=%r", value)
        return None

    def pin():
        with contextlib.suppress(OSError, AttributeError):
            os.sched_setaffinity(0, {cpu})
    return pin


# ------------------------------------------------------------ record building


@dataclass
class ExperimentContext:
    """Identity and bookkeeping shared by every compile and run of a session."""

    platform_id: int
    environment_id: int
    compiler_id: int
    ids: IdFactory = field(default_factory=IdFactory)
    clock: object = field(default_factory=WallClock)
    env: Mapping[str, str] = field(default_factory=dict)
    notes: str = ""


def open_context(repository, backend: Backend, *, ids=None, clock=None, env=None,
                 notes: str = "") -> ExperimentContext:
    """Register the backend's platform, environment and compiler; return a context.

    New entities take their ids from ``ids`` so seeded sessions stay reproducible.
    """
    ids = ids or IdFactory()
    env = dict(env or {})

    def reg(kind, desc):
        return repository.register_entity(kind, replace(desc, id=ids()))
    return ExperimentContext(
        platform_id=reg("platform", backend.platform()),
        environment_id=reg("environment", backend.environment()),
        compiler_id=reg("compiler", backend.compiler()),
        ids=ids, clock=clock or WallClock(), env=env,
        notes=notes or env.get("CCC_NOTES", ""))


def _notes(ctx: ExperimentContext, extra: str = "") -> str:
    return "; ".join(x for x in (ctx.notes, extra) if x)


def _extensions(env: Mapping[str, str], table: Mapping[str, str]) -> Dict[str, str]:
    return {field_: env[var] for var, field_ in table.items() if var in env}


def compile(backend: Backend, program: ProgramDescriptor, flags: FlagCombination,
            ctx: ExperimentContext, program_id: Optional[int] = None
            ) -> Tuple[CompilationRecord, CompileOutcome]:
    """Compile ``program`` with ``flags`` and build its compilation record.

    Auxiliary flags from ``CCC_OPT_PLATFORM`` join ``flags.platform_flags``.
    A failed compile raises :class:`CompileFailed` carrying the failure
    record in ``exc.record`` (zero size, empty md5) and the log.
    """
    aux = tuple(f for f in ctx.env.get("CCC_OPT_PLATFORM", "").split()
                if f not in flags.platform_flags and f not in flags.flags)
    if aux:
        flags = replace(flags, platform_flags=flags.platform_flags + aux)
    outcome = backend.compile(program, flags, ctx.env)
    date, clock_time = stamp(ctx.clock)
    ctx.clock.advance(outcome.compile_time)
    rec = CompilationRecord(
        compile_id=ctx.ids(), platform_id=ctx.platform_id, environment_id=ctx.environment_id,
        compiler_id=ctx.compiler_id, program_id=program_id or program.id, opt=flags,
        compile_time=outcome.compile_time, bin_size=outcome.bin_size if outcome.success else 0,
        obj_md5=outcome.obj_md5 if outcome.success else "", date=date, time=clock_time,
        notes=_notes(ctx, "" if outcome.success else "compilation failed"),
        extensions=_extensions(ctx.env, COMPILE_ENV_FIELDS))
    if not outcome.success:
        exc = CompileFailed(f"compilation of {program.name} with {flags} failed", outcome.log)
        exc.record = rec
        raise exc
    return rec, outcome


def runs_from_env(env: Mapping[str, str], default: int = 1) -> int:
    value = env.get("CCC_RUNS", "").strip()
    return int(value) if value else default


def run(backend: Backend, program: ProgramDescriptor, compilation: CompilationRecord,
        dataset_number: int, ctx: ExperimentContext, *, repeats: Optional[int] = None,
        reference: Optional[Sequence[Mapping[str, bytes]]] = None,
        baseline_run_id: Optional[int] = None, artifact=None, seed: int = 0
        ) -> Tuple[List[ExecutionRecord], RunOutcome]:
    """Execute a compiled program and build one execution record per repeat.

    Without ``baseline_run_id`` this is the reference run: its outputs are
    returned for later comparison and its first record is its own associate.
    Otherwise ``reference`` must hold the reference outputs, and a run is
    correct only when every repeat reproduces them byte for byte.
    """
    runtime = ctx.env.get("CCC_RUN_RE", "").strip()
    if runtime:
        raise UnsupportedRuntime(f"runtime environment {runtime!r} is not supported")
    if not compilation.succeeded:
        raise RunFailed(f"compilation {compilation.compile_id} failed; nothing to run")
    is_reference = baseline_run_id is None
    if not is_reference and reference is None:
        raise MissingReference(f"no reference outputs stored for dataset {dataset_number}")
    repeats = repeats if repeats is not None else runs_from_env(ctx.env)
    try:
        entry = program.dataset(dataset_number)
    except ValueError as exc:
        raise RunFailed(str(exc)) from None
    if artifact is None:
        artifact = backend.artifact_from(compilation, program)
    outcome = backend.run(program, artifact, dataset_number, repeats, ctx.env, seed)
    if len(outcome.times) != repeats:
        raise RunFailed(f"backend returned {len(outcome.times)} repeats, expected {repeats}")

    notes = [f"seed={seed}"] if "deterministic" in backend.capabilities else []
    if is_reference:
        correct = True
    else:
        ref = reference[0] if reference else {}
        verdicts = [out == ref for out in outcome.outputs] or [False]
        correct = all(verdicts)
        if len(set(verdicts)) > 1:
            notes.append("repeats disagree on output correctness")
    outcome = replace(outcome, output_correct=correct)

    processor = ctx.env.get("CCC_PROCESSOR_NUM", "").strip()
    records = []
    anchor = baseline_run_id
    for wall, user, sys_ in outcome.times:
        run_id = ctx.ids()
        if anchor is None:
            anchor = run_id
        date, clock_time = stamp(ctx.clock)
        ctx.clock.advance(wall)
        records.append(ExecutionRecord(
            run_id=run_id, run_id_associate=anchor, compile_id=compilation.compile_id,
            compiler_id=compilation.compiler_id, program_id=compilation.program_id,
            platform_id=compilation.platform_id, environment_id=compilation.environment_id,
            dataset_number=dataset_number, bin_size=compilation.bin_size, output_correct=correct,
            run_time=wall, run_time_user=user, run_time_sys=sys_,
            run_command_line=f"{dataset_number}) {entry.command_line}",
            profile=outcome.profile, hardware_counters=outcome.hardware_counters,
            processor_num=int(processor) if processor.lstrip("-").isdigit() else -1,
            date=date, time=clock_time, notes=_notes(ctx, "; ".join(notes)),
            extensions=_extensions(ctx.env, RUN_ENV_FIELDS)))
    return records, outcome


def skip_if_unchanged(new_md5: str, repository, program_id: int, dataset: int,
                      baseline_run_id: Optional[int] = None) -> Optional[List[ExecutionRecord]]:
    """Earlier executions of identical code on the same dataset, if any.

    Returns the runs of the earliest matching compilation; with
    ``baseline_run_id`` only runs associated with that baseline qualify.
    """
    if not new_md5:
        return None
    for comp in repository.compilations_with_md5(new_md5):
        if comp.program_id != program_id:
            continue
        runs = [e for e in repository.executions(comp.compile_id) if e.dataset_number == dataset
                and (baseline_run_id is None or e.run_id_associate == baseline_run_id)
                and "CACHED_RUN_ID" not in e.extensions]
        if runs:
            return runs
    return None


def reuse_executions(cached: Sequence[ExecutionRecord], compilation: CompilationRecord,
                     ctx: ExperimentContext, baseline_run_id: int) -> List[ExecutionRecord]:
    """Records for ``compilation`` that reuse timings measured for identical code."""
    out = []
    for e in cached:
        out.append(replace(
            e, run_id=ctx.ids(), run_id_associate=baseline_run_id,
            compile_id=compilation.compile_id, bin_size=compilation.bin_size,
            notes=_notes(ctx, "execution skipped: object code unchanged"),
            extensions={**e.extensions, "CACHED_RUN_ID": str(e.run_id)}))
    return out


__all__ = [
    "Backend", "CompileOutcome", "CompileTimeout", "ExperimentContext", "RealBackend",
    "RunOutcome", "RunTimeout", "SyntheticBackend", "SyntheticProgram", "compile",
    "dump_synthetic_programs", "load_synthetic_programs", "open_context", "reuse_executions",
    "run", "runs_from_env", "skip_if_unchanged", "q6",
]
