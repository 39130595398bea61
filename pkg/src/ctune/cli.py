"""``ctune``: one command for compiling, running, exploring, filtering,
sharing, training, predicting and adaptation.

Program directories hold a few small files between invocations::

    _ccc_program          backend, program name and program id of this directory
    _ccc_info_datasets    dataset command lines, one per line (real backend)
    _comp                 packet of the last compilation
    _run                  packets of the last run
    _ccc_reference/<n>/   reference outputs and baseline run id of dataset n

Exit status is 0 on success, 1 on operational failure (a diagnostics packet
goes to standard error) and 2 on usage errors.
"""

import argparse
import logging
import os
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import packets as pk
from .driver import (COMPILE_ENV_FIELDS, IGNORED_ENV, RUN_ENV_FIELDS, RealBackend, SyntheticBackend,
                     compile as drive_compile, load_synthetic_programs, open_context,
                     reuse_executions, run as drive_run, runs_from_env, skip_if_unchanged)
from .errors import CTuneError, DanglingReference, MissingReference
from .filters import FILTERS, THREE_OBJECTIVES, TWO_OBJECTIVES, best_time_filter, pareto_filter, shareable
from .model import (CompilationRecord, CompilerDescriptor, DatasetEntry, FeatureVector,
                    FlagCombination, ProgramDescriptor, parse_entity_id, serialize_packet)
from .predictor import KINDS, OBJECTIVES, Model, PredictionQuery, predict, train
from .repository import ENV_LOCAL, ENV_SHARED, QueryCriteria, Repository, env_paths, merge
from .search import STRATEGIES, DEFAULT_EPSILON, ExplorationConfig, FlagSpace, explore

log = logging.getLogger("ctune")

PROGRAM_FILE = "_ccc_program"
DATASETS_FILE = "_ccc_info_datasets"
COMP_FILE = "_comp"
RUN_FILE = "_run"
REFERENCE_DIR = "_ccc_reference"

# a modest default space for real compilers when no --space is given
DEFAULT_GCC_FLAGS = (
    "-funroll-loops", "-funroll-all-loops", "-fpeel-loops", "-ftracer", "-fno-inline",
    "-finline-functions", "-fomit-frame-pointer", "-fno-tree-vectorize", "-fprefetch-loop-arrays",
    "-fschedule-insns", "-fno-schedule-insns2", "-frename-registers", "-fno-gcse",
    "-fno-ivopts", "-fno-tree-pre", "-fno-strict-aliasing", "-falign-loops=16",
    "-fno-if-conversion", "-fsplit-loops", "-fno-peephole2",
)


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- helpers

def _ccc_env() -> dict:
    return {k: v for k, v in os.environ.items() if k.startswith("CCC_")}


def _open_repo(path: Optional[str], which: str, writable: bool = True) -> Repository:
    if not path:
        var = ENV_LOCAL if which == "local" else ENV_SHARED
        raise UsageError(f"no {which} repository: pass --{'db' if which == 'local' else 'shared-db'} "
                         f"or set {var}")
    return Repository(path, writable=writable, create=writable)


def _repo_path(args, name: str) -> str:
    """``local`` / ``shared`` or a literal path."""
    if name == "local":
        return args.db
    if name == "shared":
        return args.shared_db
    return name


def _emit(args, fields, human: Optional[List[str]] = None):
    if args.packets or human is None:
        sys.stdout.write(pk.format_packet(fields))
    else:
        sys.stdout.write("\n".join(human) + "\n")


def _table(fields) -> List[str]:
    width = max((len(k) for k, _ in fields), default=0)
    return [f"{k.lower():<{width}}  {v}" for k, v in fields]


def _entity_id(repo: Repository, kind: str, value: Optional[str]) -> int:
    if value is None:
        known = repo.entities(kind)
        if len(known) != 1:
            raise UsageError(f"{len(known)} {kind}s in {repo.path}; pick one with --{kind}")
        return known[0].id
    if value.isdigit():
        return parse_entity_id(value)
    found = repo.find_entity(kind, value)
    if found is None:
        raise UsageError(f"no {kind} named {value!r} in {repo.path}")
    return found.id


def _read_program_file(directory: Path) -> dict:
    path = directory / PROGRAM_FILE
    return pk.parse_fields(path.read_text()) if path.exists() else {}


def _datasets(directory: Path):
    path = directory / DATASETS_FILE
    if not path.exists():
        return (DatasetEntry(1, ""),)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    out = []
    for n, ln in enumerate(lines, 1):
        head, sep, rest = ln.partition(")")
        out.append(DatasetEntry(n, rest.strip() if sep and head.strip().isdigit() else ln))
    return tuple(out) or (DatasetEntry(1, ""),)


class Session:
    """Backend and program resolved for one program directory."""

    def __init__(self, backend, program: ProgramDescriptor, spec: str, directory: Path):
        self.backend = backend
        self.program = program
        self.spec = spec
        self.directory = directory

    @classmethod
    def resolve(cls, spec: Optional[str], directory: Path, program_name: Optional[str] = None,
                output_files=None, repo: Optional[Repository] = None) -> "Session":
        saved = _read_program_file(directory)
        spec = spec or saved.get("BACKEND")
        if not spec:
            raise UsageError("no backend: give synthetic:<file> or real:<compiler>, "
                             "or compile in this directory first")
        kind, sep, arg = spec.partition(":")
        if not sep:
            kind, arg = "real", spec
        if kind == "synthetic":
            path = Path(arg)
            if not path.is_absolute():
                path = (directory / path) if (directory / path).exists() else path.resolve()
            if not path.exists() and path.with_name(path.name + ".sprog").exists():
                path = path.with_name(path.name + ".sprog")
            if not path.exists():
                raise UsageError(f"synthetic program file {arg!r} not found")
            programs = load_synthetic_programs(path.read_text())
            name = program_name or saved.get("PROGRAM_NAME")
            if name is None:
                if len(programs) == 1:
                    name = programs[0].name
                else:
                    matching = [p.name for p in programs if p.name == directory.resolve().name]
                    if not matching:
                        raise UsageError(f"{path} defines {len(programs)} programs; pick one with --program")
                    name = matching[0]
            backend = SyntheticBackend(programs)
            if name not in backend.programs:
                raise UsageError(f"no synthetic program {name!r} in {path}")
            return cls(backend, backend.programs[name].descriptor(), f"synthetic:{path.resolve()}",
                       directory)
        if kind == "real":
            if not arg:
                raise UsageError("real backend needs a compiler name, e.g. real:gcc")
            known = repo.find_entity("compiler", arg) if repo is not None else None
            desc = known or CompilerDescriptor(arg, f"{arg} {{flags}} {{sources}} -o {{output}}")
            outputs = tuple(output_files or saved.get("OUTPUT_FILES", "stdout").split())
            program = ProgramDescriptor(program_name or saved.get("PROGRAM_NAME") or directory.resolve().name,
                                        str(directory.resolve()), _datasets(directory), outputs)
            return cls(RealBackend(replace(desc, id=0)), program, f"real:{arg}", directory)
        raise UsageError(f"unknown backend {kind!r}: use synthetic:<file> or real:<compiler>")

    def register(self, repo: Repository, ids=None) -> int:
        # identical descriptors resolve to the id already stored
        return repo.register_entity("program", replace(self.program, id=ids() if ids else 0))

    def save(self, program_id: int):
        fields = [("BACKEND", self.spec), ("PROGRAM_NAME", self.program.name),
                  ("PROGRAM_ID", str(program_id)),
                  ("OUTPUT_FILES", " ".join(self.program.output_files))]
        (self.directory / PROGRAM_FILE).write_text(pk.format_packet(fields))


def _context(args, repo, session):
    env = _ccc_env()
    if getattr(args, "notes", None):
        env["CCC_NOTES"] = args.notes
    return open_context(repo, session.backend, env=env)


def _reference_dir(directory: Path, dataset: int) -> Path:
    return directory / REFERENCE_DIR / str(dataset)


def _save_reference(directory, dataset, outputs, baseline_run_id):
    ref = _reference_dir(directory, dataset)
    (ref / "out").mkdir(parents=True, exist_ok=True)
    for old in (ref / "out").iterdir():
        old.unlink()
    for name, data in outputs.items():
        (ref / "out" / name.replace(os.sep, "_")).write_bytes(data)
    (ref / "BASELINE").write_text(pk.format_packet([("RUN_ID_ASSOCIATE", str(baseline_run_id))]))


def _load_reference(directory, dataset):
    ref = _reference_dir(directory, dataset)
    if not (ref / "BASELINE").exists():
        return None, None
    baseline = parse_entity_id(pk.parse_fields((ref / "BASELINE").read_text())["RUN_ID_ASSOCIATE"])
    outputs = {p.name: p.read_bytes() for p in sorted((ref / "out").iterdir())}
    return [outputs], baseline


def _print_cases(args, cases, extra=()):
    if args.packets:
        sys.stdout.write(pk.format_stream([_case_fields(c) for c in cases] + list(extra)))
        return
    for c in cases:
        print(f"{c.compilation.compile_id}/{c.baseline_run_id}  speedup={c.speedup:.6f}  "
              f"size_ratio={c.size_ratio:.6f}  rank={c.rank}  {c.opt.canonical()}")


def _case_fields(c):
    return [("COMPILE_ID", str(c.compilation.compile_id)),
            ("RUN_ID_ASSOCIATE", str(c.baseline_run_id)),
            ("PROGRAM_ID", str(c.program_id)),
            ("DATASET_NUMBER", str(c.dataset_number)),
            ("OPT_FLAGS", c.opt.canonical()),
            ("SPEEDUP", pk.fmt_float(c.speedup)),
            ("SIZE_RATIO", pk.fmt_float(c.size_ratio)),
            ("COMPILE_TIME_RATIO", pk.fmt_float(c.compile_time_ratio)),
            ("OUTPUT_CORRECT", "1" if c.output_correct else "0"),
            ("RANK", str(c.rank))]


def _criteria(args) -> QueryCriteria:
    kw = {}
    for name in ("program", "platform", "compiler"):
        value = getattr(args, name, None)
        if value is not None:
            kw[f"{name}_id"] = _entity_id(args.repo, name, value)
    for name in ("dataset_number", "min_speedup", "min_rank"):
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    if getattr(args, "correct_only", False):
        kw["output_correct"] = True
    return QueryCriteria(**kw) if kw else QueryCriteria.all()


# ---------------------------------------------------------------- commands

def cmd_register(args):
    directory = Path(args.dir)
    repo = args.repo = _open_repo(args.db, "local")
    session = Session.resolve(args.backend, directory, args.program, args.output_files, repo)
    ctx = _context(args, repo, session)
    pid = session.register(repo)
    session.save(pid)
    fields = [("PLATFORM_ID", str(ctx.platform_id)), ("ENVIRONMENT_ID", str(ctx.environment_id)),
              ("COMPILER_ID", str(ctx.compiler_id)), ("PROGRAM_ID", str(pid))]
    _emit(args, fields, _table(fields))


def cmd_comp(args):
    directory = Path(args.dir)
    tokens = list(args.flags)
    aux = []
    if "--aux" in tokens:
        i = tokens.index("--aux")
        tokens, aux = tokens[:i], tokens[i + 1:]
    repo = args.repo = _open_repo(args.db, "local")
    session = Session.resolve(args.compiler, directory, args.program, None, repo)
    try:
        flags = FlagCombination.parse(" ".join(tokens))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ctx = _context(args, repo, session)
    if aux:
        ctx.env["CCC_OPT_PLATFORM"] = " ".join(aux + ctx.env.get("CCC_OPT_PLATFORM", "").split())
    pid = session.register(repo, ctx.ids)
    try:
        comp, _ = drive_compile(session.backend, session.program, flags, ctx, pid)
    except CTuneError as exc:
        rec = getattr(exc, "record", None)
        if rec is not None:
            repo.record(rec)
            (directory / COMP_FILE).write_text(serialize_packet(rec))
        if getattr(exc, "log", ""):
            sys.stderr.write(exc.log)
        raise
    cached = False
    if not args.no_cache:
        for old in repo.compilations_with_md5(comp.obj_md5):
            if old.program_id == pid and old.opt == comp.opt and old.compiler_id == comp.compiler_id:
                comp, cached = old, True
                break
    if not cached:
        repo.record(comp)
    session.save(pid)
    (directory / COMP_FILE).write_text(serialize_packet(comp))
    fields = [("COMPILE_ID", str(comp.compile_id)), ("OPT_FLAGS", comp.opt.canonical()),
              ("BIN_SIZE", str(comp.bin_size)), ("OBJ_MD5", comp.obj_md5),
              ("COMPILE_TIME", pk.fmt_float(comp.compile_time)), ("CACHED", "1" if cached else "0")]
    _emit(args, fields, _table(fields))


def cmd_run(args):
    if args.dataset < 1:
        raise UsageError("dataset numbers start at 1")
    if args.baseline not in (0, 1):
        raise UsageError("the baseline marker is 1 (reference run) or 0")
    directory = Path(args.dir)
    comp_file = directory / COMP_FILE
    if not comp_file.exists():
        raise MissingReference(f"no {COMP_FILE} in {directory}: compile first")
    comp = CompilationRecord.from_fields(pk.parse_fields(comp_file.read_text()))
    repo = args.repo = _open_repo(args.db, "local")
    session = Session.resolve(None, directory, None, None, repo)
    ctx = _context(args, repo, session)
    repeats = args.repeats or runs_from_env(ctx.env)
    if args.baseline:
        runs, outcome = drive_run(session.backend, session.program, comp, args.dataset, ctx,
                                  repeats=repeats, seed=args.seed)
        _save_reference(directory, args.dataset, outcome.outputs[0], runs[0].run_id)
        cached = False
    else:
        reference, baseline = _load_reference(directory, args.dataset)
        if reference is None:
            raise MissingReference(f"no reference run for dataset {args.dataset}: run `ctune run "
                                   f"{args.dataset} 1` first")
        hit = None if args.no_cache else skip_if_unchanged(
            comp.obj_md5, repo, comp.program_id, args.dataset, baseline)
        if hit is not None:
            runs, cached = reuse_executions(hit, comp, ctx, baseline), True
        else:
            runs, _ = drive_run(session.backend, session.program, comp, args.dataset, ctx,
                                repeats=repeats, reference=reference, baseline_run_id=baseline,
                                seed=args.seed)
            cached = False
    for r in runs:
        repo.record(r)
    (directory / RUN_FILE).write_text("".join(serialize_packet(r) for r in runs))
    fields = [("RUN_ID", str(runs[0].run_id)), ("RUN_ID_ASSOCIATE", str(runs[0].run_id_associate)),
              ("DATASET_NUMBER", str(args.dataset)), ("REPEATS", str(len(runs))),
              ("RUN_TIME", " ".join(pk.fmt_float(r.run_time) for r in runs)),
              ("OUTPUT_CORRECT", "1" if runs[0].output_correct else "0"),
              ("CACHED", "1" if cached else "0")]
    if not args.baseline:
        case = repo.case(comp.compile_id, runs[0].run_id_associate)
        fields.append(("SPEEDUP", pk.fmt_float(case.speedup)))
    _emit(args, fields, _table(fields))


def _space(args, session) -> FlagSpace:
    if args.space:
        space = FlagSpace.parse(Path(args.space).read_text())
    elif args.flag_list:
        space = FlagSpace((args.reference_level,), tuple(args.flag_list.split()))
    elif isinstance(session.backend, SyntheticBackend):
        sp = session.backend.programs[session.program.name]
        space = FlagSpace((args.reference_level,), tuple(sorted(sp.flag_effects)))
    else:
        space = FlagSpace((args.reference_level,), DEFAULT_GCC_FLAGS)
    if not space.flags:
        raise UsageError("empty flag space")
    return space


def cmd_explore(args):
    directory = Path(args.dir)
    repo = args.repo = _open_repo(args.db, "local")
    session = Session.resolve(args.backend, directory, args.program, None, repo)
    try:
        config = ExplorationConfig(
            strategy=args.strategy, budget=args.budget, seed=args.seed,
            per_flag_probability=args.probability, fixed_length=args.length,
            repeats=args.repeats or runs_from_env(_ccc_env()), epsilon=args.epsilon,
            dataset=args.dataset, reference_level=args.reference_level)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    space = _space(args, session)
    saved = _read_program_file(directory)
    pid = int(saved["PROGRAM_ID"]) if saved.get("PROGRAM_NAME") == session.program.name \
        and saved.get("PROGRAM_ID") else None
    if pid is not None:
        try:
            repo.entity(pid)
        except DanglingReference:
            pid = None
    ctx = None if "deterministic" in session.backend.capabilities else _context(args, repo, session)
    report = explore(session.program, space, config, session.backend, repo, program_id=pid, ctx=ctx)
    if pid is None:
        session.save(report.baseline.program_id)
    fields = report.summary_fields()
    _emit(args, fields, _table(fields))
    if args.plot:
        from .plotting import plot_exploration
        for path in plot_exploration(report, args.plot):
            log.info("wrote %s", path)


def cmd_filter(args):
    repo = args.repo = _open_repo(args.db, "local", writable=False)
    cases = repo.query(_criteria(args))
    if args.name == "get-all-best-flags-time":
        kept = best_time_filter(cases, args.min_gain)
    else:
        objectives = THREE_OBJECTIVES if args.three else TWO_OBJECTIVES
        kept = pareto_filter([c for c in cases if c.output_correct], objectives)
    _print_cases(args, kept)
    if args.plot:
        from .plotting import plot_frontier
        log.info("wrote %s", plot_frontier(cases, args.plot, f"{args.name}.png", args.name))


def cmd_db(args):
    if args.action == "merge":
        src_path, dst_path = _repo_path(args, args.source), _repo_path(args, args.destination)
        source = _open_repo(src_path, args.source, writable=False)
        args.repo = _open_repo(dst_path, args.destination)
        stats = merge(source, args.repo, shareable if args.shareable else None)
        fields = [("NEW", str(stats.new)), ("DUPLICATE", str(stats.duplicate)),
                  ("CONFLICTING", str(stats.conflicting))]
        _emit(args, fields, _table(fields))
    elif args.action == "query":
        args.repo = _open_repo(_repo_path(args, args.where), args.where, writable=False)
        _print_cases(args, args.repo.query(_criteria(args)))
    elif args.action == "rank":
        args.repo = _open_repo(args.db, "local")
        args.repo.set_rank(parse_entity_id(args.compile_id), parse_entity_id(args.baseline_run_id),
                           args.rank)
        _emit(args, [("RANK", str(args.rank))], [f"rank {args.rank} recorded"])
    elif args.action == "import":
        args.repo = _open_repo(args.db, "local")
        stats = args.repo.import_packets(Path(args.file).read_text())
        fields = [("NEW", str(stats.new)), ("DUPLICATE", str(stats.duplicate)),
                  ("CONFLICTING", str(stats.conflicting))]
        _emit(args, fields, _table(fields))


def _train_args(args):
    repo = args.repo = _open_repo(_repo_path(args, args.where), args.where, writable=False)
    return repo, _entity_id(repo, "compiler", args.compiler), _entity_id(repo, "platform", args.platform)


def cmd_train(args):
    repo, compiler, platform = _train_args(args)
    model = train(repo, compiler, platform, args.objective, args.kind)
    if args.out:
        Path(args.out).write_text(model.to_text())
    fields = [("MODEL", model.kind), ("OBJECTIVE", model.objective), ("COMPILER_ID", str(compiler)),
              ("PLATFORM_ID", str(platform)), ("PROGRAMS", str(len(model.entries))),
              ("TRAINING_DIGEST", model.training_digest)]
    _emit(args, fields, _table(fields))


def _query_features(args) -> FeatureVector:
    if args.features_file:
        f = pk.parse_fields(Path(args.features_file).read_text())
        text = f.get("STATIC_FEATURE_VECTOR", "")
    else:
        text = args.features or ""
    try:
        return FeatureVector("static", pk.parse_vector(text))
    except ValueError as exc:
        raise UsageError(f"bad feature vector: {exc}") from None


def cmd_predict(args):
    features = _query_features(args)
    if args.service:
        from .service import query
        if not (args.compiler and args.platform):
            raise UsageError("--service needs --compiler and --platform ids")
        fields = {"PLATFORM_ID": args.platform, "COMPILER_ID": args.compiler, "MODEL": args.kind,
                  "OBJECTIVE": args.objective, "STATIC_FEATURE_VECTOR": " " + pk.format_vector(features.entries)}
        resp = query(args.service, fields)
        if resp.get("STATUS") != "OK":
            err = CTuneError(resp.get("MESSAGE", ""))
            err.code = resp.get("STATUS", "ERROR")
            raise err
        out = list(resp.items())
    else:
        if args.model:
            model = Model.from_text(Path(args.model).read_text())
            compiler, platform = model.compiler_id, model.platform_id
        else:
            if not (args.compiler and args.platform):
                raise UsageError("give --model FILE, or --compiler and --platform to train from the repository")
            repo, compiler, platform = _train_args(args)
            model = train(repo, compiler, platform, args.objective, args.kind)
        pred = predict(model, PredictionQuery(platform, compiler, features, model_kind=model.kind,
                                              objective=model.objective))
        out = [("STATUS", "OK"), ("OPT_FLAGS", pred.flags.canonical()),
               ("MATCHED_PROGRAM_ID", str(pred.matched_program_ids[0])),
               ("DISTANCE", pk.fmt_float(pred.distance)), ("MODEL", model.kind),
               ("OBJECTIVE", model.objective)]
    if args.packets:
        sys.stdout.write(pk.format_packet(out))
    else:
        print(dict(out)["OPT_FLAGS"])


def cmd_serve(args):
    from .service import serve
    path = _repo_path(args, args.where)
    _open_repo(path, args.where, writable=False)
    host, _, port = args.bind.rpartition(":")
    server = serve(lambda: Repository(path, writable=False), (host or "127.0.0.1", int(port)),
                   background=True)
    print(server.url, flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()


def cmd_adapt(args):
    from .unidapt import (AdaptationPolicy, AdaptiveProgram, evolve_clones, load_trace,
                          observed_means, simulate)
    program = AdaptiveProgram.from_text(Path(args.program_file).read_text())
    if args.overhead is not None:
        program = replace(program, monitor_overhead=args.overhead)
    policy = AdaptationPolicy(args.bins, args.recalibrate_every)
    report = None
    if args.trace:
        report = simulate(program, load_trace(Path(args.trace).read_text()), policy)
    if args.action == "simulate":
        if report is None:
            raise UsageError("simulate needs --trace FILE")
        if args.csv:
            Path(args.csv).write_text(report.to_csv())
        if args.packets:
            sys.stdout.write(report.to_text())
        else:
            print("\n".join(_table(report.summary_fields())))
        if args.plot:
            from .plotting import plot_adaptation
            log.info("wrote %s", plot_adaptation(report, args.plot))
        return
    repo = args.repo = _open_repo(_repo_path(args, args.where), args.where, writable=False)
    observed = observed_means(report) if report is not None else None
    new = evolve_clones(program, repo, args.k, observed=observed)
    text = new.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ parser

def _epilog() -> str:
    honored = ["CCC_DB (local repository path)", "CCC_CT_DB (shared repository path)",
               "CCC_RUNS (repeats per run)", "CCC_OPT_PLATFORM (auxiliary flags)",
               "CCC_PROCESSOR_NUM (CPU pinning, best effort)", "CCC_NOTES (record notes)",
               "CCC_RUN_RE (rejected: simulator runtimes are unsupported)"]
    recorded = sorted(COMPILE_ENV_FIELDS) + sorted(RUN_ENV_FIELDS)
    lines = ["strategies (explore):"]
    lines += [f"  {name}" for name in STRATEGIES]
    lines += ["filters (filter):"]
    lines += [f"  {name}" for name in FILTERS]
    lines += ["environment variables honored:"]
    lines += [f"  {h}" for h in honored]
    lines += ["environment variables recorded verbatim in records:"]
    lines += [f"  {v}" for v in recorded]
    lines += ["environment variables accepted and ignored:"]
    lines += [f"  {v}" for v in IGNORED_ENV]
    lines += ["exit status: 0 success, 1 operational failure, 2 usage error"]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    local, shared = env_paths()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--db", default=local, help=f"local repository (default ${ENV_LOCAL})")
    common.add_argument("--shared-db", default=shared, help=f"shared repository (default ${ENV_SHARED})")
    common.add_argument("--packets", action="store_true", help="packet-format output")
    common.add_argument("-v", "--verbose", action="count", default=0)

    program_dir = argparse.ArgumentParser(add_help=False)
    program_dir.add_argument("-C", "--dir", default=".", help="program directory (default .)")
    program_dir.add_argument("--program", help="program name inside a synthetic file")
    program_dir.add_argument("--notes", help="free text recorded in NOTES (default $CCC_NOTES)")

    p = argparse.ArgumentParser(prog="ctune", description=__doc__.split("\n\n")[0],
                                epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"ctune {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("register", parents=[common, program_dir],
                       help="register platform, compiler and program")
    s.add_argument("backend", help="synthetic:<file> or real:<compiler>")
    s.add_argument("--output-files", nargs="*", help="files compared against the reference run")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("comp", parents=[common, program_dir], help="compile the program",
                       description="Options go before the compiler name; everything after it is "
                                   "flags.  Flags after --aux are auxiliary (not explored).")
    s.add_argument("compiler", help="synthetic:<file>, real:<compiler> or a compiler name")
    s.add_argument("flags", nargs=argparse.REMAINDER, help="optimization flags [--aux flags]")
    s.add_argument("--no-cache", action="store_true", help="record even if identical code exists")
    s.set_defaults(func=cmd_comp)

    s = sub.add_parser("run", parents=[common, program_dir], help="run the last compilation")
    s.add_argument("dataset", type=int, help="dataset number (1-based)")
    s.add_argument("baseline", type=int, nargs="?", default=0, help="1 for the reference run")
    s.add_argument("--repeats", type=int, help="repeats (default $CCC_RUNS or 1)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-cache", action="store_true", help="run even if the object code is unchanged")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("explore", parents=[common, program_dir], help="search the flag space",
                       epilog="strategies: " + ", ".join(STRATEGIES))
    s.add_argument("strategy", choices=list(STRATEGIES))
    s.add_argument("--backend", help="synthetic:<file> or real:<compiler> (default: this directory's)")
    s.add_argument("--space", help="flag space file (BASE_LEVEL= and FLAG= lines)")
    s.add_argument("--flags", dest="flag_list", help="space as a quoted list of flags")
    s.add_argument("--budget", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probability", type=float, default=0.5, help="per-flag probability (uniform)")
    s.add_argument("--length", type=int, default=1, help="flags per combination (fixed)")
    s.add_argument("--repeats", type=int)
    s.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="one-off pruning threshold")
    s.add_argument("--dataset", type=int, default=1)
    s.add_argument("--reference-level", default="-O3")
    s.add_argument("--plot", metavar="DIR", help="write history and frontier figures to DIR")
    s.set_defaults(func=cmd_explore)

    query_opts = argparse.ArgumentParser(add_help=False)
    query_opts.add_argument("--program", help="program id or name")
    query_opts.add_argument("--platform", help="platform id or name")
    query_opts.add_argument("--compiler", help="compiler id or name")
    query_opts.add_argument("--dataset", dest="dataset_number", type=int)
    query_opts.add_argument("--min-speedup", type=float)
    query_opts.add_argument("--min-rank", type=int)
    query_opts.add_argument("--correct-only", action="store_true")

    s = sub.add_parser("filter", parents=[common, query_opts], help="select cases from the repository",
                       epilog="filters: " + ", ".join(FILTERS))
    s.add_argument("name", choices=list(FILTERS))
    s.add_argument("--min-gain", type=float, default=1.0, help="minimum speedup (best-time filter)")
    s.add_argument("--three", action="store_true", help="add compile time as a third objective")
    s.add_argument("--plot", metavar="DIR", help="write a frontier figure to DIR")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("db", help="merge, query, rank or import")
    dbs = s.add_subparsers(dest="action", required=True)
    m = dbs.add_parser("merge", parents=[common])
    m.add_argument("--from", dest="source", default="local", help="local, shared or a path")
    m.add_argument("--to", dest="destination", default="shared", help="local, shared or a path")
    m.add_argument("--shareable", action="store_true", help="publish only correct, stable cases")
    q = dbs.add_parser("query", parents=[common, query_opts])
    q.add_argument("--in", dest="where", default="local", help="local, shared or a path")
    r = dbs.add_parser("rank", parents=[common])
    r.add_argument("compile_id")
    r.add_argument("baseline_run_id")
    r.add_argument("rank", type=int)
    i = dbs.add_parser("import", parents=[common])
    i.add_argument("file", help="packet stream to import")
    s.set_defaults(func=cmd_db)

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--compiler", help="compiler id or name (default: the only one)")
    model_opts.add_argument("--platform", help="platform id or name (default: the only one)")
    model_opts.add_argument("--kind", choices=KINDS, default="nearest_neighbor")
    model_opts.add_argument("--objective", choices=OBJECTIVES, default="time")
    model_opts.add_argument("--in", dest="where", default="shared", help="local, shared or a path")

    s = sub.add_parser("train", parents=[common, model_opts], help="train a prediction model")
    s.add_argument("--out", help="write the model file here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common, model_opts], help="predict flags for features")
    s.add_argument("--features", help='e.g. "ft1=3, ft2=0.5"')
    s.add_argument("--features-file", help="packet with STATIC_FEATURE_VECTOR=")
    s.add_argument("--model", help="model file from `ctune train --out`")
    s.add_argument("--service", metavar="URL", help="query a running prediction service")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("serve", parents=[common], help="run the prediction service")
    s.add_argument("--bind", default="127.0.0.1:8023", help="HOST:PORT")
    s.add_argument("--in", dest="where", default="shared", help="local, shared or a path")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("adapt", parents=[common], help="runtime adaptation: simulate or evolve clones")
    s.add_argument("action", choices=["simulate", "evolve"])
    s.add_argument("program_file", help="adaptive program (clones and phase times)")
    s.add_argument("--trace", help="phase trace or trace model")
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--recalibrate-every", type=int, default=1000)
    s.add_argument("--overhead", type=float, help="monitoring overhead fraction")
    s.add_argument("--csv", help="per-step CSV output (simulate)")
    s.add_argument("--plot", metavar="DIR", help="write the adaptation figure to DIR")
    s.add_argument("-k", type=int, default=1, help="clones to replace (evolve)")
    s.add_argument("--out", help="write the evolved program here (evolve)")
    s.add_argument("--in", dest="where", default="local", help="local, shared or a path")
    s.set_defaults(func=cmd_adapt)
    return p


def _diagnostic(code: str, message: str) -> str:
    return pk.format_packet([("STATUS", "ERROR"), ("CODE", code),
                             ("MESSAGE", " ".join(str(message).split()))])


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="ctune: %(message)s", stream=sys.stderr)
    args.repo = None
    try:
        args.func(args)
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(_diagnostic("USAGE", exc))
        return 2
    except CTuneError as exc:
        sys.stderr.write(_diagnostic(exc.code, exc))
        return 1
    except (OSError, ValueError) as exc:
        sys.stderr.write(_diagnostic(type(exc).__name__.upper(), exc))
        return 1
    finally:
        if args.repo is not None:
            args.repo.close()


if __name__ == "__main__":
    sys.exit(main())
