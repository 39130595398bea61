"""Append-only, file-backed optimization repository.

Layout of a repository directory::

    INFORMATION        repository info packet (version, creation time, instance id)
    entities.pk        platforms, environments, runtimes, compilers, programs
    compilations.pk    compilation packets
    executions.pk      execution packets
    features.pk        static feature packets
    passes.pk          pass-sequence packets
    ranks.pk           manual case rankings (latest wins)
    lock               advisory writer lock

Each stream is a sequence of packets, each terminated by a blank line.  The
whole repository is indexed in memory on open; readers see the snapshot taken
at that moment.
"""

import datetime as _dt
import fcntl
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

from . import packets as pk
from .errors import (ConflictingRecord, DanglingReference, RepositoryLocked, StorageFailure,
                     UnknownCase, VersionMismatch, ZeroTime, DatasetMismatch)
from .model import (COD_VERSION, ENTITY_TYPES, CompilationRecord, ExecutionRecord, FeatureRecord,
                    IdFactory, OptimizationCase, PassesRecord, content_hash, derive_case,
                    entity_fields, entity_from_fields, parse_entity_id, record_from_fields,
                    record_key)
from .stats import DEFAULT_AGGREGATOR, DEFAULT_NOISE_GATE

log = logging.getLogger(__name__)

STREAMS = {
    "entity": "entities.pk",
    "compilation": "compilations.pk",
    "execution": "executions.pk",
    "features": "features.pk",
    "passes": "passes.pk",
    "rank": "ranks.pk",
}
ENV_LOCAL = "CCC_DB"
ENV_SHARED = "CCC_CT_DB"


def env_paths(env: Optional[Mapping[str, str]] = None) -> Tuple[Optional[str], Optional[str]]:
    """Local and shared repository paths from ``CCC_DB`` / ``CCC_CT_DB``."""
    env = os.environ if env is None else env
    return env.get(ENV_LOCAL) or None, env.get(ENV_SHARED) or None


@dataclass(frozen=True)
class RepositoryInfo:
    cod_version: str
    created: str
    instance_id: int

    def to_fields(self):
        return [("COD_VERSION", self.cod_version), ("CREATED", self.created),
                ("INSTANCE_ID", str(self.instance_id))]

    @classmethod
    def from_fields(cls, f):
        if not f.get("COD_VERSION"):
            raise StorageFailure("INFORMATION packet lacks COD_VERSION")
        return cls(f["COD_VERSION"], f.get("CREATED", ""), parse_entity_id(f["INSTANCE_ID"]))

    def compatible(self, other: "RepositoryInfo") -> bool:
        return self.cod_version.split(".")[0] == other.cod_version.split(".")[0]


@dataclass(frozen=True)
class QueryCriteria:
    program_id: Optional[int] = None
    platform_id: Optional[int] = None
    compiler_id: Optional[int] = None
    dataset_number: Optional[int] = None
    min_speedup: Optional[float] = None
    min_rank: Optional[int] = None
    output_correct: Optional[bool] = None
    select_all: bool = False
    include_baseline: bool = False

    def __post_init__(self):
        active = [self.program_id, self.platform_id, self.compiler_id, self.dataset_number,
                  self.min_speedup, self.min_rank, self.output_correct]
        if not self.select_all and all(v is None for v in active):
            raise ValueError("set at least one criterion or select_all=True")

    @classmethod
    def all(cls, **kw) -> "QueryCriteria":
        return cls(select_all=True, **kw)

    def accepts(self, case: OptimizationCase) -> bool:
        c = case.compilation
        return ((self.program_id is None or c.program_id == self.program_id)
                and (self.platform_id is None or c.platform_id == self.platform_id)
                and (self.compiler_id is None or c.compiler_id == self.compiler_id)
                and (self.dataset_number is None or case.dataset_number == self.dataset_number)
                and (self.min_speedup is None or case.speedup >= self.min_speedup)
                and (self.min_rank is None or case.rank >= self.min_rank)
                and (self.output_correct is None or case.output_correct == self.output_correct))


@dataclass
class MergeStats:
    new: int = 0
    duplicate: int = 0
    conflicting: int = 0


@dataclass(frozen=True)
class RankRecord:
    compile_id: int
    baseline_run_id: int
    rank: int

    def to_fields(self):
        return [("COMPILE_ID", str(self.compile_id)),
                ("RUN_ID_ASSOCIATE", str(self.baseline_run_id)),
                ("RANK", str(self.rank))]

    @classmethod
    def from_fields(cls, f):
        return cls(parse_entity_id(f["COMPILE_ID"]), parse_entity_id(f["RUN_ID_ASSOCIATE"]),
                   int(f["RANK"]))


_LOADERS = {
    "entity": entity_from_fields,
    "compilation": CompilationRecord.from_fields,
    "execution": ExecutionRecord.from_fields,
    "features": FeatureRecord.from_fields,
    "passes": PassesRecord.from_fields,
    "rank": RankRecord.from_fields,
}


def _fields_of(stream: str, rec):
    return entity_fields(rec) if stream == "entity" else rec.to_fields()


def _key_of(stream: str, rec):
    if stream == "rank":
        return rec.compile_id, rec.baseline_run_id
    return record_key(rec)[1]


def _stream_of(rec) -> str:
    if isinstance(rec, RankRecord):
        return "rank"
    kind, _ = record_key(rec)
    return kind


class Repository:
    """Optimization repository; ``path=None`` keeps everything in memory."""

    def __init__(self, path=None, *, writable: bool = True, create: bool = True,
                 durable: bool = False, ids: Optional[IdFactory] = None,
                 instance_id: Optional[int] = None, created: Optional[str] = None):
        self.path = Path(path) if path is not None else None
        self.writable = writable
        self.durable = durable
        self.ids = ids or IdFactory()
        self._lock_fd = None
        # stream -> key -> (record, packet text); dicts keep append order
        self._data: Dict[str, Dict[object, Tuple[object, str]]] = {s: {} for s in STREAMS}
        self._by_hash: Dict[str, int] = {}
        self._by_compile: Dict[int, List[int]] = {}
        self._by_md5: Dict[str, List[int]] = {}

        if self.path is None:
            self.info = RepositoryInfo(COD_VERSION, created or _now(), instance_id or self.ids())
            return
        info_file = self.path / "INFORMATION"
        if not info_file.exists():
            if not (create and writable):
                raise StorageFailure(f"no repository at {self.path}")
            self.path.mkdir(parents=True, exist_ok=True)
            self.info = RepositoryInfo(COD_VERSION, created or _now(), instance_id or self.ids())
            info_file.write_text(pk.format_packet(self.info.to_fields()))
        else:
            self.info = RepositoryInfo.from_fields(pk.parse_fields(info_file.read_text()))
            if not self.info.compatible(RepositoryInfo(COD_VERSION, "", 1)):
                raise VersionMismatch(
                    f"repository version {self.info.cod_version} is incompatible with {COD_VERSION}")
        if writable:
            self._acquire_lock()
        for stream in STREAMS:
            self._load(stream)

    # ------------------------------------------------------------ lifecycle

    @classmethod
    def memory(cls, **kw) -> "Repository":
        return cls(None, **kw)

    def _acquire_lock(self):
        fd = os.open(self.path / "lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise RepositoryLocked(f"{self.path} is open for writing by another process") from None
        self._lock_fd = fd

    def close(self):
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _load(self, stream: str):
        file = self.path / STREAMS[stream]
        if not file.exists():
            return
        text = file.read_text()
        chunks, tail = pk.split_stream(text)
        if tail is not None:
            log.warning("%s: ignoring incomplete trailing packet (%d bytes)", file, len(tail))
            if self.writable:
                with open(file, "r+") as fh:
                    fh.truncate(len(text) - len(tail))
        for chunk in chunks:
            try:
                rec = _LOADERS[stream](pk.parse_fields(chunk))
            except (ValueError, KeyError) as exc:
                raise StorageFailure(f"{file}: corrupt packet: {exc}") from exc
            self._index(stream, rec, chunk + "\n")

    # ------------------------------------------------------------- indexing

    def _index(self, stream, rec, text):
        key = _key_of(stream, rec)
        if stream == "rank":
            # later ranks replace earlier ones
            self._data[stream].pop(key, None)
        self._data[stream][key] = (rec, text)
        if stream == "entity":
            self._by_hash.setdefault(content_hash(rec), rec.id)
        elif stream == "execution":
            self._by_compile.setdefault(rec.compile_id, []).append(rec.run_id)
        elif stream == "compilation" and rec.obj_md5:
            self._by_md5.setdefault(rec.obj_md5, []).append(rec.compile_id)

    def _append(self, stream, rec):
        text = pk.format_packet(_fields_of(stream, rec))
        if self.path is not None:
            if not self.writable:
                raise StorageFailure("repository opened read-only")
            try:
                with open(self.path / STREAMS[stream], "a") as fh:
                    fh.write(text + "\n")
                    fh.flush()
                    if self.durable:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
        self._index(stream, rec, text)

    # ------------------------------------------------------------- entities

    def register_entity(self, kind: str, descriptor) -> int:
        """Register a descriptor, returning the id of an identical existing one if any."""
        if kind not in ENTITY_TYPES or descriptor.kind != kind:
            raise ValueError(f"descriptor of kind {descriptor.kind!r} registered as {kind!r}")
        existing = self._by_hash.get(content_hash(descriptor))
        if existing is not None:
            return existing
        ident = descriptor.id or self.ids()
        if ident in self._data["entity"]:
            raise ConflictingRecord(f"entity id {ident} already names a different {kind}")
        rec = replace(descriptor, id=ident)
        self._append("entity", rec)
        return ident

    def entity(self, ident: int):
        try:
            return self._data["entity"][ident][0]
        except KeyError:
            raise DanglingReference(f"unknown entity {ident}") from None

    def entities(self, kind: Optional[str] = None) -> List:
        return [r for r, _ in self._data["entity"].values() if kind is None or r.kind == kind]

    def find_entity(self, kind: str, name: str):
        for rec in self.entities(kind):
            if rec.name == name:
                return rec
        return None

    # -------------------------------------------------------------- records

    def record(self, rec) -> object:
        """Append a compilation, execution, features or passes record.

        Re-recording an identical record is a no-op; a different record under
        an existing primary key is a conflict.
        """
        stream = _stream_of(rec)
        if stream == "entity":
            raise ValueError("use register_entity for entities")
        key = _key_of(stream, rec)
        self._check_refs(stream, rec)
        current = self._data[stream].get(key)
        if current is not None and stream != "rank":
            if current[1] == pk.format_packet(_fields_of(stream, rec)):
                return key
            raise ConflictingRecord(f"{stream} {key} already recorded with different content")
        self._append(stream, rec)
        return key

    def _check_refs(self, stream, rec):
        ents = self._data["entity"]
        if stream == "compilation":
            for name in ("platform_id", "environment_id", "compiler_id", "program_id"):
                if getattr(rec, name) not in ents:
                    raise DanglingReference(f"compilation {rec.compile_id}: unknown {name} "
                                            f"{getattr(rec, name)}")
        elif stream == "execution":
            if rec.compile_id not in self._data["compilation"]:
                raise DanglingReference(f"execution {rec.run_id}: unknown compile_id {rec.compile_id}")
            if rec.run_id_associate != rec.run_id and rec.run_id_associate not in self._data["execution"]:
                raise DanglingReference(
                    f"execution {rec.run_id}: unknown baseline run {rec.run_id_associate}")
        elif stream in ("features", "passes", "rank"):
            if rec.compile_id not in self._data["compilation"]:
                raise DanglingReference(f"{stream} record: unknown compile_id {rec.compile_id}")

    def compilation(self, compile_id: int) -> CompilationRecord:
        try:
            return self._data["compilation"][compile_id][0]
        except KeyError:
            raise DanglingReference(f"unknown compilation {compile_id}") from None

    def execution(self, run_id: int) -> ExecutionRecord:
        try:
            return self._data["execution"][run_id][0]
        except KeyError:
            raise DanglingReference(f"unknown execution {run_id}") from None

    def compilations(self) -> List[CompilationRecord]:
        return [r for r, _ in self._data["compilation"].values()]

    def executions(self, compile_id: Optional[int] = None) -> List[ExecutionRecord]:
        if compile_id is None:
            return [r for r, _ in self._data["execution"].values()]
        return [self._data["execution"][i][0] for i in self._by_compile.get(compile_id, ())]

    def features(self, compile_id: Optional[int] = None) -> List[FeatureRecord]:
        return [r for r, _ in self._data["features"].values()
                if compile_id is None or r.compile_id == compile_id]

    def compilations_with_md5(self, md5: str) -> List[CompilationRecord]:
        return [self.compilation(c) for c in self._by_md5.get(md5, ())]

    def __bool__(self):
        # an empty repository is still a repository
        return True

    def __len__(self):
        return sum(len(d) for d in self._data.values())

    def counts(self) -> Dict[str, int]:
        return {s: len(d) for s, d in self._data.items()}

    def import_packets(self, text: str) -> MergeStats:
        """Record every packet of an off-line stream (entities or records)."""
        stats = MergeStats()
        for fields in pk.parse_stream(text):
            if "ENTITY_KIND" in fields:
                rec, stream = entity_from_fields(fields), "entity"
            else:
                rec = record_from_fields(fields)
                stream = _stream_of(rec)
            self._merge_one(stream, rec, stats)
        return stats

    # ---------------------------------------------------------------- query

    def baseline_runs(self, baseline_run_id: int) -> List[ExecutionRecord]:
        anchor = self.execution(baseline_run_id)
        return [e for e in self.executions(anchor.compile_id) if e.run_id_associate == anchor.run_id]

    def _cases_of(self, comp: CompilationRecord, aggregator, noise_gate) -> Iterator[OptimizationCase]:
        groups: Dict[int, List[ExecutionRecord]] = {}
        for e in self.executions(comp.compile_id):
            groups.setdefault(e.run_id_associate, []).append(e)
        for anchor_id in sorted(groups):
            anchor = self._data["execution"].get(anchor_id)
            if anchor is None:
                continue
            anchor = anchor[0]
            base_comp = self.compilation(anchor.compile_id)
            rank = self._data["rank"].get((comp.compile_id, anchor_id))
            try:
                yield derive_case(comp, groups[anchor_id], self.baseline_runs(anchor_id), base_comp,
                                  aggregator=aggregator, noise_gate=noise_gate,
                                  reject_incorrect=False,
                                  rank=None if rank is None else rank[0].rank)
            except (ZeroTime, DatasetMismatch) as exc:
                log.warning("skipping case %s/%s: %s", comp.compile_id, anchor_id, exc)

    def query(self, criteria: QueryCriteria, *, aggregator: str = DEFAULT_AGGREGATOR,
              noise_gate: float = DEFAULT_NOISE_GATE) -> List[OptimizationCase]:
        """Cases joined through compile ids and baseline associations.

        Ordered by compilation date and time, then compile id, then baseline id.
        """
        comps = sorted(self.compilations(), key=lambda c: (c.date, c.time, c.compile_id))
        out = []
        for comp in comps:
            if criteria.program_id is not None and comp.program_id != criteria.program_id:
                continue
            for case in self._cases_of(comp, aggregator, noise_gate):
                if case.is_baseline and not criteria.include_baseline:
                    continue
                if criteria.accepts(case):
                    out.append(case)
        return out

    def case(self, compile_id: int, baseline_run_id: int, **kw) -> OptimizationCase:
        if compile_id in self._data["compilation"]:
            for case in self._cases_of(self.compilation(compile_id), kw.get("aggregator", DEFAULT_AGGREGATOR),
                                       kw.get("noise_gate", DEFAULT_NOISE_GATE)):
                if case.baseline_run_id == baseline_run_id:
                    return case
        raise UnknownCase(f"no case for compilation {compile_id} against baseline {baseline_run_id}")

    def set_rank(self, compile_id: int, baseline_run_id: int, rank: int) -> None:
        self.case(compile_id, baseline_run_id)
        self._append("rank", RankRecord(compile_id, baseline_run_id, int(rank)))

    def ranks(self) -> Dict[Tuple[int, int], int]:
        return {k: r.rank for k, (r, _) in self._data["rank"].items()}

    # ---------------------------------------------------------------- merge

    def _merge_one(self, stream, rec, stats: MergeStats):
        key = _key_of(stream, rec)
        text = pk.format_packet(_fields_of(stream, rec))
        current = self._data[stream].get(key)
        if current is None:
            if stream != "entity":
                self._check_refs(stream, rec)
            self._append(stream, rec)
            stats.new += 1
        elif current[1] == text:
            stats.duplicate += 1
        else:
            stats.conflicting += 1
            log.info("merge conflict on %s %s: keeping destination", stream, key)

    def iter_stream(self, stream: str) -> Iterator:
        return (r for r, _ in list(self._data[stream].values()))

    def fingerprint(self) -> Tuple[int, ...]:
        return tuple(len(self._data[s]) for s in STREAMS)


def merge(source: Repository, destination: Repository,
          select: Optional[Callable[[List[OptimizationCase]], Iterable[OptimizationCase]]] = None
          ) -> MergeStats:
    """Copy every record of ``source`` missing from ``destination``.

    Records are keyed by their ids.  Same id and same content counts as a
    duplicate; same id with different content is a conflict and the
    destination copy is kept.  ``select`` acts as a local filter: only the
    cases it returns (with their baselines) are published.
    """
    if not source.info.compatible(destination.info):
        raise VersionMismatch(f"cannot merge version {source.info.cod_version} "
                              f"into {destination.info.cod_version}")
    keep_comp = keep_run = keep_case = None
    if select is not None:
        chosen = list(select(source.query(QueryCriteria.all(include_baseline=True))))
        keep_comp, keep_run, keep_case = set(), set(), set()
        for case in chosen:
            keep_case.add(case.case_id)
            keep_comp.add(case.compilation.compile_id)
            keep_run.update(e.run_id for e in case.executions)
            for e in source.baseline_runs(case.baseline_run_id):
                keep_comp.add(e.compile_id)
                keep_run.add(e.run_id)
    stats = MergeStats()
    for stream in STREAMS:
        for rec in source.iter_stream(stream):
            if keep_comp is not None:
                if stream in ("compilation", "features", "passes") and rec.compile_id not in keep_comp:
                    continue
                if stream == "execution" and rec.run_id not in keep_run:
                    continue
                if stream == "rank" and (rec.compile_id, rec.baseline_run_id) not in keep_case:
                    continue
            destination._merge_one(stream, rec, stats)
    return stats


def _now() -> str:
    return _dt.datetime.now().replace(microsecond=0).isoformat()
