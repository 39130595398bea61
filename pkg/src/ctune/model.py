"""Domain types mirroring the optimization database schema.

Every record converts to and from an information packet; the packet is the
persisted and exchanged form, so records hold timings at the six-decimal
resolution the packets carry.
"""

import datetime as _dt
import hashlib
import random
import re
import uuid
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

from . import packets as pk
from .errors import DatasetMismatch, IncorrectOutput, MissingRequiredKey, ZeroTime
from .stats import DEFAULT_AGGREGATOR, DEFAULT_NOISE_GATE, aggregate, assess_noise

COD_VERSION = "1.0"

_MD5_RE = re.compile(r"^[0-9a-f]{32}$")
_ID_RE = re.compile(r"^[0-9]+$")

# ---------------------------------------------------------------- identifiers


def parse_entity_id(value: Union[str, int]) -> int:
    """Decimal id string -> int.  Short ids (as in old packets) are accepted."""
    if isinstance(value, int):
        ident = value
    else:
        value = value.strip()
        if not _ID_RE.match(value):
            raise ValueError(f"entity id must be decimal digits, got {value!r}")
        ident = int(value)
    if not 0 < ident < 2**128:
        raise ValueError(f"entity id out of range: {ident}")
    return ident


def _v4(bits: int) -> int:
    bits &= ~(0xF << 76)
    bits |= 0x4 << 76
    bits &= ~(0x3 << 62)
    bits |= 0x2 << 62
    return bits


class IdFactory:
    """Source of 128-bit entity ids.

    Unseeded factories draw from :func:`uuid.uuid4`; seeded ones are a
    reproducible stream with the same version-4 layout.
    """

    def __init__(self, seed: Optional[Union[int, str]] = None):
        self.seed = seed
        self._rng = None if seed is None else random.Random(_seed_int(seed))

    @classmethod
    def keyed(cls, *parts) -> "IdFactory":
        return cls(_seed_int("\x1f".join(str(p) for p in parts)))

    def __call__(self) -> int:
        if self._rng is None:
            return uuid.uuid4().int
        return _v4(self._rng.getrandbits(128))


def _seed_int(seed: Union[int, str]) -> int:
    if isinstance(seed, int):
        return seed
    return int.from_bytes(hashlib.sha256(seed.encode()).digest()[:8], "big")


class WallClock:
    def now(self) -> _dt.datetime:
        return _dt.datetime.now().replace(microsecond=0)

    def advance(self, seconds: float) -> None:
        pass


class VirtualClock:
    """Deterministic clock advanced by simulated compile/run durations."""

    EPOCH = _dt.datetime(2009, 6, 4, 14, 6, 47)

    def __init__(self, start: Optional[_dt.datetime] = None):
        self._t = start or self.EPOCH
        self._frac = 0.0

    def now(self) -> _dt.datetime:
        return self._t

    def advance(self, seconds: float) -> None:
        self._frac += max(0.0, seconds)
        whole = int(self._frac)
        self._frac -= whole
        self._t += _dt.timedelta(seconds=whole)


def stamp(clock) -> Tuple[str, str]:
    t = clock.now()
    return t.strftime("%Y-%m-%d"), t.strftime("%H:%M:%S")


def q6(x: float) -> float:
    """Quantize to the six-decimal packet resolution."""
    return float(pk.fmt_float(float(x)))


def _tuple(obj, name):
    value = getattr(obj, name)
    if not isinstance(value, tuple):
        object.__setattr__(obj, name, tuple(value))


def _dict(obj, name):
    object.__setattr__(obj, name, dict(getattr(obj, name)))


def _text(obj, *names):
    for name in names:
        pk.check_value(name.upper(), getattr(obj, name))


def _ext_fields(extensions: Mapping[str, str]):
    for k, v in extensions.items():
        yield k, v


def _require(fields: Mapping[str, str], kind: str, *keys: str) -> None:
    missing = [k for k in keys if k not in fields]
    if missing:
        raise MissingRequiredKey(f"{kind} packet missing {', '.join(missing)}")


def _take_extensions(fields: Mapping[str, str], known) -> Dict[str, str]:
    return {k: v for k, v in fields.items() if k not in known}


# ------------------------------------------------------------------- flags


@dataclass(frozen=True)
class FlagCombination:
    """A base optimization level plus an ordered set of individual flags.

    ``platform_flags`` are auxiliary architecture flags (``-msse2``) that are
    passed to the compiler but are not part of the explored combination.
    """

    base_level: str = ""
    flags: Tuple[str, ...] = ()
    platform_flags: Tuple[str, ...] = ()

    def __post_init__(self):
        _tuple(self, "flags")
        _tuple(self, "platform_flags")
        for tok in (self.base_level,) + self.flags + self.platform_flags:
            if any(c.isspace() for c in tok):
                raise ValueError(f"flag {tok!r} contains whitespace")
        if "" in self.flags or "" in self.platform_flags:
            raise ValueError("empty flag string")
        if len(set(self.flags)) != len(self.flags):
            raise ValueError(f"duplicate flags in {self.flags}")
        if len(set(self.platform_flags)) != len(self.platform_flags):
            raise ValueError(f"duplicate platform flags in {self.platform_flags}")
        both = set(self.flags) & set(self.platform_flags)
        if both:
            raise ValueError(f"flags listed as both optimization and platform: {sorted(both)}")

    def canonical(self) -> str:
        return " ".join(((self.base_level,) if self.base_level else ()) + self.flags)

    def __str__(self):
        return self.canonical()

    @classmethod
    def parse(cls, text: str, platform: str = "") -> "FlagCombination":
        tokens = text.split()
        base = ""
        if tokens and tokens[0].startswith("-O"):
            base, tokens = tokens[0], tokens[1:]
        return cls(base, tuple(tokens), tuple(platform.split()))

    def without(self, flag: str) -> "FlagCombination":
        return replace(self, flags=tuple(f for f in self.flags if f != flag))

    def command_flags(self) -> Tuple[str, ...]:
        return ((self.base_level,) if self.base_level else ()) + self.flags + self.platform_flags


# ---------------------------------------------------------------- entities


@dataclass(frozen=True)
class PlatformDescriptor:
    name: str
    notes: str = ""
    id: int = 0

    kind = "platform"

    def __post_init__(self):
        if not self.name:
            raise ValueError(f"{self.kind} name must be non-empty")
        _text(self, "name", "notes")

    def body(self):
        return [("NAME", self.name), ("NOTES", self.notes)]

    @classmethod
    def from_body(cls, f, ident):
        return cls(f.get("NAME", ""), f.get("NOTES", ""), ident)


@dataclass(frozen=True)
class EnvironmentDescriptor(PlatformDescriptor):
    kind = "environment"


@dataclass(frozen=True)
class RuntimeDescriptor(PlatformDescriptor):
    kind = "runtime"


@dataclass(frozen=True)
class CompilerDescriptor:
    name: str
    invocation_template: str = "gcc {flags} {sources} -o {output}"
    flag_space_ref: str = ""
    notes: str = ""
    id: int = 0

    kind = "compiler"
    PLACEHOLDERS = ("{sources}", "{output}", "{flags}")

    def __post_init__(self):
        if not self.name:
            raise ValueError("compiler name must be non-empty")
        missing = [p for p in self.PLACEHOLDERS if p not in self.invocation_template]
        if missing:
            raise ValueError(f"invocation template lacks placeholders {missing}")
        _text(self, "name", "invocation_template", "flag_space_ref", "notes")

    def body(self):
        return [
            ("NAME", self.name),
            ("INVOCATION_TEMPLATE", self.invocation_template),
            ("FLAG_SPACE_REF", self.flag_space_ref),
            ("NOTES", self.notes),
        ]

    @classmethod
    def from_body(cls, f, ident):
        return cls(f.get("NAME", ""), f.get("INVOCATION_TEMPLATE", ""),
                   f.get("FLAG_SPACE_REF", ""), f.get("NOTES", ""), ident)


@dataclass(frozen=True)
class DatasetEntry:
    number: int
    command_line: str
    loop_wrapper_bound: int = 1

    def __post_init__(self):
        if self.number < 1:
            raise ValueError("dataset numbers start at 1")
        if self.loop_wrapper_bound < 1:
            raise ValueError("loop wrapper bound must be positive")
        pk.check_value("COMMAND_LINE", self.command_line)


@dataclass(frozen=True)
class ProgramDescriptor:
    name: str
    source_dir: str = ""
    datasets: Tuple[DatasetEntry, ...] = ()
    output_files: Tuple[str, ...] = ()
    notes: str = ""
    id: int = 0

    kind = "program"

    def __post_init__(self):
        if not self.name:
            raise ValueError("program name must be non-empty")
        _tuple(self, "datasets")
        _tuple(self, "output_files")
        numbers = [d.number for d in self.datasets]
        if numbers != list(range(1, len(numbers) + 1)):
            raise ValueError(f"dataset numbers must be 1..n without gaps, got {numbers}")
        _text(self, "name", "source_dir", "notes")

    @property
    def dataset_count(self) -> int:
        return len(self.datasets)

    def dataset(self, number: int) -> DatasetEntry:
        if not 1 <= number <= len(self.datasets):
            raise ValueError(f"program {self.name} has no dataset {number}")
        return self.datasets[number - 1]

    def body(self):
        out = [
            ("NAME", self.name),
            ("SOURCE_DIR", self.source_dir),
            ("OUTPUT_FILES", " ".join(self.output_files)),
            ("DATASET_COUNT", str(self.dataset_count)),
        ]
        for d in self.datasets:
            out.append((f"DATASET_{d.number}_COMMAND_LINE", d.command_line))
            out.append((f"DATASET_{d.number}_LOOP_WRAPPER_BOUND", str(d.loop_wrapper_bound)))
        out.append(("NOTES", self.notes))
        return out

    @classmethod
    def from_body(cls, f, ident):
        count = int(f.get("DATASET_COUNT", "0"))
        datasets = []
        for n in range(1, count + 1):
            _require(f, "program", f"DATASET_{n}_COMMAND_LINE")
            datasets.append(DatasetEntry(n, f[f"DATASET_{n}_COMMAND_LINE"],
                                         int(f.get(f"DATASET_{n}_LOOP_WRAPPER_BOUND", "1"))))
        return cls(f.get("NAME", ""), f.get("SOURCE_DIR", ""), tuple(datasets),
                   tuple(f.get("OUTPUT_FILES", "").split()), f.get("NOTES", ""), ident)


ENTITY_TYPES = {
    t.kind: t
    for t in (PlatformDescriptor, EnvironmentDescriptor, RuntimeDescriptor,
              CompilerDescriptor, ProgramDescriptor)
}

Entity = Union[PlatformDescriptor, CompilerDescriptor, ProgramDescriptor]


def entity_fields(entity, blank_id: bool = False):
    ident = "" if blank_id else str(entity.id)
    return [("ENTITY_KIND", entity.kind), ("ENTITY_ID", ident)] + entity.body()


def entity_from_fields(fields: Mapping[str, str]):
    _require(fields, "entity", "ENTITY_KIND", "ENTITY_ID")
    try:
        cls = ENTITY_TYPES[fields["ENTITY_KIND"]]
    except KeyError:
        raise ValueError(f"unknown entity kind {fields['ENTITY_KIND']!r}") from None
    return cls.from_body(fields, parse_entity_id(fields["ENTITY_ID"]))


def content_hash(entity) -> str:
    """Digest of the canonical entity packet with the id blanked."""
    return hashlib.sha256(pk.format_packet(entity_fields(entity, blank_id=True)).encode()).hexdigest()


# ----------------------------------------------------------------- records


@dataclass(frozen=True)
class CompilationRecord:
    compile_id: int
    platform_id: int
    environment_id: int
    compiler_id: int
    program_id: int
    opt: FlagCombination
    compile_time: float = 0.0
    bin_size: int = 0
    obj_md5: str = ""
    date: str = ""
    time: str = ""
    notes: str = ""
    extensions: Dict[str, str] = field(default_factory=dict)

    KEYS = ("COMPILE_ID", "PLATFORM_ID", "ENVIRONMENT_ID", "COMPILER_ID", "PROGRAM_ID",
            "DATE", "TIME", "OPT_FLAGS", "OPT_FLAGS_PLATFORM", "COMPILE_TIME", "BIN_SIZE",
            "OBJ_MD5CRC", "NOTES")

    def __post_init__(self):
        object.__setattr__(self, "compile_time", q6(self.compile_time))
        _dict(self, "extensions")
        if self.compile_time < 0:
            raise ValueError("compile_time must be >= 0")
        if self.bin_size < 0:
            raise ValueError("bin_size must be >= 0")
        if self.obj_md5 and not _MD5_RE.match(self.obj_md5):
            raise ValueError(f"obj_md5 must be 32 lowercase hex chars, got {self.obj_md5!r}")
        if self.bin_size == 0 and self.obj_md5:
            raise ValueError("bin_size 0 is only valid for a failed compilation")
        _text(self, "date", "time", "notes")
        for k, v in self.extensions.items():
            if k in self.KEYS or not pk.KEY_RE.match(k):
                raise ValueError(f"bad extension key {k!r}")
            pk.check_value(k, v)

    @property
    def succeeded(self) -> bool:
        return bool(self.obj_md5)

    def to_fields(self):
        return [
            ("COMPILE_ID", str(self.compile_id)),
            ("PLATFORM_ID", str(self.platform_id)),
            ("ENVIRONMENT_ID", str(self.environment_id)),
            ("COMPILER_ID", str(self.compiler_id)),
            ("PROGRAM_ID", str(self.program_id)),
            ("DATE", self.date),
            ("TIME", self.time),
            ("OPT_FLAGS", self.opt.canonical()),
            ("OPT_FLAGS_PLATFORM", " ".join(self.opt.platform_flags)),
            ("COMPILE_TIME", pk.fmt_float(self.compile_time)),
            ("BIN_SIZE", str(self.bin_size)),
            ("OBJ_MD5CRC", self.obj_md5),
            ("NOTES", self.notes),
        ] + list(_ext_fields(self.extensions))

    @classmethod
    def from_fields(cls, f: Mapping[str, str]) -> "CompilationRecord":
        _require(f, "compilation", "COMPILE_ID", "PLATFORM_ID", "ENVIRONMENT_ID",
                 "COMPILER_ID", "PROGRAM_ID")
        return cls(
            compile_id=parse_entity_id(f["COMPILE_ID"]),
            platform_id=parse_entity_id(f["PLATFORM_ID"]),
            environment_id=parse_entity_id(f["ENVIRONMENT_ID"]),
            compiler_id=parse_entity_id(f["COMPILER_ID"]),
            program_id=parse_entity_id(f["PROGRAM_ID"]),
            opt=FlagCombination.parse(f.get("OPT_FLAGS", ""), f.get("OPT_FLAGS_PLATFORM", "")),
            compile_time=float(f.get("COMPILE_TIME", "0")),
            bin_size=int(f.get("BIN_SIZE", "0")),
            obj_md5=f.get("OBJ_MD5CRC", ""),
            date=f.get("DATE", ""),
            time=f.get("TIME", ""),
            notes=f.get("NOTES", ""),
            extensions=_take_extensions(f, cls.KEYS),
        )


_DATASET_PREFIX = re.compile(r"^\s*(\d+)\)")


@dataclass(frozen=True)
class ExecutionRecord:
    run_id: int
    run_id_associate: int
    compile_id: int
    compiler_id: int
    program_id: int
    platform_id: int
    environment_id: int
    dataset_number: int = 1
    bin_size: int = 0
    output_correct: bool = True
    run_time: float = 0.0
    run_time_user: float = 0.0
    run_time_sys: float = 0.0
    run_command_line: str = ""
    profile: Dict[str, Tuple[float, int, float]] = field(default_factory=dict)
    hardware_counters: Dict[str, int] = field(default_factory=dict)
    processor_num: int = -1
    rank: int = 0
    date: str = ""
    time: str = ""
    notes: str = ""
    extensions: Dict[str, str] = field(default_factory=dict)

    KEYS = ("RUN_ID", "RUN_ID_ASSOCIATE", "COMPILE_ID", "COMPILER_ID", "PLATFORM_ID",
            "ENVIRONMENT_ID", "PROGRAM_ID", "DATE", "TIME", "DATASET_NUMBER",
            "RUN_COMMAND_LINE", "OUTPUT_CORRECT", "RUN_TIME", "RUN_TIME_USER", "RUN_TIME_SYS",
            "BIN_SIZE", "RUN_PG", "RUN_HC", "PROCESSOR_NUM", "RANK", "NOTES")

    def __post_init__(self):
        for name in ("run_time", "run_time_user", "run_time_sys"):
            object.__setattr__(self, name, q6(getattr(self, name)))
        object.__setattr__(self, "profile", {k: (float(s), int(c), float(fr))
                                             for k, (s, c, fr) in self.profile.items()})
        object.__setattr__(self, "hardware_counters",
                           {k: int(v) for k, v in self.hardware_counters.items()})
        _dict(self, "extensions")
        if min(self.run_time, self.run_time_user, self.run_time_sys) < 0:
            raise ValueError("run times must be >= 0")
        if self.dataset_number < 1:
            raise ValueError("dataset numbers start at 1")
        if self.bin_size < 0:
            raise ValueError("bin_size must be >= 0")
        _text(self, "date", "time", "notes", "run_command_line")
        for name in list(self.profile) + list(self.hardware_counters):
            if any(c in name for c in "{}=,") or name != name.strip() or not name:
                raise ValueError(f"bad profile/counter name {name!r}")
        for k, v in self.extensions.items():
            if k in self.KEYS or not pk.KEY_RE.match(k):
                raise ValueError(f"bad extension key {k!r}")
            pk.check_value(k, v)

    @property
    def is_baseline(self) -> bool:
        return self.run_id == self.run_id_associate

    def to_fields(self):
        return [
            ("RUN_ID", str(self.run_id)),
            ("RUN_ID_ASSOCIATE", str(self.run_id_associate)),
            ("COMPILE_ID", str(self.compile_id)),
            ("COMPILER_ID", str(self.compiler_id)),
            ("PLATFORM_ID", str(self.platform_id)),
            ("ENVIRONMENT_ID", str(self.environment_id)),
            ("PROGRAM_ID", str(self.program_id)),
            ("DATE", self.date),
            ("TIME", self.time),
            ("DATASET_NUMBER", str(self.dataset_number)),
            ("RUN_COMMAND_LINE", self.run_command_line),
            ("OUTPUT_CORRECT", "1" if self.output_correct else "0"),
            ("RUN_TIME", pk.fmt_float(self.run_time)),
            ("RUN_TIME_USER", pk.fmt_float(self.run_time_user)),
            ("RUN_TIME_SYS", pk.fmt_float(self.run_time_sys)),
            ("BIN_SIZE", str(self.bin_size)),
            ("RUN_PG", pk.format_profile(self.profile)),
            ("RUN_HC", pk.format_counters(self.hardware_counters)),
            ("PROCESSOR_NUM", str(self.processor_num)),
            ("RANK", str(self.rank)),
            ("NOTES", self.notes),
        ] + list(_ext_fields(self.extensions))

    @classmethod
    def from_fields(cls, f: Mapping[str, str]) -> "ExecutionRecord":
        _require(f, "execution", "RUN_ID", "RUN_ID_ASSOCIATE", "COMPILE_ID",
                 "PROGRAM_ID", "RUN_TIME")
        if "DATASET_NUMBER" in f:
            dataset = int(f["DATASET_NUMBER"])
        else:
            # old packets carry the dataset only as the "N) " command-line prefix
            m = _DATASET_PREFIX.match(f.get("RUN_COMMAND_LINE", ""))
            dataset = int(m.group(1)) if m else 1
        ids = {k: parse_entity_id(f[k]) if f.get(k) else 0
               for k in ("COMPILER_ID", "PLATFORM_ID", "ENVIRONMENT_ID")}
        return cls(
            run_id=parse_entity_id(f["RUN_ID"]),
            run_id_associate=parse_entity_id(f["RUN_ID_ASSOCIATE"]),
            compile_id=parse_entity_id(f["COMPILE_ID"]),
            compiler_id=ids["COMPILER_ID"],
            program_id=parse_entity_id(f["PROGRAM_ID"]),
            platform_id=ids["PLATFORM_ID"],
            environment_id=ids["ENVIRONMENT_ID"],
            dataset_number=dataset,
            bin_size=int(f.get("BIN_SIZE") or 0),
            output_correct=pk.parse_bool(f.get("OUTPUT_CORRECT", "0")),
            run_time=float(f["RUN_TIME"]),
            run_time_user=float(f.get("RUN_TIME_USER") or 0),
            run_time_sys=float(f.get("RUN_TIME_SYS") or 0),
            run_command_line=f.get("RUN_COMMAND_LINE", ""),
            profile=pk.parse_profile(f.get("RUN_PG", "")),
            hardware_counters=pk.parse_counters(f.get("RUN_HC", "")),
            processor_num=int(f.get("PROCESSOR_NUM") or -1),
            rank=int(f.get("RANK") or 0),
            date=f.get("DATE", ""),
            time=f.get("TIME", ""),
            notes=f.get("NOTES", ""),
            extensions=_take_extensions(f, cls.KEYS),
        )


@dataclass(frozen=True)
class FeatureVector:
    kind: str
    entries: Dict[str, float]
    anchor_pass: str = ""

    def __post_init__(self):
        if self.kind not in ("static", "dynamic"):
            raise ValueError(f"feature vector kind must be static or dynamic, not {self.kind!r}")
        object.__setattr__(self, "entries", {str(k): float(v) for k, v in self.entries.items()})
        if not self.entries:
            raise ValueError("feature vector must have at least one entry")
        for name in self.entries:
            if not name or name == "..." or name != name.strip() or any(c in name for c in ",=\n"):
                raise ValueError(f"bad feature index name {name!r}")

    @classmethod
    def parse(cls, text: str, kind: str = "static", anchor_pass: str = "") -> "FeatureVector":
        return cls(kind, pk.parse_vector(text), anchor_pass)

    def format(self) -> str:
        return pk.format_vector(self.entries)


@dataclass(frozen=True)
class FeatureRecord:
    """Static features of one function, extracted after ``features.anchor_pass``."""

    compile_id: int
    function_name: str
    features: FeatureVector

    def to_fields(self):
        return [
            ("COMPILE_ID", str(self.compile_id)),
            ("FUNCTION_NAME", self.function_name),
            ("PASS", self.features.anchor_pass),
            ("STATIC_FEATURE_VECTOR", " " + self.features.format()),
        ]

    @classmethod
    def from_fields(cls, f):
        _require(f, "features", "COMPILE_ID", "STATIC_FEATURE_VECTOR")
        return cls(parse_entity_id(f["COMPILE_ID"]), f.get("FUNCTION_NAME", ""),
                   FeatureVector.parse(f["STATIC_FEATURE_VECTOR"], "static", f.get("PASS", "")))


@dataclass(frozen=True)
class PassesRecord:
    compile_id: int
    compiler_id: int
    function_name: str
    passes: Tuple[str, ...]

    def __post_init__(self):
        _tuple(self, "passes")

    def to_fields(self):
        return [
            ("COMPILE_ID", str(self.compile_id)),
            ("COMPILER_ID", str(self.compiler_id)),
            ("FUNCTION_NAME", self.function_name),
            ("PASSES", ",".join(self.passes)),
        ]

    @classmethod
    def from_fields(cls, f):
        _require(f, "passes", "COMPILE_ID", "PASSES")
        cid = f.get("COMPILER_ID")
        return cls(parse_entity_id(f["COMPILE_ID"]), parse_entity_id(cid) if cid else 0,
                   f.get("FUNCTION_NAME", ""), tuple(p for p in f["PASSES"].split(",") if p))


Record = Union[CompilationRecord, ExecutionRecord, FeatureRecord, PassesRecord]

RECORD_TYPES = {
    "compilation": CompilationRecord,
    "execution": ExecutionRecord,
    "features": FeatureRecord,
    "passes": PassesRecord,
}


def packet_kind(fields: Mapping[str, str]) -> str:
    if "RUN_ID" in fields or "RUN_TIME" in fields or "RUN_ID_ASSOCIATE" in fields:
        return "execution"
    if "STATIC_FEATURE_VECTOR" in fields:
        return "features"
    if "PASSES" in fields:
        return "passes"
    if {"OPT_FLAGS", "COMPILE_TIME", "BIN_SIZE", "OBJ_MD5CRC", "COMPILE_ID"} & fields.keys():
        return "compilation"
    raise MissingRequiredKey("packet has none of the keys identifying a compilation, "
                             "passes, features or execution packet")


_REQUIRED = {
    "execution": ("RUN_ID",),
    "compilation": ("COMPILE_ID",),
    "features": ("COMPILE_ID",),
    "passes": ("COMPILE_ID",),
}


def parse_packet(text: str) -> Tuple[str, Dict[str, str]]:
    """Parse one information packet and infer its kind from the key set."""
    fields = pk.parse_fields(text)
    kind = packet_kind(fields)
    _require(fields, kind, *_REQUIRED[kind])
    return kind, fields


def record_from_fields(fields: Mapping[str, str]) -> Record:
    return RECORD_TYPES[packet_kind(fields)].from_fields(fields)


def record_from_packet(text: str) -> Record:
    kind, fields = parse_packet(text)
    return RECORD_TYPES[kind].from_fields(fields)


def serialize_packet(record) -> str:
    if isinstance(record, (CompilationRecord, ExecutionRecord, FeatureRecord, PassesRecord)):
        return pk.format_packet(record.to_fields())
    return pk.format_packet(entity_fields(record))


def record_key(record) -> Tuple[str, object]:
    """Primary key of any stored record."""
    if isinstance(record, ExecutionRecord):
        return "execution", record.run_id
    if isinstance(record, CompilationRecord):
        return "compilation", record.compile_id
    if isinstance(record, FeatureRecord):
        return "features", (record.compile_id, record.function_name, record.features.anchor_pass)
    if isinstance(record, PassesRecord):
        return "passes", (record.compile_id, record.function_name)
    return "entity", record.id


# ------------------------------------------------------------------- cases


@dataclass(frozen=True)
class OptimizationCase:
    """A compilation, its executions on one dataset, and improvement over the baseline."""

    compilation: CompilationRecord
    executions: Tuple[ExecutionRecord, ...]
    baseline_run_id: int
    speedup: float
    size_ratio: float
    compile_time_ratio: float
    dispersion: float = 0.0
    rank: int = 0

    def __post_init__(self):
        _tuple(self, "executions")
        if any(e.compile_id != self.compilation.compile_id for e in self.executions):
            raise ValueError("every execution must reference the case compilation")

    @property
    def case_id(self) -> Tuple[int, int]:
        return self.compilation.compile_id, self.baseline_run_id

    @property
    def output_correct(self) -> bool:
        return all(e.output_correct for e in self.executions)

    @property
    def dataset_number(self) -> int:
        return self.executions[0].dataset_number

    @property
    def program_id(self) -> int:
        return self.compilation.program_id

    @property
    def opt(self) -> FlagCombination:
        return self.compilation.opt

    @property
    def is_baseline(self) -> bool:
        return any(e.run_id == self.baseline_run_id for e in self.executions)


def _anchor(baseline: Sequence[ExecutionRecord]) -> ExecutionRecord:
    for e in baseline:
        if e.is_baseline:
            return e
    return baseline[0]


def derive_case(compilation: CompilationRecord, executions: Sequence[ExecutionRecord],
                baseline_executions: Union[ExecutionRecord, Sequence[ExecutionRecord]],
                baseline_compilation: CompilationRecord, *,
                aggregator: str = DEFAULT_AGGREGATOR, reject_incorrect: bool = True,
                noise_gate: float = DEFAULT_NOISE_GATE,
                rank: Optional[int] = None) -> OptimizationCase:
    """Join a compilation and its runs with the baseline they are associated with.

    ``baseline_executions`` may be the single reference run or all repeats
    of it; the reference run is the one whose id equals its associate id.
    """
    if isinstance(baseline_executions, ExecutionRecord):
        baseline_executions = [baseline_executions]
    executions = tuple(executions)
    if not executions or not baseline_executions:
        raise ValueError("derive_case needs at least one case and one baseline execution")
    anchor = _anchor(baseline_executions)
    for e in executions:
        if e.run_id_associate != anchor.run_id:
            raise ValueError(f"run {e.run_id} is not associated with baseline run {anchor.run_id}")
        if e.dataset_number != anchor.dataset_number:
            raise DatasetMismatch(
                f"run {e.run_id} used dataset {e.dataset_number}, baseline used {anchor.dataset_number}")
    for e in baseline_executions:
        if e.dataset_number != anchor.dataset_number:
            raise DatasetMismatch("baseline repeats disagree on dataset")
    if reject_incorrect and not all(e.output_correct for e in executions):
        raise IncorrectOutput(f"compilation {compilation.compile_id} produced incorrect output")

    base_t = aggregate([e.run_time for e in baseline_executions], aggregator)
    noise = assess_noise([e.run_time for e in executions], aggregator, noise_gate)
    if base_t == 0 or noise.aggregate == 0:
        raise ZeroTime("aggregate run time is zero; speedup undefined")
    if compilation.bin_size == 0 or baseline_compilation.bin_size == 0:
        raise ZeroTime("binary size is zero; size ratio undefined")
    if compilation.compile_time == 0:
        ct_ratio = 1.0 if baseline_compilation.compile_time == 0 else float("inf")
    else:
        ct_ratio = baseline_compilation.compile_time / compilation.compile_time
    return OptimizationCase(
        compilation=compilation,
        executions=executions,
        baseline_run_id=anchor.run_id,
        speedup=base_t / noise.aggregate,
        size_ratio=baseline_compilation.bin_size / compilation.bin_size,
        compile_time_ratio=ct_ratio,
        dispersion=noise.dispersion,
        rank=max(e.rank for e in executions) if rank is None else rank,
    )

