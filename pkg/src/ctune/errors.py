"""Exception hierarchy shared by every ctune module."""


class CTuneError(Exception):
    """Base class; ``code`` is the token reported in diagnostics packets."""

    code = "ERROR"


# packets
class PacketError(CTuneError, ValueError):
    code = "MALFORMED_PACKET"


class MalformedLine(PacketError):
    code = "MALFORMED_LINE"


class MissingRequiredKey(PacketError):
    code = "MISSING_REQUIRED_KEY"


class DuplicateKey(PacketError):
    code = "DUPLICATE_KEY"


# case derivation
class CaseError(CTuneError):
    pass


class DatasetMismatch(CaseError):
    code = "DATASET_MISMATCH"


class ZeroTime(CaseError):
    code = "ZERO_TIME"


class IncorrectOutput(CaseError):
    code = "INCORRECT_OUTPUT"


class EmptyInput(CTuneError, ValueError):
    code = "EMPTY_INPUT"


# repository
class StorageFailure(CTuneError):
    code = "STORAGE_FAILURE"


class ConflictingRecord(StorageFailure):
    code = "CONFLICTING_RECORD"


class RepositoryLocked(StorageFailure):
    code = "REPOSITORY_LOCKED"


class DanglingReference(CTuneError):
    code = "DANGLING_REFERENCE"


class VersionMismatch(CTuneError):
    code = "VERSION_MISMATCH"


class UnknownCase(CTuneError):
    code = "UNKNOWN_CASE"


# experiment driver
class DriverError(CTuneError):
    pass


class CompilerNotFound(DriverError):
    code = "COMPILER_NOT_FOUND"


class CompileFailed(DriverError):
    code = "COMPILE_FAILED"

    def __init__(self, message, log=""):
        super().__init__(message)
        self.log = log


class RunFailed(DriverError):
    code = "RUN_FAILED"


class Timeout(DriverError):
    code = "TIMEOUT"


class MissingReference(DriverError):
    code = "MISSING_REFERENCE"


class UnsupportedRuntime(DriverError):
    code = "UNSUPPORTED_RUNTIME"


# search
class LengthExceedsSpace(CTuneError, ValueError):
    code = "LENGTH_EXCEEDS_SPACE"


class EvaluationFailed(CTuneError):
    code = "EVALUATION_FAILED"


class BaselineFailed(CTuneError):
    code = "BASELINE_FAILED"


# prediction
class InsufficientData(CTuneError):
    code = "INSUFFICIENT_DATA"


class ModelMismatch(CTuneError):
    code = "MODEL_MISMATCH"


class EmptyFeatureVector(CTuneError, ValueError):
    code = "MALFORMED_QUERY"


# runtime adaptation
class EmptyTrace(CTuneError, ValueError):
    code = "EMPTY_TRACE"


class NoCandidates(CTuneError):
    code = "NO_CANDIDATES"
