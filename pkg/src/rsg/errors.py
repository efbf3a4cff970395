"""Exception hierarchy.  ``code`` is the machine-parsable prefix the CLI prints;
``exit_status`` the process exit code it maps to."""


class RsgError(Exception):
    code = "error"
    exit_status = 3


class ConfigError(RsgError):
    code = "config-error"
    exit_status = 2


class DataError(RsgError):
    code = "data-error"
    exit_status = 3


class GraphTooLargeError(DataError):
    code = "graph-too-large"


class ParseError(DataError):
    code = "parse-error"


class SchemaVersionError(DataError):
    code = "schema-version-mismatch"


class InvalidGeometryError(DataError):
    code = "invalid-geometry"


class UnknownIdError(DataError):
    code = "unknown-id"


class TaskMismatchError(DataError):
    code = "task-mismatch"


class TooLargeError(DataError):
    code = "too-large"


class NumericError(RsgError):
    code = "numeric-error"
    exit_status = 4


class ShapeMismatchError(NumericError, ValueError):
    code = "shape-mismatch"


class NotScalarError(NumericError):
    code = "not-scalar"


class DetachedLossError(NumericError):
    code = "detached-loss"


class MissingGradError(NumericError):
    code = "missing-grad"


class DegenerateNormalizerError(NumericError):
    code = "degenerate-normalizer"


class NaNLossError(NumericError):
    code = "nan-loss"
