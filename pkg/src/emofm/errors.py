"""Exception hierarchy shared by the library and the CLI."""


class EmofmError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class DimensionError(EmofmError, ValueError):
    exit_code = 3


class ContractError(EmofmError, RuntimeError):
    exit_code = 2


class SchemaError(EmofmError, ValueError):
    exit_code = 3


class DataError(EmofmError, ValueError):
    exit_code = 3


class SpecError(EmofmError, ValueError):
    exit_code = 3


class RoutingError(EmofmError, ValueError):
    exit_code = 3


class BundleError(EmofmError, ValueError):
    exit_code = 3


class SequencingError(EmofmError, RuntimeError):
    exit_code = 2


class UsageError(EmofmError):
    exit_code = 2


class UndefinedMetricError(EmofmError, ValueError):
    exit_code = 3


class NumericAbort(EmofmError, FloatingPointError):
    exit_code = 4
