"""Exception hierarchy.

Exit codes used by the command line map onto two families: ``TaskError``
(something went wrong while doing the work, exit 1) and ``ConfigError`` /
``IntegrityError`` (the inputs were wrong or inconsistent, exit 2).
"""


class CmlmError(Exception):
    """Base class for all errors raised by this package."""


class TaskError(CmlmError):
    pass


class DimensionError(TaskError, ValueError):
    pass


class NumericError(TaskError, ArithmeticError):
    pass


class VocabularyError(TaskError, IndexError):
    pass


class LengthError(TaskError, ValueError):
    pass


class IngestionError(TaskError, ValueError):
    pass


class ContractError(TaskError, ValueError):
    """A documented precondition was violated by the caller."""


class TrainingError(TaskError, RuntimeError):
    pass


class MetricError(TaskError, ValueError):
    pass


class ConfigError(CmlmError, ValueError):
    pass


class IntegrityError(CmlmError):
    """Artifacts disagree: hash, version or configuration mismatch."""


class StoreCoverageError(IntegrityError, KeyError):
    pass
