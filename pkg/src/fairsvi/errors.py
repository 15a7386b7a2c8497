"""Exception types shared across the package."""


class FairSVIError(Exception):
    """Base class for package errors."""


class DimensionError(FairSVIError, ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(FairSVIError, ValueError):
    """An argument lies outside the domain of a function."""


class ContractError(FairSVIError, RuntimeError):
    """A call violated a documented precondition."""


class TrainingDivergence(FairSVIError, FloatingPointError):
    """A non-finite value appeared during training.

    ``term`` names the offending parameter or objective component.
    """

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite value in {term!r}")


class AuditError(FairSVIError, ValueError):
    """A fairness audit cannot be computed on the given data."""


class UnknownCategoryError(AuditError):
    """A protected attribute value was not seen when the groups were built."""


class SchemaError(FairSVIError, ValueError):
    """Dataset does not match its schema, or the schema itself is invalid."""


class DataError(FairSVIError, ValueError):
    """Input data could not be parsed.

    ``rows`` lists ``(row_number, column, cell)`` for every offending cell.
    """

    def __init__(self, message, rows=()):
        self.rows = list(rows)
        super().__init__(message)


class MetricError(FairSVIError, ValueError):
    """A clustering or regression metric is undefined for the input."""


class ConfigError(FairSVIError, ValueError):
    """A run configuration or command-line option is invalid."""
