"""Exception hierarchy shared by every module."""


class SparseCFError(Exception):
    """Base class for all errors raised by :mod:`sparse_cf`."""


class IngestionError(SparseCFError, ValueError):
    """A transaction or catalog record could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(SparseCFError, ValueError):
    """An item uses a feature-set name the catalog schema does not declare."""


class DomainError(SparseCFError, ValueError):
    """A quantity was requested outside the domain where it is defined."""


class ConfigError(SparseCFError, ValueError):
    """Inconsistent dimensions, counts or options."""


class SamplerError(SparseCFError, ValueError):
    """A sampler was built over an empty or all-zero support."""


class TrainingError(SparseCFError, RuntimeError):
    """Training produced a non-finite loss."""


class ModelFormatError(SparseCFError, ValueError):
    """A serialized model has the wrong version or tensor shapes."""
