"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class DegenerateGeometryError(ValueError):
    """A geometric quantity is undefined, e.g. an angle at a repeated point."""


class DataFormatError(ValueError):
    """A file on disk could not be parsed.

    The message carries the location (file, and where possible the record).
    """


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss."""
