"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class belongs to exactly one of
three families: configuration, data, or numerical.
"""


class LithiumSsmError(Exception):
    """Base class for all package errors."""


# -- configuration family (CLI exit 1) --------------------------------------

class ConfigError(LithiumSsmError):
    pass


class CheckpointShapeError(ConfigError):
    """A checkpoint tensor does not fit the requested model configuration."""

    def __init__(self, tensor: str, expected, found):
        self.tensor = tensor
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"tensor {tensor!r}: expected shape {self.expected}, checkpoint has {self.found}"
        )


# -- data family (CLI exit 2) ------------------------------------------------

class DataError(LithiumSsmError):
    """Input data violates a record invariant.

    ``locus`` names where, e.g. ``"row 12"`` or ``"cycle 3"``.
    """

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        super().__init__(f"{message} ({locus})" if locus else message)


class SchemaError(DataError):
    def __init__(self, column: str, path=None):
        self.column = column
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing column {column!r}{where}", locus=f"column {column}")


class DimensionError(LithiumSsmError, ValueError):
    pass


class DomainError(DataError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class RankDeficiencyError(DataError):
    pass


class DegenerateCurveError(DataError):
    pass


class CheckpointError(DataError):
    pass


# -- numerical family (CLI exit 3) -------------------------------------------

class EvaluationError(LithiumSsmError):
    pass


class NumericalAbort(LithiumSsmError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, param_norms: dict):
        self.epoch = epoch
        self.batch = batch
        self.param_norms = dict(param_norms)
        norms = ", ".join(f"{k}={v:.3g}" for k, v in self.param_norms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; norms: {norms}")
