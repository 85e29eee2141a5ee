"""Exception types shared across the package."""


class PlexError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PlexError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(PlexError):
    """A documented precondition of an operation was violated."""


class PositionRangeError(ContractError):
    """An absolute timestep falls outside the learned position table."""


class StagedTrainingError(ContractError):
    """Pretraining stages were invoked in an invalid order."""


class FormatError(PlexError):
    """A dataset or checkpoint file is malformed."""


class GenerationError(PlexError):
    """Episode generation exhausted its retry budget."""


class DivergenceError(PlexError):
    """Training produced non-finite losses or gradients."""
