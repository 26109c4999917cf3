"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class FormatError(ValueError):
    """Malformed checkpoint, feature file or dataset on disk."""


class NumericFailure(FloatingPointError):
    pass


class SchedulingViolation(RuntimeError):
    """A node was evaluated before one of its previous-section neighbours."""
