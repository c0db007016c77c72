"""Exception hierarchy shared across the pipeline."""


class GroundSegError(Exception):
    """Base class for all pipeline errors."""


class FormatError(GroundSegError, ValueError):
    """A binary file does not match its expected record layout."""


class LengthMismatch(GroundSegError, ValueError):
    pass


class InvalidParam(GroundSegError, ValueError):
    pass


class EmptyCloud(GroundSegError, ValueError):
    pass


class EmptyHistogram(GroundSegError, ValueError):
    pass


class DegenerateFit(GroundSegError, ArithmeticError):
    """Neighbourhood cannot be written as z = f(x, y)."""


class TooFewPoints(GroundSegError, ValueError):
    pass


class MissingNormals(GroundSegError, ValueError):
    pass


class NoLabels(GroundSegError, ValueError):
    pass


class ShapeMismatch(GroundSegError, ValueError):
    pass


class EmptyDataset(GroundSegError, ValueError):
    pass


class EmptyCounts(GroundSegError, ValueError):
    pass


class CheckpointMismatch(GroundSegError, ValueError):
    pass


class ConfigHashConflict(GroundSegError):
    """Two artifacts were produced under different run configurations."""
