"""Exception types raised by the poselift package."""


class PoseliftError(Exception):
    """Base class for all package-specific errors."""


class DegenerateBox(PoseliftError):
    """Bounding-box corners do not span a usable object frame."""


class DegeneratePose(PoseliftError):
    """All points of a pose coincide; alignment is undefined."""


class ShapeMismatch(PoseliftError):
    """An array argument has the wrong shape."""


class NonScalarLoss(PoseliftError):
    """backward() was called on a node that is not a scalar."""


class TooFewPoints(PoseliftError):
    """Fewer samples than requested cluster centers."""


class EmptyBatch(PoseliftError):
    """A loss was evaluated on an empty batch."""


class MissingDictionary(PoseliftError):
    """Semi-supervised training requires a trained dictionary module."""


class MissingLabels(PoseliftError):
    """A frame sampled for the labeled split carries no 3D annotation."""


class ParseError(PoseliftError):
    """A dataset file failed to parse.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(PoseliftError):
    """A parsed record violates the interchange schema.

    Carries the name of the offending field.
    """

    def __init__(self, message: str, field: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}field '{field}': {message}")
        self.field = field
        self.line = line


class ConfigError(PoseliftError):
    """Invalid training or CLI configuration."""
