"""Exception types raised across the package."""


class TiltLensError(Exception):
    """Base class for all package errors."""


class DomainError(TiltLensError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class BandEdgeError(DomainError):
    """Evaluation at or beyond the edge of the propagating band."""


class NoFocusSignal(TiltLensError):
    """The focus metric is flat over the search range."""


class DegenerateGeometry(TiltLensError, ValueError):
    """Regions are too close together to estimate a tilt angle."""


class PeakAmbiguity(TiltLensError):
    """Two cross-correlation peaks are too close in height to pick one.

    ``frame_index`` is set when raised during dataset registration.
    """

    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class ParseError(TiltLensError):
    """A manifest or sidecar could not be parsed."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class IntegrityError(TiltLensError):
    """Dataset files disagree with their manifest."""
