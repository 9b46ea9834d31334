"""Exception hierarchy shared across the package."""


class TrafficLabError(Exception):
    """Base class for all domain errors raised by trafficlab."""


class TNTPParseError(TrafficLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructuralError(TrafficLabError, ValueError):
    """A file or object references nodes/links that do not exist."""


class IntegrityError(TrafficLabError, ValueError):
    """Declared totals, counts or checksums disagree with the payload."""


class DomainError(TrafficLabError, ValueError):
    """An argument lies outside the domain of a function."""


class InfeasibleError(TrafficLabError):
    """Positive demand between a disconnected origin/destination pair."""

    def __init__(self, origin: int, destination: int):
        self.origin = origin
        self.destination = destination
        super().__init__(
            f"destination {destination} unreachable from origin {origin} "
            f"(0-based ids) but demand is positive"
        )


class NumericError(TrafficLabError, ArithmeticError):
    pass


class GenerationError(TrafficLabError):
    pass


class SchemaVersionError(IntegrityError):
    pass


class ContractError(TrafficLabError, ValueError):
    """Caller violated a documented shape or size contract."""
