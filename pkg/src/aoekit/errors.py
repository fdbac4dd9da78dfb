"""Exception types shared across the package."""


class AoeError(Exception):
    """Base class for all package errors."""


class DegenerateInput(AoeError, ValueError):
    """Point sets too small, mismatched or rank deficient for alignment."""


class BehindCamera(AoeError, ValueError):
    pass


class AllBehindCamera(AoeError, ValueError):
    pass


class ZeroReference(AoeError, ValueError):
    pass


class NoOverlap(AoeError, ValueError):
    """Timestamp association produced zero pairs."""


class InsufficientPairs(AoeError, ValueError):
    pass


class LengthMismatch(AoeError, ValueError):
    pass


class TooShort(AoeError, ValueError):
    pass


class BadWindow(AoeError, ValueError):
    pass


class WindowTooLarge(AoeError, ValueError):
    pass


class NotAFailure(AoeError, ValueError):
    pass


class DuplicateVersion(AoeError, KeyError):
    pass


class UnknownOperator(AoeError, KeyError):
    pass


class UnknownVersion(AoeError, KeyError):
    pass


class InvalidSpec(AoeError, ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


class NoHealthyNode(AoeError, RuntimeError):
    pass


class ScenarioError(AoeError, ValueError):
    pass


class OutOfOrderEvent(AoeError, ValueError):
    pass


class BadTrimRange(AoeError, ValueError):
    pass


class NothingApproved(AoeError, RuntimeError):
    pass


class ParseError(AoeError, ValueError):
    """Input file could not be parsed; carries the 1-based line number."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")
