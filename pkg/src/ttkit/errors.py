"""Exception hierarchy shared across ttkit.

Every error raised for bad input derives from :class:`TTKitError`, which the
CLI maps to exit status 2.
"""


class TTKitError(ValueError):
    """Base class for all ttkit input and contract errors."""


class InvalidRecord(TTKitError):
    pass


class ParseError(TTKitError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInput(TTKitError):
    pass


class InconsistentVocab(TTKitError):
    pass


class InvalidTree(TTKitError):
    def __init__(self, violations):
        self.violations = list(violations)
        summary = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"tree has {len(self.violations)} violation(s): {summary}")


class PathWithNoGeneratedTokens(TTKitError):
    pass


class CorruptSegmentTable(TTKitError):
    pass


class CorruptBatchFile(TTKitError):
    pass


class ShapeMismatch(TTKitError):
    pass


class PositionOverflow(TTKitError):
    pass


class TraceMismatch(TTKitError):
    pass


class InstanceTooLarge(TTKitError):
    pass


class GroupTooSmall(TTKitError):
    pass


class UncoveredGeneratedToken(TTKitError):
    pass


class AlignmentMismatch(TTKitError):
    pass


class MissingTestResult(TTKitError):
    pass


class TooFewTrials(TTKitError):
    pass


class ConfigError(TTKitError):
    pass
