"""Exception hierarchy shared by all primkit modules."""


class PrimkitError(Exception):
    """Base class for every error raised by the library."""


class ShapeMismatch(PrimkitError, ValueError):
    pass


class InvalidShape(PrimkitError, ValueError):
    pass


class GroupMismatch(PrimkitError, ValueError):
    pass


class InvalidAxis(PrimkitError, ValueError):
    pass


class InvalidEpsilon(PrimkitError, ValueError):
    pass


class AlgoNotApplicable(PrimkitError):
    pass


class WorkspaceTooSmall(PrimkitError):
    def __init__(self, required: int, provided: int):
        super().__init__(f"workspace of {provided} bytes is smaller than the {required} bytes required")
        self.required = required
        self.provided = provided


class DuplicateSolver(PrimkitError):
    pass


class NoApplicableSolver(PrimkitError):
    pass


class NotTunable(PrimkitError):
    pass


class NoValidConfig(PrimkitError):
    pass


class ParseError(PrimkitError, ValueError):
    """Malformed performance-database line."""

    def __init__(self, lineno: int, text: str, reason: str = "malformed record"):
        super().__init__(f"line {lineno}: {reason}: {text!r}")
        self.lineno = lineno
        self.text = text
        self.reason = reason


class LayoutNotDescending(PrimkitError, ValueError):
    pass


class FusionNotSupported(PrimkitError):
    def __init__(self, constraint: str):
        super().__init__(constraint)
        self.constraint = constraint


class AlreadyCompiled(PrimkitError):
    pass


class NotCompiled(PrimkitError):
    pass


class MissingArgs(PrimkitError):
    pass
