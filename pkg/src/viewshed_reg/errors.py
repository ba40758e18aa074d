"""Exception hierarchy shared by every stage of the pipeline."""


class ViewshedRegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ViewshedRegError, ValueError):
    """Invalid parameters, scene specs or config files."""


class ContractError(ViewshedRegError, ValueError):
    """A caller violated a documented precondition (non-finite input, bad shape)."""


class DegenerateError(ViewshedRegError):
    """The data cannot support the requested operation (empty scene, empty masks)."""


class RankError(DegenerateError):
    """Point configuration too degenerate for a closed-form fit."""


class NoSolutionError(ViewshedRegError):
    """Robust estimation found no consistent hypothesis."""


class GenerationError(ViewshedRegError):
    """Novel-view generation could not produce enough usable cameras."""


class DomainError(ViewshedRegError, ValueError):
    """Argument outside the domain of a mathematical map (e.g. log at angle pi)."""


class ParseError(ViewshedRegError, ValueError):
    """Malformed file. Carries a location (line/column or byte offset) when known."""

    def __init__(self, message, *, line=None, column=None, offset=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        if offset is not None:
            loc.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.column = column
        self.offset = offset


class ValidationError(ViewshedRegError, ValueError):
    """Parsed data violates a type invariant (e.g. det(R) < 0)."""


class DivergenceError(ViewshedRegError):
    """Optimisation blew up. ``best`` holds the best iterate seen so far."""

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = history or []


class StageError(ViewshedRegError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
