"""Exception hierarchy shared across repairkit modules."""

from __future__ import annotations


class RepairkitError(Exception):
    """Base class for all repairkit errors."""


class ReportParseError(RepairkitError):
    """The analyzer report is not valid JSON."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ReportSchemaError(RepairkitError):
    """A finding in the report is missing a required field or has a bad value."""

    def __init__(self, field: str, index: int, detail: str = "missing required field"):
        super().__init__(f"element {index}: {detail} {field!r}")
        self.field = field
        self.index = index


class BuildError(RepairkitError):
    def __init__(self, exit_code: int, log_path: str, message: str = "build failed"):
        super().__init__(f"{message} (exit code {exit_code}, log: {log_path})")
        self.exit_code = exit_code
        self.log_path = log_path


class AnalyzerTimeout(RepairkitError, TimeoutError):
    def __init__(self, limit: float):
        super().__init__(f"analyzer exceeded the configured limit of {limit:g} s")
        self.limit = limit


class ToolMissingError(RepairkitError, EnvironmentError):
    """An external executable (analyzer, git, build tool) could not be started."""


class RefError(RepairkitError):
    pass


class ParseError(RepairkitError):
    """Source text does not parse under the language grammar."""


class NoEnclosingMethod(RepairkitError):
    pass


class EmptyDiff(RepairkitError):
    pass


class SpanOutOfRange(RepairkitError):
    pass


class DimensionError(RepairkitError, ValueError):
    pass


class IndexVersionError(RepairkitError):
    """Index file was built with different encoder parameters."""


class TrainingError(RepairkitError):
    pass


class HardOverflow(RepairkitError):
    """The buggy method alone does not fit into the prompt budget."""


class ArityError(RepairkitError, ValueError):
    pass


class BackendError(RepairkitError):
    pass


class ProtocolError(RepairkitError):
    """Backend response does not follow the completion wire contract."""


class CandidateParseError(RepairkitError):
    pass


class ContractError(RepairkitError):
    pass


class AnalyzerError(RepairkitError):
    """The analyzer ran but failed or produced no report."""
