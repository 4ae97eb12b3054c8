"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class NephroError(Exception):
    """Base class for all package errors."""


class ValidationError(NephroError, ValueError):
    """Input data or configuration violates a stated invariant.

    ``problems`` holds every violation found, not only the first.
    """

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DomainError(ValidationError):
    """A domain function was called outside its precondition."""


class TemplateError(NephroError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class TransportError(NephroError):
    """A model backend could not be reached or kept failing.

    ``cause`` carries the last underlying exception or HTTP status.
    """

    def __init__(self, message: str, cause: object = None, attempts: int = 0):
        super().__init__(message)
        self.cause = cause
        self.attempts = attempts


class FixtureMissError(NephroError, LookupError):
    """A scripted backend has no reply recorded for a request fingerprint."""

    def __init__(self, fingerprint: str):
        super().__init__(f"unmatched fixture: {fingerprint}")
        self.fingerprint = fingerprint


class OracleError(NephroError):
    """The trend oracle could not read the data block of a request."""


class StageError(NephroError):
    """A pipeline stage ran before the stage it depends on."""

    def __init__(self, missing_stage: str, detail: str = ""):
        msg = f"missing upstream stage '{missing_stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.missing_stage = missing_stage
