"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class ClozeRankError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ClozeRankError, ValueError):
    """A pure operation received arguments that violate its contract."""


class MaskingError(InvalidInputError):
    def __init__(self, token: str, message: str | None = None):
        self.token = token
        super().__init__(message or f"cannot mask token {token!r}: no unconsumed whole-word occurrence")


class ImageLoadError(InvalidInputError):
    pass


class RankParseError(ClozeRankError):
    pass


class BackendConfigError(ClozeRankError):
    pass


class BackendError(ClozeRankError):
    """A chat call failed. ``status`` is the HTTP status when there was one."""

    def __init__(self, message: str, status: int | None = None, retryable: bool = False, attempts: int = 0):
        self.status = status
        self.retryable = retryable
        self.attempts = attempts
        super().__init__(message)


class ScriptMissError(BackendError):
    def __init__(self, attempted: list[str]):
        self.attempted = attempted
        super().__init__("no scripted response; tried " + ", ".join(attempted))


class CacheMissError(BackendError):
    """Raised by an offline cache when a request was never answered before."""


class PipelineError(ClozeRankError):
    def __init__(self, query_id: str, message: str):
        self.query_id = query_id
        super().__init__(f"[{query_id}] {message}")


class DatasetError(ClozeRankError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None, ident: str | None = None):
        self.path = path
        self.line = line
        self.ident = ident
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class RetrieverError(ClozeRankError):
    pass
