"""Exception types raised across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class BehindCameraError(InvalidInputError):
    """A point projects to non-positive camera-frame depth."""


class InvalidClassError(InvalidInputError):
    """A class id outside the configured label space."""


class FormatError(ValueError):
    """Malformed bytes or text in one of the on-disk formats.

    ``offset`` is the byte offset of the offending field for binary codecs,
    ``line`` the 1-based line number for text parsers.
    """

    def __init__(self, message: str, *, offset: int | None = None,
                 line: int | None = None, field: str | None = None) -> None:
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line
        self.field = field


class CacheMismatchError(InvalidInputError):
    """A backward pass was given a cache from a different forward call."""
