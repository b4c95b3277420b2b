"""Shared error types and the violation value returned by validation checks."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Violation:
    """First failed check of a validation, as a value rather than an exception.

    `code` is a stable machine-readable name (e.g. "bad-signature",
    "nonce-mismatch", "wrong-proposer"); `detail` is free text for logs.
    """

    code: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}" if self.detail else self.code


class BlendmasError(Exception):
    """Base class for all package errors."""


class InvalidKeyError(BlendmasError):
    pass


class InvalidBlockError(BlendmasError):
    """Block rejected whole; `tx_index` identifies the offending transaction
    when the failure was transaction-level (None for header-level failures)."""

    def __init__(self, message: str, tx_index: int | None = None):
        super().__init__(message)
        self.tx_index = tx_index


class NotFoundError(BlendmasError):
    pass


class ConflictError(BlendmasError):
    pass


class UnreachableError(BlendmasError):
    """A required peer service could not be reached (callers fail closed)."""
