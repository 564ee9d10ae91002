"""Exception types raised across the package.

Every error carries enough structure (field/op names, offending shapes) that a
caller can report it on one line without re-parsing free text.
"""

from __future__ import annotations


class DicError(Exception):
    """Base class for all package errors."""


class ShapeError(DicError):
    """An operation received tensors with incompatible shapes."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class ConfigError(DicError):
    """A configuration field violates its invariant."""

    def __init__(self, field: str, detail: str):
        self.field = field
        self.detail = detail
        super().__init__(f"config field '{field}': {detail}")


class TapeError(DicError):
    """Backward was called on a tape that cannot serve it (cleared, consumed,
    or not the tape that produced the loss)."""


class NonScalarLossError(DicError):
    """backward() requires a scalar loss tensor."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        super().__init__(f"loss must be a scalar, got shape {self.shape}")


class CheckpointError(DicError):
    """A checkpoint file is missing, truncated, or malformed."""

    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail
        super().__init__(f"checkpoint '{path}': {detail}")


class TrainingDivergedError(DicError):
    """Loss became non-finite; carries the diagnostic context."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:g}, grad_norm={grad_norm:g})"
        )
