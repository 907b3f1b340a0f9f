"""Exception classes for the pepsnet library."""

from __future__ import annotations

from typing import Any

_BOX_WIDTH = 51  # Inner width of the diagnostic box


def _format_error_box(title: str, lines: list[str], hint: str | None = None) -> str:
    """Format a diagnostic message between two horizontal rules.

    Args:
        title: The error title (e.g., "Non-finite loss")
        lines: Detail lines to display
        hint: Optional suggestion shown after the details

    Returns:
        Formatted multi-line string
    """
    rule = "━" * _BOX_WIDTH
    result = [rule]

    sentences = title.split(". ")
    result.append(f"  ✗ {sentences[0]}{'.' if len(sentences) > 1 else ''}")
    for sentence in sentences[1:]:
        result.append(f"    {sentence}")
    result.append("")

    for line in lines:
        result.append(f"  {line}")

    if hint:
        result.append("")
        result.append(f"  → {hint}")

    result.append(rule)

    return "\n".join(result)


class PepsError(Exception):
    """Base exception for all pepsnet errors."""

    pass


class PepsArgumentError(PepsError):
    """An argument is outside its domain.

    Raised when:
    - An axis is paired twice or a permutation is invalid
    - chi < 1, a pixel lies outside [0, 1], a label is out of range
    - A tape node id is unknown
    """

    pass


class PepsDimensionError(PepsError):
    """Tensor extents or element counts do not match."""

    pass


class PepsCapacityError(PepsError):
    """Exact contraction would exceed its size guard.

    Attributes:
        sample_index: Index of the sample being processed, when known.
    """

    def __init__(self, message: str, sample_index: int | None = None) -> None:
        super().__init__(message)
        self.sample_index = sample_index

    def with_sample(self, sample_index: int) -> PepsCapacityError:
        """Return a copy of this error annotated with a sample index."""
        return PepsCapacityError(f"sample {sample_index}: {self.args[0]}", sample_index=sample_index)


class PepsFormatError(PepsError):
    """Binary input (IDX file) is malformed.

    Attributes:
        offset: Byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PepsCheckpointError(PepsError):
    """Checkpoint cannot be read or does not match the configuration.

    Raised when:
    - The magic bytes or version byte are wrong
    - The payload is truncated
    - Stored shapes disagree with the header or the requested configuration
    """

    pass


class PepsConfigError(PepsError):
    """Configuration is invalid (bad value, unknown key, malformed file)."""

    pass


class PepsTrainingError(PepsError):
    """Training produced a non-finite loss.

    Renders a ruled diagnostic block with the epoch, batch and the largest
    gradient magnitude seen in the failing batch.
    """

    def __init__(
        self,
        message: str,
        epoch: int,
        batch: int,
        max_grad: float,
        details: dict[str, Any] | None = None,
    ) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.max_grad = max_grad
        self.details = details or {}

    def __str__(self) -> str:
        lines = [
            f"Epoch: {self.epoch}",
            f"Batch: {self.batch}",
            f"Max |grad|: {self.max_grad:.6g}",
        ]
        lines.extend(f"{key}: {value}" for key, value in self.details.items())
        return _format_error_box(
            title=self.args[0],
            lines=lines,
            hint="Lower the learning rate or set feature_scale explicitly",
        )

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(epoch={self.epoch}, batch={self.batch}, message={self.args[0]!r})"
