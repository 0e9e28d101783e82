"""Exception types shared across the package."""

from typing import Optional


class GridLMError(Exception):
    """Base class for all gridlm errors."""


class VocabError(GridLMError, ValueError):
    """Token id outside the layout, or an illegal (mode, token) pair."""


class SequenceError(GridLMError, ValueError):
    """A token sequence violates the interleaving grammar.

    ``position`` is the index of the first offending token.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class CodecError(GridLMError, ValueError):
    """Unknown word, out-of-palette cell, or malformed image token run."""


class DatasetError(GridLMError, ValueError):
    """Dataset file missing or unparsable; parse errors carry the 1-based line."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"{message} (line {line})" if line is not None else message)
        self.line = line


class CapacityError(GridLMError, ValueError):
    """Sequence exceeds the model's maximum length."""


class CheckpointError(GridLMError, ValueError):
    """Checkpoint is corrupt, truncated, or incompatible with the config."""


class TrainingError(GridLMError, RuntimeError):
    """Training diverged or an internal training invariant was violated."""


class GenerationError(GridLMError, RuntimeError):
    """Decoding could not finish (capacity exhausted mid-image, bad logits)."""
