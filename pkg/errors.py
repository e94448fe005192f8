"""Exceptions raised by the cellsketch modules.

The CLI catches CellSketchError, reports the message and exits nonzero.
"""


class CellSketchError(Exception):
    """Base class for all pipeline errors."""


class ParseError(CellSketchError):
    """Malformed input file or an entry that breaks a dataset invariant."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigMismatchError(CellSketchError):
    """Two sketches (or a sketch and a dataset) disagree on configuration."""


class EmptyInputError(CellSketchError):
    """An operation received nothing to work on."""


class LabelsRequiredError(CellSketchError):
    """The requested mode needs cell labels and the dataset has none."""


class DegenerateRankingError(CellSketchError):
    """Enrichment is undefined: no hits, or every ranked pair is a hit."""


class CounterOverflowError(CellSketchError):
    """A 32-bit sketch counter would wrap."""


class WeightFileError(CellSketchError):
    """Weight manifest and blob do not match the model configuration."""
