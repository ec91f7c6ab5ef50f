"""Exception kinds raised across the package.

Each failure category gets its own class so callers (and the CLI exit
code mapping) can tell them apart without parsing messages.
"""

from __future__ import annotations


class SoupkitError(Exception):
    """Base class for all library errors."""


class ConfigError(SoupkitError):
    """Invalid configuration value, unknown key, or malformed config file."""


class CheckpointFormatError(SoupkitError):
    """Base class for checkpoint file format violations."""


class BadMagicError(CheckpointFormatError):
    """File does not start with the checkpoint magic bytes."""


class FormatVersionError(CheckpointFormatError):
    """Checkpoint format version is not supported."""


class TruncatedFileError(CheckpointFormatError):
    """File ends before a declared region (header or tensor payload)."""


class DuplicateTensorError(CheckpointFormatError):
    """Header declares the same tensor name twice."""


class HeaderError(CheckpointFormatError):
    """Header is not parseable or declares inconsistent sizes."""


class DataFormatError(SoupkitError):
    """Malformed dataset file (bad row, label out of range, bad header)."""


class ShapeMismatchError(SoupkitError):
    """Operands do not share tensor names/shapes, or lengths disagree."""


class NonFiniteError(SoupkitError):
    """A produced tensor contains NaN or infinity."""


class UndefinedAngleError(SoupkitError):
    """Angle requested against a zero-norm direction."""


class DegenerateBasisError(SoupkitError):
    """Plane directions are zero or parallel; no 2-D basis exists."""


class DivergenceError(SoupkitError):
    """Training loss became non-finite; message names the failing step."""
