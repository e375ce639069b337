"""Exception taxonomy for the engine.

Every error raised by this package derives from :class:`EngineError` so callers
(and the CLI exit-code mapping) can distinguish engine failures from bugs.
"""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ValueAlphabetError(EngineError):
    """An input value falls outside its declared alphabet ({-1,+1} or {-1,0,+1})."""


class LayoutError(EngineError):
    """Bit-plane/matrix lane layouts disagree (lane counts, word counts, alignment)."""


class PlaneOverlapError(EngineError):
    """pos AND neg is nonzero somewhere: a lane claims to be both +1 and -1."""


class ShapeError(EngineError):
    """Tensor extents are inconsistent with the requested operation."""


class UnsupportedConfigError(EngineError):
    """A configuration the engine deliberately does not express (e.g. zero-padding
    with pure-binary weights, or a transposed conv with kernel != stride)."""


class FormatError(EngineError):
    """A file failed to parse. ``where`` carries a byte offset or line number."""

    def __init__(self, message, where=None):
        self.where = where
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)


class BundleError(FormatError):
    """A weight-bundle directory or manifest is malformed."""
