"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match the network architecture."""


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite.

    ``index`` is the batch position of the offending sample, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DomainError(ValueError):
    """An argument lies outside the domain of a closed-form expression."""


class FormatError(ValueError):
    """A binary file does not follow the expected layout.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset=None):
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)
        self.offset = offset


class StateError(RuntimeError):
    """An object is not in a state that allows the requested operation."""
