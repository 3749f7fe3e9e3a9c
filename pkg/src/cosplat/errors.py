"""Exception types shared across the package."""


class CosplatError(Exception):
    """Base class for package-specific failures."""


class FieldFormatError(CosplatError):
    """Raised when a field or raw-image file cannot be decoded.

    Carries the byte offset at which decoding failed so corrupt files can be
    diagnosed without a hex editor.
    """

    def __init__(self, message: str, byte_offset: int = 0):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class DatasetError(CosplatError):
    """Raised when a dataset directory is missing pieces or inconsistent."""


class RenderError(CosplatError):
    """Raised when rendering encounters non-finite primitive parameters."""

    def __init__(self, message: str, primitive_index: int = -1):
        super().__init__(message)
        self.primitive_index = primitive_index


class TrainingDiverged(CosplatError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, iteration: int, field_index: int, value: float):
        super().__init__(
            f"non-finite loss {value!r} at iteration {iteration} (field {field_index})"
        )
        self.iteration = iteration
        self.field_index = field_index
