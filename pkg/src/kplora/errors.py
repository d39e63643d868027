"""Exception taxonomy.

InputError subclasses mark problems with user-supplied files or flags; the
CLI maps them to exit code 2. Everything else is an internal error (exit 1).
"""


class KploraError(Exception):
    """Base class for all package errors."""


class InputError(KploraError):
    """Invalid user input (bad file, bad flag value). CLI exit code 2."""


class FormatError(InputError):
    """Malformed file content. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(InputError):
    """Structurally valid file violating the documented schema."""


class VocabularyError(InputError):
    """Class name outside the configured instrument vocabulary."""


class ContractError(KploraError):
    """Caller violated a function precondition (shape/length mismatch)."""



class DivergenceError(KploraError):
    """Training loss became non-finite."""

    def __init__(self, step: int, learning_rate: float):
        super().__init__(
            f"non-finite loss at step {step} (learning rate {learning_rate:g})"
        )
        self.step = step
        self.learning_rate = learning_rate
