"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or inconsistent input (maps to CLI exit status 2)."""


class CheckFailure(RuntimeError):
    """A numerical check or construction precondition failed.

    ``witness`` carries whatever data pins down the failure so callers
    (and CLI reports) can show it.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
