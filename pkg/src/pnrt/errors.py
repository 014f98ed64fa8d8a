"""Exception types shared across the package."""


class PNRTError(Exception):
    """Base class for every error raised by this package."""


class InputError(PNRTError, ValueError):
    """Malformed or inconsistent user input."""


class FormatError(InputError):
    """A file does not follow its declared format.

    ``line`` carries the 1-based line number when it is known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnsupportedOperation(PNRTError):
    """The proximity source cannot answer this kind of query."""


class UnknownAssignment(PNRTError, KeyError):
    """An assignment outside a finite pool was queried."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown assignment"


class ContractError(PNRTError):
    """A documented precondition was violated (e.g. D_obs outside the design)."""


class SupportTooLarge(PNRTError):
    """Exhaustive enumeration was requested on a support above the cap."""
