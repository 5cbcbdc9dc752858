"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PartfuseError(Exception):
    exit_code = 2


class DataError(PartfuseError):
    """Bad or inconsistent input data. ``kind`` names the failure class."""

    exit_code = 2

    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class NumericalError(PartfuseError):
    exit_code = 3
