"""Common error base. The CLI maps every SleepnetError to exit code 2."""


class SleepnetError(Exception):
    """A data or domain error (as opposed to a usage error)."""
