"""Exception hierarchy and CLI exit codes for rxsplat."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class RxsplatError(Exception):
    """Base class for errors surfaced to the command line."""

    exit_code = 1


class ConfigError(RxsplatError, ValueError):
    """Config or schema violation. The message names the field path."""

    exit_code = EXIT_CONFIG


class NumericError(RxsplatError, ArithmeticError):
    """Non-finite loss, gradient or coefficient."""

    exit_code = EXIT_NUMERIC


class DataIOError(RxsplatError, OSError):
    """Missing, unreadable or corrupt file."""

    exit_code = EXIT_IO


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented CLI exit code.

    Args:
        error: Exception raised by a command

    Returns:
        Exit code (2 config, 3 numeric, 4 I/O, 1 anything else)
    """
    if isinstance(error, RxsplatError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    return 1
