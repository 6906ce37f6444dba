"""
Exception types raised across PanopticRoad and the process exit codes the
command line maps them to.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class PanopticRoadError(Exception):
    """Root of every error raised on purpose by this package."""
    exit_code = EXIT_USAGE


class ConfigError(PanopticRoadError, ValueError):
    """Invalid configuration key or value, or an inconsistent build request."""
    exit_code = EXIT_USAGE


class ShapeError(PanopticRoadError, ValueError):
    """Tensor shape does not match what a block or stage expects."""
    exit_code = EXIT_USAGE


class DataError(PanopticRoadError, IOError):
    """Dataset files are missing, unreadable or degenerate."""
    exit_code = EXIT_DATA


class CorruptImageError(DataError):
    """An image file exists but cannot be decoded."""


class NumericalError(PanopticRoadError, ArithmeticError):
    """A loss or metric became non-finite."""
    exit_code = EXIT_NUMERICAL


def exit_code_for(error):
    """
    Returns the process exit code for an exception.

    Args:
        error (BaseException): The exception that ended a command.

    Returns:
        int: One of EXIT_USAGE, EXIT_DATA or EXIT_NUMERICAL.
    """
    if isinstance(error, PanopticRoadError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, IsADirectoryError)):
        return EXIT_DATA
    return EXIT_USAGE
