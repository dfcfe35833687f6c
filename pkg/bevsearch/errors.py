"""
Error types for the bevsearch engine
Each error carries the process exit code the CLI reports for it
"""


class BevSearchError(Exception):
    """Base class for every error raised by bevsearch"""

    exit_code = 1


class UsageError(BevSearchError, ValueError):
    """Bad arguments, bad config values or a violated call contract"""

    exit_code = 1


class DataError(BevSearchError, ValueError):
    """Malformed input files, unknown ids, shape disagreement, non-finite inputs"""

    exit_code = 2


class ShapeError(DataError):
    """Dimension mismatch between operands"""


class NumericalError(BevSearchError, ArithmeticError):
    """Non-finite loss or gradient, or a zero-norm vector where a cosine is needed"""

    exit_code = 3
