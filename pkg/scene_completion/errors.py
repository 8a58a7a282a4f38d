"""
Error Types
Every failure the pipeline reports, each with the process exit code the CLI uses for it
"""


class SceneCompletionError(Exception):
    """Base class of all pipeline errors"""

    exit_code = 1


# ======================================================= #
# Configuration / arguments (exit code 2)
# ======================================================= #
class ConfigError(SceneCompletionError):
    """Configuration file or override is invalid"""

    exit_code = 2

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class ArgumentError(SceneCompletionError, ValueError):
    """A function argument violates its precondition"""

    exit_code = 2


class UsageError(SceneCompletionError, RuntimeError):
    """An API was called in the wrong state (e.g. a consumed cache)"""


# ======================================================= #
# Data (exit code 3)
# ======================================================= #
class DataFormatError(SceneCompletionError):
    """File layout does not match the expected record format"""

    exit_code = 3


class DataError(SceneCompletionError):
    """File content is well formed but holds invalid values"""

    exit_code = 3


class GeometryError(SceneCompletionError):
    """Scene geometry makes the request impossible"""

    exit_code = 3


class GenerationError(SceneCompletionError):
    """Synthetic scene could not be generated with the requested density"""

    exit_code = 3


class OutOfDomainError(SceneCompletionError, ValueError):
    """Query position lies outside the latent grid footprint"""

    exit_code = 3


class ExtractionError(SceneCompletionError):
    """Not enough information to extract the requested artifact"""

    exit_code = 3


# ======================================================= #
# Numerics / internal (exit code 4 / 1)
# ======================================================= #
class NumericError(SceneCompletionError, FloatingPointError):
    """NaN or infinity appeared where finite values are required"""

    exit_code = 4


class InvariantViolation(SceneCompletionError, AssertionError):
    """Internal invariant broken (indicates a bug, not bad input)"""
