"""Exception hierarchy.

Each exception carries the CLI exit code and a short machine-readable tag
so the command-line layer can report failures uniformly.
"""


class VolaflowError(Exception):
    exit_code = 1
    tag = "ERROR"


class InputError(VolaflowError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2
    tag = "INPUT_ERROR"


class DivergenceError(VolaflowError, ArithmeticError):
    """A numerical procedure produced non-finite or exploding values."""

    exit_code = 3
    tag = "DIVERGENCE"


class DegenerateDataError(VolaflowError, ValueError):
    """Data that makes an estimator undefined (zero variance, collinearity)."""

    exit_code = 4
    tag = "DEGENERATE_DATA"


class SingularDesignError(DegenerateDataError):
    pass


class TransformRangeError(VolaflowError, ValueError):
    """A latent value lies outside the attainable range of a transform."""

    exit_code = 2
    tag = "RANGE_ERROR"
