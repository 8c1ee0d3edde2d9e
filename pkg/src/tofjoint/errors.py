"""Exception types shared across the toolchain.

The CLI maps these onto exit codes: ContractViolation -> 1, OSError -> 2,
NumericalFailure -> 3.
"""


class ContractViolation(ValueError):
    """An input broke a documented precondition (bad shape, empty cloud, ...)."""


class NumericalFailure(ArithmeticError):
    """A computation has no defined result for otherwise well-formed inputs."""


class EmptyOverlapError(NumericalFailure):
    """Two rasters share no mutually valid pixel, so a loss or metric is undefined."""
