"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError (and subclasses) -> 4.
"""

from __future__ import annotations


class TweedieSbmError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TweedieSbmError):
    """Invalid run configuration (unknown keys, out-of-range settings)."""


class DataError(TweedieSbmError):
    """Input data that cannot be used (parse failures, shape or sign violations)."""


class NumericalError(TweedieSbmError):
    """Numerical failure during evaluation or optimization."""


class UndefinedBlockError(NumericalError):
    """A community block contains no node pairs, so its intercept is undefined."""

    def __init__(self, block: tuple[int, int]):
        self.block = block
        super().__init__(
            f"block ({block[0]}, {block[1]}) has no pair mass; its intercept is undefined"
        )


class AllZeroBlockError(NumericalError):
    """Every response in a community block is zero, driving its intercept to -inf."""

    def __init__(self, block: tuple[int, int]):
        self.block = block
        super().__init__(
            f"block ({block[0]}, {block[1]}) has pairs but all-zero responses; "
            f"its intercept diverges to -inf"
        )


class OptimizerError(NumericalError):
    """Quasi-Newton ascent failed to converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate, grad_norm: float):
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm
        super().__init__(f"{message} (gradient inf-norm {grad_norm:.3e})")


class FitError(NumericalError):
    """A fit could not be completed (all restarts failed, or a grid point aborted)."""
