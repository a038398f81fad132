"""Exception hierarchy shared by every nonlocal_rothe module."""

from typing import Optional

import numpy as np


class NonlocalRotheError(Exception):
    """Base exception for solver, kernel, data and configuration failures."""


class ConfigError(NonlocalRotheError, ValueError):
    """A configuration value is malformed or violates a solver invariant."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        parts = []
        if key is not None:
            parts.append(key)
        if line is not None:
            parts.append(f"line {line}")
        location = f"[{', '.join(parts)}] " if parts else ""
        super().__init__(f"{location}{message}")
        self.key = key
        self.line = line


class ExponentError(ConfigError):
    """The singularity exponent p*s is too large for finite cell weights."""


class GridMismatchError(NonlocalRotheError, ValueError):
    """Two fields or a field and a kernel live on different grids."""


class KernelError(NonlocalRotheError, ValueError):
    """A kernel modulation is asymmetric or leaves its ellipticity bounds."""


class DataError(NonlocalRotheError, ValueError):
    """Input data cannot be mapped onto the grid or violates its sign contract."""

    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class StepConvergenceError(NonlocalRotheError):
    """The step optimizer ran out of iterations or line-search room."""

    def __init__(
        self,
        message: str,
        iterate: np.ndarray,
        gradient_norm: float,
        iterations: int,
    ):
        super().__init__(
            f"{message} (iterations={iterations}, |grad|_inf={gradient_norm:.3e})"
        )
        self.iterate = iterate
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SolveError(NonlocalRotheError):
    """A time step of a trajectory solve failed."""

    def __init__(self, step_index: int, cause: StepConvergenceError):
        super().__init__(f"step {step_index} failed: {cause}")
        self.step_index = step_index
        self.cause = cause


class LadderError(NonlocalRotheError):
    """A level of a truncation ladder failed to solve."""

    def __init__(self, level: float, cause: Exception):
        super().__init__(f"ladder level {level:g} failed: {cause}")
        self.level = level
        self.cause = cause
