"""
Grid, time and field representations plus the truncation calculus.

Fields are cell averages on a uniform partition of a bounded interval and
are implicitly zero on the complement of the interval. Every value type
here is immutable after construction.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ExponentError, GridMismatchError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DEFAULT_NEWTON_TOL = 1e-10
DEFAULT_NEWTON_MAX_ITERS = 100
DEFAULT_REGULARIZATION_EPS = 1e-12
DEFAULT_STEKLOV_SUBSAMPLES = 8


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class Domain:
    """The open interval (a, b)."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or self.a >= self.b:
            raise ValueError(f"Domain requires finite a < b, got ({self.a}, {self.b})")

    @property
    def length(self) -> float:
        return self.b - self.a

    def contains(self, x: float) -> bool:
        return self.a < x < self.b


@dataclass(frozen=True)
class Grid:
    """Uniform partition of a Domain into m cells."""

    domain: Domain
    m: int
    h: float = field(init=False, compare=False)
    centers: np.ndarray = field(init=False, compare=False, repr=False)
    edges: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"Grid needs a positive integer cell count, got {self.m}")
        h = self.domain.length / self.m
        edges = self.domain.a + h * np.arange(self.m + 1, dtype=np.float64)
        edges[-1] = self.domain.b
        centers = self.domain.a + (np.arange(self.m, dtype=np.float64) + 0.5) * h
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "centers", _frozen(centers))

    @classmethod
    def uniform(cls, a: float, b: float, m: int) -> "Grid":
        return cls(Domain(a, b), m)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time partition of (0, t_end] into n_steps slabs."""

    t_end: float
    n_steps: int
    dt: float = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if not self.t_end > 0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "dt", self.t_end / self.n_steps)

    @property
    def times(self) -> np.ndarray:
        """Slab endpoints t_0 = 0, ..., t_n = t_end."""
        times = self.dt * np.arange(self.n_steps + 1, dtype=np.float64)
        times[-1] = self.t_end
        return times


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Cell-averaged field on a Grid; the exterior value is zero by construction."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.grid.m,):
            raise ValueError(
                f"GridFunction needs {self.grid.m} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("GridFunction values must be finite")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: Grid) -> "GridFunction":
        return cls(grid, np.zeros(grid.m))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.m, float(c)))

    @classmethod
    def sample(cls, grid: Grid, func: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        """Cell-midpoint sampling of a pointwise function."""
        return cls(grid, np.broadcast_to(func(grid.centers), (grid.m,)))

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values)

    def require_same_grid(self, other: "GridFunction") -> None:
        if self.grid != other.grid:
            raise GridMismatchError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __len__(self) -> int:
        return self.grid.m


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at t_0, ..., t_n of a time grid; states[0] is the initial datum."""

    time_grid: TimeGrid
    states: tuple

    def __post_init__(self) -> None:
        states = tuple(self.states)
        if len(states) != self.time_grid.n_steps + 1:
            raise ValueError(
                f"Trajectory needs {self.time_grid.n_steps + 1} states, got {len(states)}"
            )
        grid = states[0].grid
        for k, state in enumerate(states):
            if state.grid != grid:
                raise GridMismatchError(f"state {k} lives on a different grid")
        object.__setattr__(self, "states", states)

    @property
    def grid(self) -> Grid:
        return self.states[0].grid

    @property
    def times(self) -> np.ndarray:
        return self.time_grid.times

    def as_array(self) -> np.ndarray:
        """States stacked into an (n_steps + 1, m) array."""
        return np.vstack([state.values for state in self.states])

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.as_array())))


@dataclass(frozen=True)
class SolverConfig:
    """Exponents and optimizer settings shared by kernel assembly and the stepper."""

    s: float
    p: float
    strict_exponent_check: bool = True
    newton_tol: float = DEFAULT_NEWTON_TOL
    newton_max_iters: int = DEFAULT_NEWTON_MAX_ITERS
    regularization_eps: float = DEFAULT_REGULARIZATION_EPS
    steklov_subsamples: int = DEFAULT_STEKLOV_SUBSAMPLES

    def __post_init__(self) -> None:
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0,1), got {self.s}")
        if not self.p > 1.0:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if not self.newton_tol > 0.0:
            raise ValueError(f"newton_tol must be positive, got {self.newton_tol}")
        if self.newton_max_iters < 1:
            raise ValueError(f"newton_max_iters must be positive, got {self.newton_max_iters}")
        if self.regularization_eps < 0.0:
            raise ValueError(
                f"regularization_eps must be nonnegative, got {self.regularization_eps}"
            )
        if self.steklov_subsamples < 1:
            raise ValueError(
                f"steklov_subsamples must be at least 1, got {self.steklov_subsamples}"
            )
        if self.alpha >= 1.0:
            message = (
                f"p*s = {self.alpha:g} >= 1: weights diverge, requires ps < N (N = 1)"
            )
            if self.strict_exponent_check:
                raise ExponentError(message)
            logger.warning(f"{message}; kernel assembly will refuse this configuration")

    @property
    def alpha(self) -> float:
        """Singularity exponent p*s of the kernel |x-y|^-(1+ps)."""
        return self.p * self.s


# --- Truncation calculus ---


def _check_height(k: float, name: str = "k") -> None:
    if k < 0:
        raise ValueError(f"truncation height {name} must be nonnegative, got {k}")


def truncate(k: float, r: ArrayLike) -> ArrayLike:
    """T_k(r) = min{k, max{r, -k}}."""
    _check_height(k)
    return np.minimum(k, np.maximum(r, -k))


def theta(k: float, r: ArrayLike) -> ArrayLike:
    """Primitive of T_k: r^2/2 on [-k, k], k|r| - k^2/2 beyond."""
    _check_height(k)
    a = np.abs(r)
    return np.where(a <= k, 0.5 * a * a, k * a - 0.5 * k * k)


def g_tail(k: float, r: ArrayLike) -> ArrayLike:
    """G_k(r) = r - T_k(r)."""
    return r - truncate(k, r)


def s_sigma(sigma: float, r: ArrayLike) -> ArrayLike:
    """Odd C^1 saturation: identity on |r| < sigma, constant sigma + 1/2 beyond sigma + 1."""
    _check_height(sigma, "sigma")
    a = np.abs(r)
    sign = np.sign(r)
    knee = (sigma + 0.5) - 0.5 * (a - (sigma + 1.0)) ** 2
    magnitude = np.where(a < sigma, a, np.where(a <= sigma + 1.0, knee, sigma + 0.5))
    return sign * magnitude


def s_sigma_prime(sigma: float, r: ArrayLike) -> ArrayLike:
    """Derivative of s_sigma, supported in [-sigma-1, sigma+1]."""
    _check_height(sigma, "sigma")
    a = np.abs(r)
    return np.where(a < sigma, 1.0, np.where(a <= sigma + 1.0, sigma + 1.0 - a, 0.0))


# --- Norms ---


class NormMode(Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"
    LP = "lp"


def norm(u: GridFunction, mode: Union[NormMode, str] = NormMode.L2, p: Optional[float] = None) -> float:
    """
    Discrete L^q norms with cell-average quadrature sum_i h |u_i|^q.

    Args:
        u: field to measure
        mode: one of l1, l2, linf, lp
        p: exponent for mode lp

    Returns:
        Nonnegative norm value
    """
    mode = NormMode(mode)
    values = np.abs(u.values)
    h = u.grid.h
    if mode is NormMode.L1:
        return float(h * values.sum())
    if mode is NormMode.L2:
        return float(np.sqrt(h * np.dot(values, values)))
    if mode is NormMode.LINF:
        return float(values.max(initial=0.0))
    if p is None or p < 1:
        raise ValueError(f"mode lp requires an exponent p >= 1, got {p}")
    return float((h * np.sum(values**p)) ** (1.0 / p))


def l1_distance(u: GridFunction, v: GridFunction) -> float:
    u.require_same_grid(v)
    return float(u.grid.h * np.abs(u.values - v.values).sum())


def as_values(fields: Sequence[GridFunction]) -> np.ndarray:
    return np.vstack([f.values for f in fields])
