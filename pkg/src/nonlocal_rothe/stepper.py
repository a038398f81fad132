"""
Implicit Euler (Rothe) time stepping by convex minimization.

Each step minimizes

    J(u) = 1/(2 dt) sum_i h (u_i - u_prev,i)^2 + 1/(2p) E(u) - sum_i h f_i u_i

where E is the discrete Gagliardo energy and f the Steklov average of the
source over the slab. J is strictly convex, so its unique minimizer is the
solution of (u - u_prev)/dt + A(u) = f.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .core import (
    DEFAULT_STEKLOV_SUBSAMPLES,
    Grid,
    GridFunction,
    NormMode,
    SolverConfig,
    TimeGrid,
    Trajectory,
    norm,
)
from .errors import DataError, GridMismatchError, SolveError, StepConvergenceError
from .operator import NonlocalOperator, as_matrix, flux, flux_resolution, gagliardo_energy, hessian

logger = logging.getLogger(__name__)

# Armijo line search
ARMIJO_C1 = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX_BACKTRACKS = 40

# Changes in J below this fraction of 1 + |J| are rounding.
ROUNDING_SLACK = 64.0 * np.finfo(np.float64).eps

# Relative gaps, in units of max|u|, below which cells count as coincident for p < 2.
TIE_RTOLS = (1e-14, 1e-12, 1e-10)

# Perturbation, in units in the last place, defining the resolution of the gradient.
RESOLUTION_ULPS = 8.0


# --- Sources ---


class SourceSpec(ABC):
    """A space-time source f(x, t) evaluated at cell midpoints."""

    nonneg_required: bool = False

    @abstractmethod
    def _values(self, x: np.ndarray, t: float) -> np.ndarray: ...

    def covers(self, t0: float, t1: float) -> bool:
        """Whether samples exist over [t0, t1]; analytic sources cover every window."""
        return True

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        values = np.broadcast_to(np.asarray(self._values(x, t), dtype=np.float64), np.shape(x))
        if self.nonneg_required and np.any(values < 0.0):
            raise DataError(f"source takes negative values at t = {t:g} but nonnegative data is required")
        return values


class AnalyticSource(SourceSpec):
    """Source given by a vectorized closure func(x, t)."""

    def __init__(
        self,
        func: Callable[[np.ndarray, float], np.ndarray],
        name: str = "analytic",
        nonneg_required: bool = False,
    ):
        self.func = func
        self.name = name
        self.nonneg_required = nonneg_required

    def _values(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.func(x, t)

    def __repr__(self) -> str:
        return f"AnalyticSource({self.name!r})"

    @classmethod
    def zero(cls) -> "AnalyticSource":
        return cls(lambda x, t: np.zeros_like(x), name="zero", nonneg_required=True)

    @classmethod
    def constant(cls, c: float) -> "AnalyticSource":
        return cls(lambda x, t: np.full_like(x, c), name=f"constant:{c:g}", nonneg_required=c >= 0)


class TabulatedSource(SourceSpec):
    """
    Source sampled on a tensor grid of positions and times.

    Values are interpolated linearly in time and taken from the nearest
    sample position in space.
    """

    def __init__(
        self,
        xs: np.ndarray,
        ts: np.ndarray,
        values: np.ndarray,
        nonneg_required: bool = False,
    ):
        xs = np.asarray(xs, dtype=np.float64)
        ts = np.asarray(ts, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (ts.size, xs.size):
            raise DataError(f"tabulated values have shape {values.shape}, expected {(ts.size, xs.size)}")
        if ts.size < 1 or np.any(np.diff(ts) <= 0) or np.any(np.diff(xs) <= 0):
            raise DataError("tabulated sample positions and times must be strictly increasing")
        if nonneg_required and np.any(values < 0.0):
            raise DataError("tabulated source has negative samples but nonnegative data is required")
        self.xs, self.ts, self.values = xs, ts, values
        self.nonneg_required = nonneg_required

    def covers(self, t0: float, t1: float) -> bool:
        slack = 1e-12 * max(1.0, abs(t1))
        return self.ts[0] <= t0 + slack and self.ts[-1] >= t1 - slack

    def _values(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        cols = np.abs(x[..., None] - self.xs).argmin(axis=-1)
        if self.ts.size == 1:
            return self.values[0, cols]
        j = int(np.clip(np.searchsorted(self.ts, t, side="right") - 1, 0, self.ts.size - 2))
        frac = (t - self.ts[j]) / (self.ts[j + 1] - self.ts[j])
        frac = min(max(frac, 0.0), 1.0)
        row = (1.0 - frac) * self.values[j] + frac * self.values[j + 1]
        return row[cols]

    def truncated(self, n: float) -> "TabulatedSource":
        return TabulatedSource(self.xs, self.ts, np.clip(self.values, -n, n), self.nonneg_required)


class TruncatedSource(SourceSpec):
    """T_n applied pointwise to every evaluation of another source."""

    def __init__(self, base: SourceSpec, n: float):
        if n <= 0:
            raise ValueError(f"truncation height must be positive, got {n}")
        self.base = base
        self.n = n
        self.nonneg_required = base.nonneg_required

    def covers(self, t0: float, t1: float) -> bool:
        return self.base.covers(t0, t1)

    def _values(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.clip(self.base.evaluate(x, t), -self.n, self.n)

    def __repr__(self) -> str:
        return f"TruncatedSource({self.base!r}, n={self.n:g})"


def steklov_average(
    f: SourceSpec,
    t: float,
    dt: float,
    grid: Grid,
    q: int = DEFAULT_STEKLOV_SUBSAMPLES,
    t_end: Optional[float] = None,
) -> GridFunction:
    """
    (1/dt) * integral of f(x_i, tau) over [t, t + dt], midpoint rule with q subsamples.

    When t_end is given, a window reaching past it is shifted back to [t_end - dt, t_end].
    """
    if q < 1:
        raise ValueError(f"Steklov subsample count must be at least 1, got {q}")
    if t < 0:
        raise ValueError(f"Steklov window start must be nonnegative, got {t}")
    if not dt > 0:
        raise ValueError(f"Steklov window length must be positive, got {dt}")
    if t_end is not None and t + dt > t_end:
        t = max(0.0, t_end - dt)
    if not f.covers(t, t + dt):
        raise DataError(f"insufficient temporal coverage: source has no samples over [{t:g}, {t + dt:g}]")
    offsets = (np.arange(q, dtype=np.float64) + 0.5) * (dt / q)
    total = np.zeros(grid.m, dtype=np.float64)
    for offset in offsets:
        total += f.evaluate(grid.centers, t + offset)
    return GridFunction(grid, total / q)


def source_slabs(f: SourceSpec, tg: TimeGrid, grid: Grid, q: int = DEFAULT_STEKLOV_SUBSAMPLES) -> np.ndarray:
    """All Steklov slabs of a run: row k-1 is the average over (t_{k-1}, t_k]."""
    times = tg.times
    return np.vstack(
        [steklov_average(f, times[k], tg.dt, grid, q, tg.t_end).values for k in range(tg.n_steps)]
    )


def l1_source_norm(slabs: np.ndarray, tg: TimeGrid, grid: Grid) -> float:
    """Discrete ||f||_{L^1(Omega x (0,T))} = sum_k dt sum_i h |slab_k,i|."""
    return float(tg.dt * grid.h * np.abs(slabs).sum())


# --- One step ---


@dataclass(frozen=True, eq=False)
class StepProblem:
    u_prev: GridFunction
    f_slab: GridFunction
    dt: float
    op: NonlocalOperator

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        self.u_prev.require_same_grid(self.f_slab)
        self.op.check(self.u_prev)


@dataclass
class StepStats:
    iterations: int = 0
    gradient_norm: float = 0.0
    fallbacks: int = 0
    ties: int = 0
    # nonzero when the step stopped at the double-precision resolution of the gradient
    resolution_floor: float = 0.0


def _objective(sp: StepProblem, x: np.ndarray) -> float:
    h = sp.u_prev.grid.h
    d = x - sp.u_prev.values
    energy = gagliardo_energy(sp.op.kw, sp.u_prev.with_values(x), sp.op.p)
    return float(h * np.dot(d, d) / (2.0 * sp.dt) + energy / (2.0 * sp.op.p) - h * np.dot(sp.f_slab.values, x))


def _gradient(sp: StepProblem, x: np.ndarray) -> np.ndarray:
    h = sp.u_prev.grid.h
    return (h / sp.dt) * (x - sp.u_prev.values) + flux(sp.op, x) - h * sp.f_slab.values


def objective(sp: StepProblem, u: GridFunction) -> float:
    """Discrete J(u)."""
    sp.op.check(u)
    return _objective(sp, u.values)


def gradient(sp: StepProblem, u: GridFunction) -> GridFunction:
    """(h/dt)(u - u_prev) + h A(u) - h f."""
    sp.op.check(u)
    return u.with_values(_gradient(sp, u.values))


def gradient_resolution(sp: StepProblem, u: GridFunction) -> float:
    """
    Sup norm of the change the gradient can undergo when u moves by
    RESOLUTION_ULPS units in the last place. Below this the gradient of J at
    u carries no information.
    """
    sp.op.check(u)
    r = RESOLUTION_ULPS * np.spacing(np.abs(u.values))
    spread = flux_resolution(sp.op, u.values, RESOLUTION_ULPS) + (sp.u_prev.grid.h / sp.dt) * r
    return float(np.max(spread))


def tie_coincident(x: np.ndarray, atol: float) -> Optional[np.ndarray]:
    """
    Give every run of values whose sorted neighbours lie within atol one
    common value, the run mean. None when no run has two members.
    """
    order = np.argsort(x, kind="stable")
    ordered = x[order]
    labels = np.concatenate([[0], np.cumsum(np.diff(ordered) > atol)])
    counts = np.bincount(labels)
    if counts.max() < 2:
        return None
    means = np.bincount(labels, weights=ordered) / counts
    tied = np.empty_like(x)
    tied[order] = means[labels]
    return tied


def _sup(g: np.ndarray) -> float:
    return float(np.max(np.abs(g)))


def _line_search(sp: StepProblem, x: np.ndarray, fx: float, g: np.ndarray, direction: np.ndarray):
    """Armijo backtracking; None once the decrease in J drops to rounding level."""
    slope = float(np.dot(g, direction))
    slack = ROUNDING_SLACK * (1.0 + abs(fx))
    step = 1.0
    for backtrack in range(ARMIJO_MAX_BACKTRACKS + 1):
        trial = x + step * direction
        ft = _objective(sp, trial)
        if ft <= fx + ARMIJO_C1 * step * slope:
            return (trial, ft) if fx - ft > slack else None
        logger.debug(f"Armijo backtrack {backtrack + 1}: step={step:.3e}, J={ft:.16e}")
        step *= ARMIJO_SHRINK
    return None


def _gradient_search(sp: StepProblem, x: np.ndarray, fx: float, gnorm: float, direction: np.ndarray):
    """Backtracking on the gradient sup norm, with J held within rounding of fx."""
    slack = ROUNDING_SLACK * (1.0 + abs(fx))
    step = 1.0
    for _ in range(ARMIJO_MAX_BACKTRACKS + 1):
        trial = x + step * direction
        ft = _objective(sp, trial)
        if ft <= fx + slack:
            gt = _gradient(sp, trial)
            if _sup(gt) < gnorm:
                return trial, ft, gt
        step *= ARMIJO_SHRINK
    return None


def _settle(sp: StepProblem, x: np.ndarray, fx: float, gnorm: float, direction: Optional[np.ndarray], stats: StepStats):
    """
    Move taken once J is flat to rounding: the candidate with the smallest
    gradient sup norm among a Newton point and, for p < 2, the iterate with
    coincident cells tied. None when neither lowers the gradient.
    """
    candidates = []
    if direction is not None:
        found = _gradient_search(sp, x, fx, gnorm, direction)
        if found is not None:
            candidates.append((found, False))
    if sp.op.p < 2.0:
        slack = ROUNDING_SLACK * (1.0 + abs(fx))
        scale = float(np.max(np.abs(x)))
        for rtol in TIE_RTOLS:
            tied = tie_coincident(x, rtol * scale)
            if tied is None:
                continue
            ft = _objective(sp, tied)
            gt = _gradient(sp, tied)
            if ft <= fx + slack and _sup(gt) < gnorm:
                candidates.append(((tied, ft, gt), True))
    if candidates:
        (trial, ft, gt), tied = min(candidates, key=lambda c: _sup(c[0][2]))
        if tied:
            stats.ties += 1
            logger.debug(f"Tied coincident cells: |grad|_inf {gnorm:.3e} -> {_sup(gt):.3e}")
        return trial, ft, gt
    return None


def _accept_at_resolution(sp: StepProblem, x: np.ndarray, gnorm: float, tol: float, stats: StepStats) -> bool:
    floor = gradient_resolution(sp, sp.u_prev.with_values(x))
    if gnorm > tol + floor:
        return False
    stats.resolution_floor = floor
    logger.debug(f"Step settled at the gradient resolution: |grad|_inf={gnorm:.3e}, floor={floor:.3e}")
    return True


def minimize_step(sp: StepProblem, cfg: SolverConfig) -> tuple[GridFunction, StepStats]:
    """
    Damped Newton with Armijo backtracking on J.

    Once J no longer resolves a decrease, moves are accepted on the sup norm
    of the gradient instead. For p < 2 the flux is not Lipschitz at
    coincident values, so cells equal to rounding are then tied exactly.
    When nothing lowers the gradient further the step is accepted if the
    gradient lies within newton_tol plus gradient_resolution, recorded in
    StepStats.resolution_floor; otherwise StepConvergenceError.
    """
    h = sp.u_prev.grid.h
    x = np.array(sp.u_prev.values)
    fx = _objective(sp, x)
    g = _gradient(sp, x)
    gnorm = _sup(g)
    tol = cfg.newton_tol * (1.0 + norm(sp.f_slab, NormMode.LINF))
    mass = (h / sp.dt) * np.eye(x.size)
    stats = StepStats()

    for iteration in range(cfg.newton_max_iters + 1):
        stats.iterations, stats.gradient_norm = iteration, gnorm
        logger.debug(f"Newton iteration {iteration}: J={fx:.16e}, |grad|_inf={gnorm:.3e}")
        if gnorm <= tol:
            return sp.u_prev.with_values(x), stats
        if iteration == cfg.newton_max_iters:
            break

        direction = None
        try:
            factor = linalg.cho_factor(mass + hessian(sp.op, sp.u_prev.with_values(x), sp.op.eps))
            direction = -linalg.cho_solve(factor, g)
            if not np.all(np.isfinite(direction)) or np.dot(g, direction) >= 0.0:
                direction = None
        except (linalg.LinAlgError, ValueError) as e:
            logger.warning(f"Hessian factorization failed ({e}); falling back to gradient descent")

        moved = _line_search(sp, x, fx, g, direction) if direction is not None else None
        if moved is not None:
            x, fx = moved
            g = _gradient(sp, x)
            gnorm = _sup(g)
            continue

        settled = _settle(sp, x, fx, gnorm, direction, stats)
        if settled is None:
            descent = -g / (h / sp.dt)
            moved = _line_search(sp, x, fx, g, descent)
            if moved is not None:
                settled = (*moved, _gradient(sp, moved[0]))
            else:
                settled = _gradient_search(sp, x, fx, gnorm, descent)
            if settled is not None:
                stats.fallbacks += 1
        if settled is None:
            if _accept_at_resolution(sp, x, gnorm, tol, stats):
                return sp.u_prev.with_values(x), stats
            raise StepConvergenceError("line search failed", x, gnorm, iteration)
        x, fx, g = settled
        gnorm = _sup(g)

    if _accept_at_resolution(sp, x, gnorm, tol, stats):
        return sp.u_prev.with_values(x), stats
    raise StepConvergenceError("iteration budget exhausted", x, stats.gradient_norm, stats.iterations)


def step_minimize(sp: StepProblem, cfg: SolverConfig) -> GridFunction:
    """Unique minimizer of J, with ||gradient||_inf <= newton_tol (1 + ||f_slab||_inf)."""
    return minimize_step(sp, cfg)[0]


def linear_step(sp: StepProblem) -> GridFunction:
    """Direct solve of (h/dt + h A) u = (h/dt) u_prev + h f for p = 2."""
    h = sp.u_prev.grid.h
    system = h * as_matrix(sp.op)
    system[np.diag_indices_from(system)] += h / sp.dt
    rhs = (h / sp.dt) * sp.u_prev.values + h * sp.f_slab.values
    return sp.u_prev.with_values(linalg.solve(system, rhs, assume_a="pos"))


# --- Trajectories ---


def solve(
    u0: GridFunction,
    f: SourceSpec,
    tg: TimeGrid,
    op: NonlocalOperator,
    cfg: SolverConfig,
) -> Trajectory:
    """
    Chain step_minimize over the time grid; states[k] solves slab k with
    the Steklov average of f over (t_{k-1}, t_k].
    """
    op.check(u0)
    grid = u0.grid
    slabs = source_slabs(f, tg, grid, cfg.steklov_subsamples)
    logger.info(f"Solving: m={grid.m}, n_steps={tg.n_steps}, dt={tg.dt:g}, p={op.p:g}")
    states = [u0]
    total_iterations = 0
    at_resolution = 0
    for k in range(1, tg.n_steps + 1):
        sp = StepProblem(states[-1], GridFunction(grid, slabs[k - 1]), tg.dt, op)
        try:
            u, stats = minimize_step(sp, cfg)
        except StepConvergenceError as e:
            logger.error(f"Step {k} failed: {e}")
            raise SolveError(k, e) from e
        total_iterations += stats.iterations
        at_resolution += stats.resolution_floor > 0.0
        if stats.fallbacks:
            logger.warning(f"Step {k}: {stats.fallbacks} gradient-descent fallback(s)")
        states.append(u)
    logger.info(
        f"Solve finished: {total_iterations} Newton iterations over {tg.n_steps} steps, "
        f"{at_resolution} stopped at the gradient resolution"
    )
    return Trajectory(tg, tuple(states))


@dataclass(frozen=True)
class AprioriReport:
    sup_l2: float
    time_integrated_energy: float


def apriori_energy_report(traj: Trajectory, op: NonlocalOperator) -> AprioriReport:
    """sup_k ||u_k||_2^2 and sum_{k>=1} dt E(u_k)."""
    sup_l2 = max(norm(state, NormMode.L2) ** 2 for state in traj.states)
    energy = sum(gagliardo_energy(op.kw, state, op.p) for state in traj.states[1:])
    return AprioriReport(sup_l2=float(sup_l2), time_integrated_energy=float(traj.time_grid.dt * energy))


def l1_contraction_gap(
    traj_u: Trajectory,
    traj_v: Trajectory,
    slabs_u: np.ndarray,
    slabs_v: np.ndarray,
) -> float:
    """
    max_k [ ||u_k - v_k||_1 - ||u_0 - v_0||_1 - sum_{j<=k} dt ||f_j - g_j||_1 ],
    nonpositive up to solver slack.
    """
    grid = traj_u.grid
    if traj_v.grid != grid:
        raise GridMismatchError("trajectories live on different grids")
    diff = traj_u.as_array() - traj_v.as_array()
    gaps = grid.h * np.abs(diff).sum(axis=1)
    source = np.concatenate(
        [[0.0], np.cumsum(traj_u.time_grid.dt * grid.h * np.abs(slabs_u - slabs_v).sum(axis=1))]
    )
    return float(np.max(gaps - gaps[0] - source))
