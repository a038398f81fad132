"""
Truncated-data approximation ladder.

Level n solves the problem with data T_n(f), T_n(u0). For nonnegative data
the level solutions increase with n and form an L^1 Cauchy sequence whose
gaps are controlled by a_{n,m} = ||u0_n - u0_m||_1 + ||f_n - f_m||_{L^1}.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import thread_cap
from .core import GridFunction, SolverConfig, TimeGrid, Trajectory, l1_distance, truncate
from .errors import DataError, LadderError
from .operator import NonlocalOperator
from .stepper import SourceSpec, TabulatedSource, TruncatedSource, solve, source_slabs

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (1.0, 2.0, 4.0, 8.0, 16.0)
MONOTONE_TOL = 1e-9
CAUCHY_SLACK = 1e-7


def truncate_data(f: SourceSpec, u0: GridFunction, n: float) -> tuple[SourceSpec, GridFunction]:
    """(T_n(f), T_n(u0)); tabulated sources are truncated sample-wise."""
    if not n > 0:
        raise ValueError(f"truncation level must be positive, got {n}")
    f_n = f.truncated(n) if isinstance(f, TabulatedSource) else TruncatedSource(f, n)
    return f_n, u0.with_values(truncate(n, u0.values))


@dataclass(frozen=True, eq=False)
class LadderRun:
    levels: tuple
    trajectories: tuple
    base_data: tuple
    level_data: tuple
    slabs: tuple

    @property
    def time_grid(self) -> TimeGrid:
        return self.trajectories[0].time_grid


@dataclass(frozen=True)
class CauchyGap:
    a_nm: float
    bound: float
    observed: float

    @property
    def within_bound(self) -> bool:
        return self.observed <= self.bound + CAUCHY_SLACK


def _validate_levels(levels: Sequence[float]) -> tuple:
    levels = tuple(float(n) for n in levels)
    if not levels:
        raise ValueError("a ladder needs at least one level")
    if levels[0] <= 0 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"ladder levels must be positive and strictly increasing, got {levels}")
    return levels


def run_ladder(
    f: SourceSpec,
    u0: GridFunction,
    levels: Sequence[float],
    tg: TimeGrid,
    op: NonlocalOperator,
    cfg: SolverConfig,
    max_workers: Optional[int] = None,
) -> LadderRun:
    """
    Solve the truncated problem at every level on one grid and time grid.

    Levels are independent and run on a thread pool capped by
    NONLOCAL_ROTHE_THREADS unless max_workers is given.
    """
    levels = _validate_levels(levels)
    if np.any(u0.values < 0.0):
        raise DataError("ladder runs need a nonnegative initial datum")
    data = [truncate_data(f, u0, n) for n in levels]
    slabs = [source_slabs(f_n, tg, u0.grid, cfg.steklov_subsamples) for f_n, _ in data]
    if any(np.any(s < 0.0) for s in slabs):
        raise DataError("ladder runs need a nonnegative source")

    def run_level(index: int) -> Trajectory:
        n = levels[index]
        f_n, u0_n = data[index]
        logger.info(f"Ladder level {n:g}: solving")
        try:
            return solve(u0_n, f_n, tg, op, cfg)
        except Exception as e:
            raise LadderError(n, e) from e

    workers = max_workers or min(thread_cap(), len(levels))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(run_level, range(len(levels))))
    else:
        trajectories = [run_level(i) for i in range(len(levels))]

    run = LadderRun(
        levels=levels,
        trajectories=tuple(trajectories),
        base_data=(f, u0),
        level_data=tuple(data),
        slabs=tuple(slabs),
    )
    defect = monotone_defect(run)
    if defect > MONOTONE_TOL:
        logger.warning(f"Ladder monotone defect {defect:.3e} exceeds {MONOTONE_TOL:g}")
    return run


def cauchy_gap(run: LadderRun, i: int, j: int) -> CauchyGap:
    """a_{n,m}, the bound (2|Omega|)^(1/2) a^(1/2) + 2a, and the observed sup-in-time L^1 gap."""
    tg = run.time_grid
    grid = run.trajectories[i].grid
    u0_i, u0_j = run.level_data[i][1], run.level_data[j][1]
    a_nm = l1_distance(u0_i, u0_j) + float(
        tg.dt * grid.h * np.abs(run.slabs[i] - run.slabs[j]).sum()
    )
    bound = float(np.sqrt(2.0 * grid.domain.length * a_nm) + 2.0 * a_nm)
    diff = run.trajectories[i].as_array() - run.trajectories[j].as_array()
    observed = float(np.max(grid.h * np.abs(diff).sum(axis=1)))
    return CauchyGap(a_nm=a_nm, bound=bound, observed=observed)


def monotone_defect(run: LadderRun) -> float:
    """max over consecutive levels, steps and cells of (u_level_k - u_level_{k+1})_+."""
    defect = 0.0
    for lower, upper in zip(run.trajectories, run.trajectories[1:]):
        defect = max(defect, float(np.max(lower.as_array() - upper.as_array())))
    return max(defect, 0.0)


def ladder_report_rows(run: LadderRun) -> list[dict]:
    """One row per level with its gap, a_{n,m}, bound and monotone defect to the next level."""
    rows = []
    for i, level in enumerate(run.levels):
        row = {"level": level, "sup_l1_gap_to_next": None, "a_nm_to_next": None, "bound": None, "monotone_defect": None}
        if i + 1 < len(run.levels):
            gap = cauchy_gap(run, i, i + 1)
            lower, upper = run.trajectories[i], run.trajectories[i + 1]
            row.update(
                sup_l1_gap_to_next=gap.observed,
                a_nm_to_next=gap.a_nm,
                bound=gap.bound,
                monotone_defect=max(0.0, float(np.max(lower.as_array() - upper.as_array()))),
            )
        rows.append(row)
    return rows
