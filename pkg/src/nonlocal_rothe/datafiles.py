"""
CSV ingestion and export plus the analytic data registry.

Every CSV written here uses 17 significant digits, '.' as decimal
separator and '\\n' line endings, so identical runs give identical bytes.
Ingested samples are mapped to cells by nearest sample to the cell midpoint.
"""

import csv
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Grid, GridFunction, TimeGrid, Trajectory
from .errors import ConfigError, DataError
from .kernel import KappaFunction, KernelWeights
from .stepper import AnalyticSource, SourceSpec, TabulatedSource

logger = logging.getLogger(__name__)

# Tolerance, relative to t_end, for matching trajectory time nodes.
TIME_NODE_ATOL = 1e-12


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def write_rows(path: Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.debug(f"Wrote {path}")
    return path


def write_dict_rows(path: Path, columns: Sequence[str], records: Sequence[dict]) -> Path:
    """Write records in column order; None becomes an empty field, floats get 17 digits."""

    def cell(value) -> str:
        if value is None:
            return ""
        if isinstance(value, (float, np.floating)):
            return format_float(value)
        return str(value)

    return write_rows(path, columns, ([cell(r[c]) for c in columns] for r in records))


def _read_numeric(path: Path, columns: Sequence[str]) -> list[tuple[int, list[float]]]:
    """(file line number, values) per data row; header must name the expected columns."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != list(columns):
            raise DataError(f"{path}: expected header {','.join(columns)}, got {header}", row=1)
        rows = []
        for line, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(columns):
                raise DataError(f"malformed row: expected {len(columns)} fields, got {len(fields)}", row=line)
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise DataError(f"malformed row: non-numeric field in {fields}", row=line)
            if not all(np.isfinite(values)):
                raise DataError(f"malformed row: non-finite value in {fields}", row=line)
            rows.append((line, values))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def _check_sign(rows: list[tuple[int, list[float]]], nonneg: bool) -> None:
    if not nonneg:
        return
    for line, values in rows:
        if values[-1] < 0.0:
            raise DataError(f"negative value {values[-1]:g} but nonnegative data is required", row=line)


def _cell_samples(grid: Grid, xs: np.ndarray) -> np.ndarray:
    """Index of the sample nearest to each cell midpoint, among samples inside the cell."""
    cells = np.clip(np.searchsorted(grid.edges, xs, side="right") - 1, 0, grid.m - 1)
    inside = (xs >= grid.domain.a) & (xs <= grid.domain.b)
    picks = np.full(grid.m, -1)
    best = np.full(grid.m, np.inf)
    for index in np.flatnonzero(inside):
        cell = cells[index]
        distance = abs(xs[index] - grid.centers[cell])
        if distance < best[cell]:
            best[cell], picks[cell] = distance, index
    missing = np.flatnonzero(picks < 0)
    if missing.size:
        raise DataError(
            f"missing cell: no sample inside cell {missing[0]} "
            f"[{grid.edges[missing[0]]:g}, {grid.edges[missing[0] + 1]:g}] ({missing.size} cells uncovered)"
        )
    return picks


def ingest_field(path: Path, grid: Grid, nonneg: bool = False) -> GridFunction:
    """Read an (x, value) CSV onto the grid."""
    rows = _read_numeric(path, ("x", "value"))
    _check_sign(rows, nonneg)
    table = np.array([values for _, values in rows])
    picks = _cell_samples(grid, table[:, 0])
    logger.info(f"Ingested field from {path}: {len(rows)} samples onto {grid.m} cells")
    return GridFunction(grid, table[picks, 1])


def ingest_source(
    path: Path,
    grid: Grid,
    time_grid: TimeGrid,
    nonneg: bool = False,
) -> TabulatedSource:
    """Read an (x, t, value) CSV sampled on a full tensor grid of positions and times."""
    rows = _read_numeric(path, ("x", "t", "value"))
    _check_sign(rows, nonneg)
    table = np.array([values for _, values in rows])
    xs, ts = np.unique(table[:, 0]), np.unique(table[:, 1])
    values = np.full((ts.size, xs.size), np.nan)
    values[np.searchsorted(ts, table[:, 1]), np.searchsorted(xs, table[:, 0])] = table[:, 2]
    if np.any(np.isnan(values)):
        t_idx, x_idx = np.argwhere(np.isnan(values))[0]
        raise DataError(f"missing sample at x = {xs[x_idx]:g}, t = {ts[t_idx]:g}")
    _cell_samples(grid, xs)
    source = TabulatedSource(xs, ts, values, nonneg_required=nonneg)
    if ts.size - 1 < time_grid.n_steps or not source.covers(0.0, time_grid.t_end):
        raise DataError(
            f"insufficient temporal coverage: {ts.size} sample times over "
            f"[{ts[0]:g}, {ts[-1]:g}] for {time_grid.n_steps} steps up to t = {time_grid.t_end:g}"
        )
    logger.info(f"Ingested source from {path}: {xs.size} positions x {ts.size} times")
    return source


def write_trajectory(traj: Trajectory, path: Path) -> Path:
    centers = traj.grid.centers
    rows = (
        [format_float(t), format_float(x), format_float(u)]
        for t, state in zip(traj.times, traj.states)
        for x, u in zip(centers, state.values)
    )
    return write_rows(path, ["t", "x", "u"], rows)


def load_trajectory(path: Path, grid: Grid, time_grid: Optional[TimeGrid] = None) -> Trajectory:
    """
    Read a (t, x, u) trajectory written by write_trajectory back onto grid.

    The time grid is rebuilt from the file unless given; either way the
    file's time nodes must be those of the time grid.
    """
    rows = _read_numeric(path, ("t", "x", "u"))
    table = np.array([values for _, values in rows])
    times = np.unique(table[:, 0])
    if table.shape[0] != times.size * grid.m:
        raise DataError(f"{path}: {table.shape[0]} rows do not fill {times.size} times x {grid.m} cells")
    if time_grid is None:
        if times.size < 2:
            raise DataError(f"{path}: a trajectory needs at least two time nodes")
        time_grid = TimeGrid(float(times[-1]), times.size - 1)
    elif times.size != time_grid.n_steps + 1:
        raise DataError(f"{path}: {times.size} time nodes, expected {time_grid.n_steps + 1}")
    expected = time_grid.times
    if not np.allclose(times, expected, rtol=0.0, atol=TIME_NODE_ATOL * time_grid.t_end):
        worst = int(np.argmax(np.abs(times - expected)))
        raise DataError(
            f"{path}: time node {worst} is t={format_float(times[worst])}, expected {format_float(expected[worst])}"
        )
    states = []
    for k, t in enumerate(times):
        block = table[table[:, 0] == t]
        block = block[np.argsort(block[:, 1])]
        if not np.allclose(block[:, 1], grid.centers, rtol=0.0, atol=1e-9 * grid.domain.length):
            raise DataError(f"{path}: positions at time node {k} are not the cell centers of {grid}")
        states.append(GridFunction(grid, block[:, 2]))
    return Trajectory(time_grid, tuple(states))


def write_weight_profile(kw: KernelWeights, path: Path) -> Path:
    profile = kw.profile()
    rows = ([str(d), format_float(w)] for d, w in enumerate(profile, start=1))
    return write_rows(path, ["d", "weight"], rows)


# --- Analytic data registry ---


def _split(spec: str, key: str) -> tuple[str, list[float]]:
    name, _, arg_text = spec.strip().partition(":")
    args = []
    if arg_text:
        try:
            args = [float(a) for a in arg_text.split(",")]
        except ValueError:
            raise ConfigError(f"non-numeric argument in data spec '{spec}'", key=key)
    return name.strip().lower(), args


def _arity(name: str, args: list[float], allowed: Sequence[int], key: str) -> None:
    if len(args) not in allowed:
        raise ConfigError(f"'{name}' takes {' or '.join(map(str, allowed))} argument(s), got {len(args)}", key=key)


def _profile(spec: str, grid: Grid, key: str) -> Callable[[np.ndarray, float], np.ndarray]:
    """Pointwise f(x, t) for a registry spec."""
    name, args = _split(spec, key)
    a = grid.domain.a
    if name == "zero":
        _arity(name, args, (0,), key)
        return lambda x, t: np.zeros_like(x)
    if name == "constant":
        _arity(name, args, (1,), key)
        c = args[0]
        return lambda x, t: np.full_like(x, c)
    if name == "power":
        _arity(name, args, (1, 2), key)
        beta, c = args[0], (args[1] if len(args) == 2 else 1.0)
        if not 0.0 < beta < 1.0:
            raise ConfigError(f"power exponent must lie in (0,1) for integrability, got {beta}", key=key)
        return lambda x, t: c * (x - a) ** (-beta)
    if name == "gaussian":
        _arity(name, args, (3,), key)
        amp, center, width = args
        if not width > 0:
            raise ConfigError(f"gaussian width must be positive, got {width}", key=key)
        return lambda x, t: amp * np.exp(-0.5 * ((x - center) / width) ** 2)
    if name == "ramp":
        _arity(name, args, (1,), key)
        c = args[0]
        return lambda x, t: np.full_like(x, c * t)
    raise ConfigError(f"unknown data profile '{name}'", key=key)


def _is_file(spec: str) -> bool:
    return spec.strip().lower().endswith(".csv")


def resolve_field(spec: str, grid: Grid, nonneg: bool = False, key: str = "u0") -> GridFunction:
    """GridFunction from a registry spec or a CSV path, sampled at cell midpoints."""
    if _is_file(spec):
        return ingest_field(Path(spec), grid, nonneg)
    if _split(spec, key)[0] == "ramp":
        raise ConfigError("'ramp' is time dependent and only valid as a source", key=key)
    field = GridFunction.sample(grid, lambda x: _profile(spec, grid, key)(x, 0.0))
    if nonneg and np.any(field.values < 0.0):
        raise DataError(f"{key} = '{spec}' takes negative values but nonnegative data is required")
    return field


def resolve_source(
    spec: str,
    grid: Grid,
    time_grid: TimeGrid,
    nonneg: bool = False,
    key: str = "f",
) -> SourceSpec:
    if _is_file(spec):
        return ingest_source(Path(spec), grid, time_grid, nonneg)
    return AnalyticSource(_profile(spec, grid, key), name=spec.strip(), nonneg_required=nonneg)


def resolve_kappa(spec: str, key: str = "kappa") -> Optional[KappaFunction]:
    """
    Kernel modulation: none, constant:c, cosine:amp (1 + amp cos(x - y)) or
    product:amp (1 + amp sin(pi x) sin(pi y)).
    """
    name, args = _split(spec, key)
    if name == "none":
        _arity(name, args, (0,), key)
        return None
    if name == "constant":
        _arity(name, args, (1,), key)
        c = args[0]
        return lambda x, y: np.full(np.broadcast(x, y).shape, c)
    if name in ("cosine", "product"):
        _arity(name, args, (1,), key)
        amp = args[0]
        if not 0.0 <= amp < 1.0:
            raise ConfigError(f"{name} amplitude must lie in [0,1), got {amp}", key=key)
        if name == "cosine":
            return lambda x, y: 1.0 + amp * np.cos(x - y)
        return lambda x, y: 1.0 + amp * np.sin(np.pi * x) * np.sin(np.pi * y)
    raise ConfigError(f"unknown kernel modulation '{name}'", key=key)
