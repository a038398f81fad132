"""
Experiment configuration: flat key = value files, JSON objects and flag overrides.
"""

import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from .core import Grid, SolverConfig, TimeGrid
from .errors import ConfigError, ExponentError

logger = logging.getLogger(__name__)

THREADS_ENV = "NONLOCAL_ROTHE_THREADS"

# --- Type Aliases ---
ConfigDict = Dict[str, Any]


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "yes", "on", "1"):
        return True
    if text in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{value}'")


def _parse_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got '{value}'")
    number = float(value)
    if not number.is_integer():
        raise ValueError(f"expected an integer, got '{value}'")
    return int(number)


def _parse_list(item: Callable[[Any], Any]) -> Callable[[Any], tuple]:
    def parse(value: Any) -> tuple:
        parts = value if isinstance(value, (list, tuple)) else str(value).split(",")
        parsed = tuple(item(part) for part in parts if str(part).strip())
        if not parsed:
            raise ValueError("expected a non-empty comma-separated list")
        return parsed

    return parse


def _optional(inner: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def parse(value: Any) -> Any:
        if value is None or str(value).strip().lower() in ("", "none"):
            return None
        return inner(value)

    return parse


def _parse_str(value: Any) -> str:
    text = str(value).strip()
    if not text:
        raise ValueError("expected a non-empty string")
    return text


PARSERS: Dict[str, Callable[[Any], Any]] = {
    "a": float,
    "b": float,
    "m": _parse_int,
    "t_end": float,
    "n_steps": _parse_int,
    "s": float,
    "p": float,
    "levels": _parse_list(float),
    "u0": _parse_str,
    "f": _parse_str,
    "kappa": _parse_str,
    "kernel_lambda": float,
    "bandwidth": _optional(_parse_int),
    "output_dir": _parse_str,
    "newton_tol": float,
    "newton_max_iters": _parse_int,
    "regularization_eps": float,
    "steklov_subsamples": _parse_int,
    "strict_exponent_check": _parse_bool,
    "nonneg": _parse_bool,
    "entropy_slack": float,
    "test_heights": _parse_list(float),
    "trajectory": _optional(_parse_str),
    "bench_sizes": _parse_list(_parse_int),
    "bench_repeats": _parse_int,
}

DEFAULTS: ConfigDict = {
    "a": 0.0,
    "b": 1.0,
    "m": 64,
    "t_end": 1.0,
    "n_steps": 32,
    "s": 0.4,
    "p": 2.0,
    "levels": (1.0, 2.0, 4.0, 8.0, 16.0),
    "u0": "zero",
    "f": "zero",
    "kappa": "none",
    "kernel_lambda": 1.0,
    "bandwidth": None,
    "output_dir": "results",
    "newton_tol": 1e-10,
    "newton_max_iters": 100,
    "regularization_eps": 1e-12,
    "steklov_subsamples": 8,
    "strict_exponent_check": True,
    "nonneg": False,
    "entropy_slack": 0.0,
    "test_heights": (0.5, 1.0, 2.0),
    "trajectory": None,
    "bench_sizes": (64, 128, 256),
    "bench_repeats": 3,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One validated experiment; field names are the configuration keys."""

    a: float
    b: float
    m: int
    t_end: float
    n_steps: int
    s: float
    p: float
    levels: tuple
    u0: str
    f: str
    kappa: str
    kernel_lambda: float
    bandwidth: Optional[int]
    output_dir: str
    newton_tol: float
    newton_max_iters: int
    regularization_eps: float
    steklov_subsamples: int
    strict_exponent_check: bool
    nonneg: bool
    entropy_slack: float
    test_heights: tuple
    trajectory: Optional[str]
    bench_sizes: tuple
    bench_repeats: int

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            s=self.s,
            p=self.p,
            strict_exponent_check=self.strict_exponent_check,
            newton_tol=self.newton_tol,
            newton_max_iters=self.newton_max_iters,
            regularization_eps=self.regularization_eps,
            steklov_subsamples=self.steklov_subsamples,
        )

    def grid(self) -> Grid:
        return Grid.uniform(self.a, self.b, self.m)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.t_end, self.n_steps)

    def output_path(self, name: str) -> Path:
        return Path(self.output_dir) / name

    def replace(self, **changes: Any) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return _validated(values, {})


def _read_key_value(path: Path) -> tuple[ConfigDict, Dict[str, int]]:
    values: ConfigDict = {}
    lines: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"expected 'key = value', got '{raw.strip()}'", key=key or None, line=number)
            if key in values:
                raise ConfigError("duplicate key", key=key, line=number)
            values[key] = value.strip()
            lines[key] = number
    return values, lines


def _read_json(path: Path) -> ConfigDict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", line=e.lineno)
    if not isinstance(values, dict):
        raise ConfigError("a JSON config must be a flat object")
    return values


def _validated(raw: ConfigDict, lines: Dict[str, int]) -> ExperimentConfig:
    parsed = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in PARSERS:
            raise ConfigError("unknown configuration key", key=key, line=lines.get(key))
        try:
            parsed[key] = PARSERS[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"malformed value '{value}': {e}", key=key, line=lines.get(key))
    config = ExperimentConfig(**parsed)

    # Re-validate the value invariants the solver types enforce.
    try:
        config.solver_config()
    except ExponentError as e:
        raise ExponentError(str(e), key="s", line=lines.get("s")) from e
    except ValueError as e:
        key = str(e).split()[0]
        raise ConfigError(str(e), key=key, line=lines.get(key)) from e
    for key in ("m", "n_steps"):
        if getattr(config, key) < 1:
            raise ConfigError(f"must be a positive integer, got {getattr(config, key)}", key=key, line=lines.get(key))
    for key, build in (("a", config.grid), ("t_end", config.time_grid)):
        try:
            build()
        except ValueError as e:
            raise ConfigError(str(e), key=key, line=lines.get(key)) from e
    if config.kernel_lambda < 1.0:
        raise ConfigError(f"must be >= 1, got {config.kernel_lambda}", key="kernel_lambda", line=lines.get("kernel_lambda"))
    if config.bandwidth is not None and config.bandwidth < 1:
        raise ConfigError(f"must be positive, got {config.bandwidth}", key="bandwidth", line=lines.get("bandwidth"))
    if config.bench_repeats < 1 or any(size < 1 for size in config.bench_sizes):
        raise ConfigError("bench sizes and repeats must be positive", key="bench_repeats", line=lines.get("bench_repeats"))
    levels = config.levels
    if levels[0] <= 0 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"levels must be positive and strictly increasing, got {levels}", key="levels", line=lines.get("levels"))
    if any(k <= 0 for k in config.test_heights):
        raise ConfigError("test heights must be positive", key="test_heights", line=lines.get("test_heights"))
    if config.entropy_slack < 0:
        raise ConfigError("must be nonnegative", key="entropy_slack", line=lines.get("entropy_slack"))
    return config


def parse_config(path: Optional[Path] = None, overrides: Optional[ConfigDict] = None) -> ExperimentConfig:
    """
    Build a validated ExperimentConfig.

    Args:
        path: key = value text file ('#' starts a comment), or a flat JSON
            object when the name ends in .json; None uses the defaults
        overrides: values from command-line flags, applied over the file

    Returns:
        ExperimentConfig with every missing key taken from DEFAULTS

    Raises:
        ConfigError: naming the offending key and, for files, its line
    """
    raw: ConfigDict = {}
    lines: Dict[str, int] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix.lower() == ".json":
            raw = _read_json(path)
        else:
            raw, lines = _read_key_value(path)
        logger.info(f"Loaded config from {path} ({len(raw)} keys)")
    for key, value in (overrides or {}).items():
        raw[key] = value
        lines.pop(key, None)
    return _validated(raw, lines)


def thread_cap() -> int:
    """Worker cap from NONLOCAL_ROTHE_THREADS, defaulting to the CPU count."""
    default = os.cpu_count() or 1
    value = os.environ.get(THREADS_ENV, "")
    if not value:
        return default
    try:
        cap = int(value)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={value!r}: not an integer")
        return default
    if cap < 1:
        logger.warning(f"Ignoring {THREADS_ENV}={cap}: must be positive")
        return default
    return cap
