"""
Computable residuals for the solution concepts of the nonlocal problem.

Every check is a read-only pass over a Trajectory. Time integrals follow the
implicit scheme: slab k (t_{k-1}, t_k] carries states[k], test functions are
sampled at the slab's left endpoint and the slab integral of d/dt phi is
taken by Gauss-Legendre quadrature of the analytic time derivative.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss

from .core import (
    DEFAULT_STEKLOV_SUBSAMPLES,
    Domain,
    GridFunction,
    NormMode,
    Trajectory,
    norm,
    s_sigma,
    s_sigma_prime,
    theta,
    truncate,
)
from .datafiles import format_float, write_rows
from .errors import GridMismatchError
from .kernel import KernelWeights, poincare_ratio
from .operator import NonlocalOperator, gagliardo_energy, pairing
from .stepper import SourceSpec, l1_source_norm, source_slabs

logger = logging.getLogger(__name__)

TRUNCATION_SLACK = 0.05
ENTROPY_BASE_TOL = 1e-8
COMPARISON_TOL = 1e-10
RESIDUAL_BOUND = 1e-6
DEFAULT_TEST_HEIGHTS = (0.5, 1.0, 2.0)
DEFAULT_TAIL_HEIGHTS = (1.0, 2.0, 4.0, 8.0, 16.0)

_GAUSS_NODES, _GAUSS_WEIGHTS = leggauss(8)


# --- Test functions ---


def _normalized_bump(domain: Domain, q: Polynomial) -> Polynomial:
    """(x-a)^2 (b-x)^2 q(x), scaled to sup norm 1 on [a, b]."""
    poly = Polynomial.fromroots([domain.a, domain.a, domain.b, domain.b]) * q
    critical = poly.deriv().roots()
    critical = critical[np.isreal(critical)].real
    critical = critical[(critical >= domain.a) & (critical <= domain.b)]
    candidates = np.concatenate([[domain.a, domain.b], critical])
    return poly / float(np.max(np.abs(poly(candidates))))


@dataclass(frozen=True, eq=False)
class TestFunction:
    """phi(x, t) = psi(x) theta(t), with psi and psi' vanishing at both endpoints."""

    __test__ = False

    name: str
    space_part: Polynomial
    time_part: Callable[[float], float]
    time_derivative: Callable[[float], float]
    vanishes_at_T: bool

    def space(self, x: np.ndarray) -> np.ndarray:
        return self.space_part(np.asarray(x, dtype=np.float64))

    def time(self, t: float) -> float:
        return float(self.time_part(t))

    def nodes(self, traj: Trajectory) -> np.ndarray:
        """phi at every cell center and time node, shape (n_steps + 1, m)."""
        psi = self.space(traj.grid.centers)
        return np.outer([self.time(t) for t in traj.times], psi)

    def slab_increments(self, traj: Trajectory) -> np.ndarray:
        """Row k-1 holds psi times the integral of theta' over slab k."""
        psi = self.space(traj.grid.centers)
        times = traj.times
        increments = []
        for t0, t1 in zip(times[:-1], times[1:]):
            mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
            samples = [self.time_derivative(mid + half * node) for node in _GAUSS_NODES]
            increments.append(half * float(np.dot(_GAUSS_WEIGHTS, samples)))
        return np.outer(increments, psi)

    @classmethod
    def zero(cls) -> "TestFunction":
        return cls("zero", Polynomial([0.0]), lambda t: 1.0, lambda t: 0.0, True)

    @classmethod
    def family(cls, domain: Domain, t_end: float) -> list["TestFunction"]:
        """The 3 x 3 product family: q in {1, x, x^2} against three time profiles."""
        space = {
            "bump": Polynomial([1.0]),
            "x_bump": Polynomial([0.0, 1.0]),
            "x2_bump": Polynomial([0.0, 0.0, 1.0]),
        }
        time = {
            "linear": (lambda t: 1.0 - t / t_end, lambda t: -1.0 / t_end, True),
            "quadratic": (
                lambda t: (1.0 - t / t_end) ** 2,
                lambda t: -2.0 * (1.0 - t / t_end) / t_end,
                True,
            ),
            "cosine": (
                lambda t: np.cos(0.5 * np.pi * t / t_end),
                lambda t: -0.5 * np.pi / t_end * np.sin(0.5 * np.pi * t / t_end),
                False,
            ),
        }
        return [
            cls(f"{s_name}*{t_name}", _normalized_bump(domain, q), th, dth, vanishes)
            for s_name, q in space.items()
            for t_name, (th, dth, vanishes) in time.items()
        ]


# --- Report ---


class Verdict(Enum):
    PASS = "pass"
    FAIL = "fail"


@dataclass(frozen=True)
class DiagnosticEntry:
    name: str
    value: float
    bound: Optional[float]
    verdict: Verdict
    context: str = ""

    @classmethod
    def make(cls, name: str, value: float, bound: Optional[float] = None, context: str = "") -> "DiagnosticEntry":
        """Entry whose verdict is pass iff value <= bound (always pass without a bound)."""
        ok = bound is None or value <= bound
        return cls(name, float(value), bound, Verdict.PASS if ok else Verdict.FAIL, context)


@dataclass
class DiagnosticsReport:
    entries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, entry: DiagnosticEntry) -> None:
        self.entries.append(entry)

    @property
    def passed(self) -> bool:
        return all(entry.verdict is Verdict.PASS for entry in self.entries)

    def failures(self) -> list:
        return [entry for entry in self.entries if entry.verdict is Verdict.FAIL]

    def to_csv(self, path: Path) -> None:
        rows = [
            [
                entry.name,
                format_float(entry.value),
                "" if entry.bound is None else format_float(entry.bound),
                entry.verdict.value,
            ]
            for entry in self.entries
        ]
        write_rows(path, ["name", "value", "bound", "verdict"], rows)

    def summary(self) -> str:
        lines = [f"{key}: {value}" for key, value in self.metadata.items()]
        for entry in self.entries:
            bound = "-" if entry.bound is None else f"{entry.bound:.3e}"
            line = f"[{entry.verdict.value.upper()}] {entry.name}: {entry.value:.6e} (bound {bound})"
            if entry.context:
                line += f"  {entry.context}"
            lines.append(line)
        failed = len(self.failures())
        lines.append(f"{len(self.entries) - failed}/{len(self.entries)} checks passed")
        return "\n".join(lines)


# --- Checks ---


def truncation_energy_check(
    traj: Trajectory,
    op: NonlocalOperator,
    k: float,
    f_l1: float,
    u0_l1: float,
    slack: float = TRUNCATION_SLACK,
) -> DiagnosticEntry:
    """(1/2) sum_k dt E(T_k u_k) against k (||f||_1 + ||u0||_1)."""
    if not k > 0:
        raise ValueError(f"truncation height must be positive, got {k}")
    dt = traj.time_grid.dt
    energy = sum(
        gagliardo_energy(op.kw, state.with_values(truncate(k, state.values)), op.p)
        for state in traj.states[1:]
    )
    bound = k * (f_l1 + u0_l1) * (1.0 + slack)
    return DiagnosticEntry.make(f"truncation_energy[k={k:g}]", 0.5 * dt * energy, bound)


def renormalized_tail(
    traj: Trajectory,
    kw: KernelWeights,
    p: float,
    heights: Sequence[float],
) -> list[tuple[float, float]]:
    """
    I_h = sum_k dt [ sum over pairs (u_i, u_j) in R_h of w_ij |u_i - u_j|^(p-1)
                     + 2 sum over exterior pairs (u_i, 0) in R_h of tau_i |u_i|^(p-1) ]

    with R_h = {h + 1 <= max(|u|, |v|) and (min(|u|, |v|) <= h or uv < 0)}.
    Interior-exterior pairs are ordered, so each counts twice.
    """
    heights = [float(h) for h in heights]
    if any(h <= 0 for h in heights) or any(b <= a for a, b in zip(heights, heights[1:])):
        raise ValueError(f"tail heights must be positive and increasing, got {heights}")
    if traj.grid != kw.grid:
        raise GridMismatchError("trajectory and kernel weights live on different grids")
    dt = traj.time_grid.dt
    results = []
    for h in heights:
        total = 0.0
        for state in traj.states[1:]:
            u = state.values
            mag = np.abs(u)
            upper = np.maximum.outer(mag, mag) >= h + 1.0
            lower = (np.minimum.outer(mag, mag) <= h) | (np.multiply.outer(u, u) < 0.0)
            diff = np.abs(np.subtract.outer(u, u)) ** (p - 1.0)
            total += float(np.sum(np.where(upper & lower, kw.w * diff, 0.0)))
            exterior = mag >= h + 1.0
            total += 2.0 * float(np.sum(kw.tau[exterior] * mag[exterior] ** (p - 1.0)))
        results.append((h, dt * total))
    return results


def _source_rows(traj: Trajectory, f: SourceSpec, subsamples: int) -> np.ndarray:
    return source_slabs(f, traj.time_grid, traj.grid, subsamples)


def _paired_sum(traj: Trajectory, op: NonlocalOperator, tests: np.ndarray) -> float:
    """sum_k dt <A(u_k), tests[k-1]>."""
    op.check(traj.states[0])
    dt = traj.time_grid.dt
    return dt * sum(
        pairing(op, state, state.with_values(test)) for state, test in zip(traj.states[1:], tests)
    )


def weak_residual(
    traj: Trajectory,
    op: NonlocalOperator,
    phi: TestFunction,
    f: SourceSpec,
    subsamples: int = DEFAULT_STEKLOV_SUBSAMPLES,
) -> float:
    """
    |h u_n.phi(T) - h u_0.phi(0) - sum_k h u_k.(slab integral of phi_t)
     + sum_k dt <A(u_k), phi(t_{k-1})> - sum_k dt h f_k.phi(t_{k-1})|

    Summation by parts turns this into sum_k dt h (optimizer residual)_k.phi(t_{k-1}).
    """
    h, dt = traj.grid.h, traj.time_grid.dt
    u = traj.as_array()
    nodes = phi.nodes(traj)
    increments = phi.slab_increments(traj)
    slabs = _source_rows(traj, f, subsamples)
    total = h * float(np.dot(u[-1], nodes[-1])) - h * float(np.dot(u[0], nodes[0]))
    total -= h * float(np.sum(u[1:] * increments))
    total += _paired_sum(traj, op, nodes[:-1])
    total -= dt * h * float(np.sum(slabs * nodes[:-1]))
    return abs(total)


def renormalized_residual(
    traj: Trajectory,
    op: NonlocalOperator,
    sigma: float,
    phi: TestFunction,
    f: SourceSpec,
    subsamples: int = DEFAULT_STEKLOV_SUBSAMPLES,
) -> float:
    """
    Renormalized identity tested with S_sigma'(u) phi:

        -h S(u_0).phi(0) - sum_k h S(u_k).(slab integral of phi_t)
        + sum_k dt <A(u_k), S'(u_k) phi(t_{k-1})> - sum_k dt h f_k.S'(u_k) phi(t_{k-1})

    The pairing carries the symmetrized interior sum and the exterior tail.
    For sigma above sup|u| this coincides with weak_residual.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not phi.vanishes_at_T:
        raise ValueError(f"test function {phi.name} must vanish at t = T")
    h, dt = traj.grid.h, traj.time_grid.dt
    u = traj.as_array()
    renorm = s_sigma(sigma, u)
    cutoff = s_sigma_prime(sigma, u[1:])
    nodes = phi.nodes(traj)
    increments = phi.slab_increments(traj)
    slabs = _source_rows(traj, f, subsamples)
    tests = cutoff * nodes[:-1]
    total = h * float(np.dot(renorm[-1], nodes[-1])) - h * float(np.dot(renorm[0], nodes[0]))
    total -= h * float(np.sum(renorm[1:] * increments))
    total += _paired_sum(traj, op, tests)
    total -= dt * h * float(np.sum(slabs * tests))
    return abs(total)


def entropy_residual(
    traj: Trajectory,
    op: NonlocalOperator,
    k: float,
    phi: TestFunction,
    f: SourceSpec,
    subsamples: int = DEFAULT_STEKLOV_SUBSAMPLES,
) -> float:
    """
    LHS - RHS of the entropy inequality tested with T_k(u_k - phi(t_k)):

        h sum Theta_k(u_n - phi(T)) - h sum Theta_k(u_0 - phi(0))
        + sum_k h (slab integral of phi_t).T_k(u_k - phi_k)
        + sum_k dt <A(u_k), T_k(u_k - phi_k)> - sum_k dt h f_k.T_k(u_k - phi_k)

    Signed. Nonpositive up to optimizer slack for implicit-scheme trajectories.
    """
    if not k > 0:
        raise ValueError(f"truncation height must be positive, got {k}")
    h, dt = traj.grid.h, traj.time_grid.dt
    gap = traj.as_array() - phi.nodes(traj)
    tests = truncate(k, gap[1:])
    increments = phi.slab_increments(traj)
    slabs = _source_rows(traj, f, subsamples)
    total = h * float(np.sum(theta(k, gap[-1]))) - h * float(np.sum(theta(k, gap[0])))
    total += h * float(np.sum(increments * tests))
    total += _paired_sum(traj, op, tests)
    total -= dt * h * float(np.sum(slabs * tests))
    return total


def numerical_dissipation(traj: Trajectory, phi: TestFunction) -> float:
    """(1/2) sum_k h |(u_k - phi_k) - (u_{k-1} - phi_{k-1})|^2, the backward-Euler dissipation."""
    gap = traj.as_array() - phi.nodes(traj)
    return 0.5 * traj.grid.h * float(np.sum(np.diff(gap, axis=0) ** 2))


def entropy_tolerance(slack: float = 0.0) -> float:
    if slack < 0:
        raise ValueError(f"entropy slack must be nonnegative, got {slack}")
    return ENTROPY_BASE_TOL + slack


def _require_same_mesh(run_u: Trajectory, run_v: Trajectory) -> None:
    if run_u.grid != run_v.grid or run_u.time_grid != run_v.time_grid:
        raise GridMismatchError(
            f"runs live on different meshes: {run_u.grid}/{run_u.time_grid} vs {run_v.grid}/{run_v.time_grid}"
        )


def comparison_check(run_u: Trajectory, run_v: Trajectory, name: str = "comparison") -> DiagnosticEntry:
    """max over steps and cells of (u - v)_+ for data ordered u below v."""
    _require_same_mesh(run_u, run_v)
    excess = float(np.max(run_u.as_array() - run_v.as_array()))
    return DiagnosticEntry.make(name, max(excess, 0.0), COMPARISON_TOL)


def uniqueness_gap(traj_u: Trajectory, traj_v: Trajectory) -> float:
    """max |u - v| between two independent computations of the same problem."""
    _require_same_mesh(traj_u, traj_v)
    return float(np.max(np.abs(traj_u.as_array() - traj_v.as_array())))


def poincare_report(kw: KernelWeights, p: float, samples: Sequence[GridFunction]) -> DiagnosticEntry:
    if not samples:
        raise ValueError("poincare_report needs at least one sample")
    ratio = max(poincare_ratio(sample, kw, p) for sample in samples)
    return DiagnosticEntry.make(
        "poincare_ratio", ratio, context=f"m={kw.grid.m}, samples={len(samples)}"
    )


def verify_trajectory(
    traj: Trajectory,
    op: NonlocalOperator,
    f: SourceSpec,
    heights: Sequence[float] = DEFAULT_TEST_HEIGHTS,
    entropy_slack: float = 0.0,
    subsamples: int = DEFAULT_STEKLOV_SUBSAMPLES,
    tail_heights: Sequence[float] = DEFAULT_TAIL_HEIGHTS,
    residual_bound: float = RESIDUAL_BOUND,
) -> DiagnosticsReport:
    """Run every trajectory check and collect the entries into one report."""
    grid, tg = traj.grid, traj.time_grid
    report = DiagnosticsReport(
        metadata={"m": grid.m, "n_steps": tg.n_steps, "alpha": op.kw.alpha, "p": op.p}
    )
    f_l1 = l1_source_norm(_source_rows(traj, f, subsamples), tg, grid)
    u0_l1 = norm(traj.states[0], NormMode.L1)
    for k in heights:
        report.add(truncation_energy_check(traj, op, k, f_l1, u0_l1))

    sup_u = max((float(np.max(np.abs(s.values))) for s in traj.states[1:]), default=0.0)
    for h, value in renormalized_tail(traj, op.kw, op.p, tail_heights):
        report.add(DiagnosticEntry.make(f"renormalized_tail[h={h:g}]", value, 0.0 if h >= sup_u else None))

    tolerance = entropy_tolerance(entropy_slack)
    family = TestFunction.family(grid.domain, tg.t_end)
    for phi in family:
        for k in heights:
            report.add(
                DiagnosticEntry.make(
                    f"entropy[{phi.name},k={k:g}]",
                    entropy_residual(traj, op, k, phi, f, subsamples),
                    tolerance,
                )
            )
    sigma = traj.sup_abs() + 1.0
    for phi in (phi for phi in family if phi.vanishes_at_T):
        report.add(
            DiagnosticEntry.make(
                f"weak[{phi.name}]", weak_residual(traj, op, phi, f, subsamples), residual_bound
            )
        )
        report.add(
            DiagnosticEntry.make(
                f"renormalized[{phi.name}]",
                renormalized_residual(traj, op, sigma, phi, f, subsamples),
                residual_bound,
                context=f"sigma={sigma:g}",
            )
        )

    nonzero = [state for state in traj.states if np.any(state.values)]
    if nonzero:
        report.add(poincare_report(op.kw, op.p, nonzero))

    failed = len(report.failures())
    logger.info(f"Verification: {len(report.entries) - failed} passed, {failed} failed")
    return report
