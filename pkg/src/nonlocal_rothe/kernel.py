"""
Discrete realization of the measure dnu = dx dy / |x-y|^(1+alpha) on a 1-D grid.

Interior cell pairs get the exact double integral of the kernel over the two
cells, the exterior gets the exact integral of the pointwise tail over each
cell. Both come from closed-form antiderivatives, so no principal value or
singular quadrature is involved.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.linalg import toeplitz

from .core import Domain, Grid, GridFunction, NormMode, SolverConfig, norm
from .errors import ExponentError, KernelError
from .operator import gagliardo_energy

logger = logging.getLogger(__name__)

KappaFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Relative tolerance for the kappa symmetry and bound checks.
KAPPA_TOL = 1e-12


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ExponentError(
            f"alpha = p*s = {alpha:g}: weights diverge, requires ps < N (N = 1)"
        )


def _phi(t: np.ndarray, alpha: float) -> np.ndarray:
    """Second antiderivative of |t|^-(1+alpha), vanishing at t = 0."""
    return np.power(t, 1.0 - alpha) / (alpha * (alpha - 1.0))


def _psi(t: np.ndarray, alpha: float) -> np.ndarray:
    """Antiderivative in x of the one-sided tail t^-alpha / alpha, vanishing at 0."""
    return np.power(t, 1.0 - alpha) / (alpha * (1.0 - alpha))


def cell_pair_weight(h: float, d: int, alpha: float) -> float:
    """
    Exact integral of |x-y|^-(1+alpha) over two cells of width h whose
    centers are d*h apart.

    Returns Phi((d+1)h) - 2 Phi(dh) + Phi((d-1)h) with
    Phi(t) = t^(1-alpha) / (alpha (alpha - 1)).
    """
    _check_alpha(alpha)
    if int(d) != d or d < 1:
        raise ValueError(f"cell distance must be a positive integer, got {d}")
    if not h > 0:
        raise ValueError(f"cell width must be positive, got {h}")
    return float(pair_weight_profile(h, int(d) + 1, alpha)[int(d)])


def pair_weight_profile(h: float, m: int, alpha: float) -> np.ndarray:
    """
    Weights w(d) for d = 0..m-1, w(0) = 0.

    For d >= 2 the second difference is written through expm1/log1p so the
    far field does not lose digits to cancellation.
    """
    _check_alpha(alpha)
    profile = np.zeros(m, dtype=np.float64)
    if m < 2:
        return profile
    profile[1] = _phi(2.0 * h, alpha) - 2.0 * _phi(h, alpha)
    if m > 2:
        d = np.arange(2, m, dtype=np.float64)
        expo = 1.0 - alpha
        ahead = np.expm1(expo * np.log1p(1.0 / d))
        behind = np.expm1(expo * np.log1p(-1.0 / d))
        profile[2:] = _phi(d * h, alpha) * (ahead + behind)
    return profile


def tail_weight(domain: Domain, x: float, alpha: float) -> float:
    """Integral of |x-y|^-(1+alpha) over y outside the domain."""
    _check_alpha(alpha)
    if not domain.contains(x):
        raise ValueError(f"tail_weight needs x strictly inside {domain}, got {x}")
    return float(((x - domain.a) ** -alpha + (domain.b - x) ** -alpha) / alpha)


def cell_tail_parts(grid: Grid, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell exterior integrals toward the left and toward the right endpoint."""
    _check_alpha(alpha)
    a, b = grid.domain.a, grid.domain.b
    edges = grid.edges
    left = _psi(edges[1:] - a, alpha) - _psi(edges[:-1] - a, alpha)
    right = _psi(b - edges[:-1], alpha) - _psi(b - edges[1:], alpha)
    return left, right


def cell_self_complement(h: float, alpha: float) -> float:
    """Integral of the kernel over C_i x (R minus C_i) for a cell of width h."""
    _check_alpha(alpha)
    return float(2.0 * _psi(h, alpha))


def _far_field_remainder(h: float, alpha: float, reach: np.ndarray, bandwidth: int) -> np.ndarray:
    """Telescoped sum of w(d) for d = bandwidth+1..reach (zero where reach <= bandwidth)."""
    reach = np.asarray(reach, dtype=np.float64)
    total = (
        _phi((reach + 1.0) * h, alpha)
        - _phi(reach * h, alpha)
        - _phi((bandwidth + 1.0) * h, alpha)
        + _phi(bandwidth * h, alpha)
    )
    return np.where(reach > bandwidth, total, 0.0)


def quadrature_pair_weight(h: float, d: int, alpha: float) -> float:
    """
    Reference value of a cell-pair weight by adaptive quadrature.

    The inner integral over y is done analytically, the outer one by
    scipy.integrate.quad with the endpoint singularity flagged through an
    algebraic weight for adjacent cells.
    """
    _check_alpha(alpha)
    lo, hi = d * h, (d + 1) * h

    def inner(x: float) -> float:
        # y in [lo, hi], x in [0, h]; integral of (y-x)^-(1+alpha) dy
        return ((lo - x) ** -alpha - (hi - x) ** -alpha) / alpha if lo - x > 0 else 0.0

    if d == 1:
        # (h - x)^-alpha singularity at x = h: split off the algebraic factor
        def regular(x: float) -> float:
            return (1.0 - ((h - x) / (2 * h - x)) ** alpha) / alpha

        value, _ = integrate.quad(
            regular, 0.0, h, weight="alg", wvar=(0.0, -alpha), epsabs=0.0, epsrel=1e-13
        )
        return float(value)
    value, _ = integrate.quad(inner, 0.0, h, epsabs=0.0, epsrel=1e-13)
    return float(value)


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """Assembled interaction weights w_ij and exterior tail weights tau_i."""

    grid: Grid
    alpha: float
    w: np.ndarray = field(repr=False)
    tau: np.ndarray = field(repr=False)
    lam: float = 1.0
    bandwidth: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("w", "tau"):
            values = np.array(getattr(self, name), dtype=np.float64)
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        m = self.grid.m
        if self.w.shape != (m, m) or self.tau.shape != (m,):
            raise ValueError(f"weights do not match a grid of {m} cells")

    def profile(self) -> np.ndarray:
        """Row-0 weights w(d) = w_0d for d = 1..m-1 (translation invariant when kappa is absent)."""
        return self.w[0, 1:].copy()

    def scaled(self, c: float) -> "KernelWeights":
        return KernelWeights(self.grid, self.alpha, c * self.w, c * self.tau, self.lam, self.bandwidth)

    def row_totals(self) -> np.ndarray:
        """sum_j w_ij + tau_i for every cell."""
        return self.w.sum(axis=1) + self.tau


def _apply_kappa(
    grid: Grid,
    w: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    kappa: KappaFunction,
    lam: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = grid.centers
    samples = np.asarray(kappa(c[:, None], c[None, :]), dtype=np.float64)
    samples = np.broadcast_to(samples, (grid.m, grid.m))
    scale = max(1.0, float(np.max(np.abs(samples))))
    asymmetry = float(np.max(np.abs(samples - samples.T)))
    if asymmetry > KAPPA_TOL * scale:
        raise KernelError(f"kappa is not symmetric (max |k(x,y) - k(y,x)| = {asymmetry:.3e})")
    to_left = np.broadcast_to(np.asarray(kappa(c, np.full_like(c, grid.domain.a)), dtype=np.float64), c.shape)
    to_right = np.broadcast_to(np.asarray(kappa(c, np.full_like(c, grid.domain.b)), dtype=np.float64), c.shape)
    lo, hi = (1.0 / lam) * (1.0 - KAPPA_TOL), lam * (1.0 + KAPPA_TOL)
    for label, values in (("interior", samples), ("left exterior", to_left), ("right exterior", to_right)):
        if np.any(values < lo) or np.any(values > hi):
            raise KernelError(
                f"kappa {label} samples leave [1/lambda, lambda] = [{1.0 / lam:g}, {lam:g}]: "
                f"range [{values.min():g}, {values.max():g}]"
            )
    return w * samples, left * to_left, right * to_right


def assemble(
    grid: Grid,
    cfg: SolverConfig,
    kappa: Optional[KappaFunction] = None,
    lam: float = 1.0,
    bandwidth: Optional[int] = None,
) -> KernelWeights:
    """
    Assemble KernelWeights for the kernel kappa(x,y) / |x-y|^(1+ps).

    Args:
        grid: uniform cell partition of the domain
        cfg: solver configuration providing s and p
        kappa: optional symmetric modulation with values in [1/lam, lam],
            sampled at cell-center pairs (and at the cell center against the
            nearest boundary point for the exterior tails)
        lam: ellipticity constant, >= 1
        bandwidth: when set, interactions farther than this many cells are
            dropped and their telescoped sum is folded into tau (benchmarking only)

    Returns:
        Immutable KernelWeights
    """
    alpha = cfg.alpha
    _check_alpha(alpha)
    if lam < 1.0:
        raise KernelError(f"ellipticity constant lambda must be >= 1, got {lam}")
    m, h = grid.m, grid.h

    w = toeplitz(pair_weight_profile(h, m, alpha))
    left, right = cell_tail_parts(grid, alpha)
    if kappa is not None:
        w, left, right = _apply_kappa(grid, w, left, right, kappa, lam)
    tau = left + right

    if bandwidth is not None:
        if bandwidth < 1:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        offsets = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
        far = offsets > bandwidth
        if kappa is None:
            idx = np.arange(m, dtype=np.float64)
            remainder = _far_field_remainder(h, alpha, idx, bandwidth) + _far_field_remainder(
                h, alpha, (m - 1) - idx, bandwidth
            )
        else:
            remainder = np.where(far, w, 0.0).sum(axis=1)
        w = np.where(far, 0.0, w)
        tau = tau + remainder

    logger.info(
        f"Assembled kernel weights: m={m}, alpha={alpha:g}, lambda={lam:g}, "
        f"kappa={'yes' if kappa is not None else 'no'}, bandwidth={bandwidth}"
    )
    return KernelWeights(grid, alpha, w, tau, lam, bandwidth)


def poincare_ratio(u: GridFunction, kw: KernelWeights, p: float) -> float:
    """||u||_p^p divided by the discrete Gagliardo energy of u."""
    if not np.any(u.values):
        raise ValueError("poincare_ratio is undefined for the zero field (0/0)")
    energy = gagliardo_energy(kw, u, p)
    return norm(u, NormMode.LP, p) ** p / energy
