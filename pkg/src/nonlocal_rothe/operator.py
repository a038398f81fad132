"""
Discrete fractional p-Laplacian on cell averages.

    A(u)_i = (1/h) [ sum_{j != i} w_ij phi_p(u_i - u_j) + tau_i phi_p(u_i) ]

with phi_p(t) = |t|^(p-2) t. The diagonal weight is zero, so no principal
value is needed. A(u) is a density: sum_i h A(u)_i v_i is the duality pairing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

import numpy as np

from .core import GridFunction
from .errors import GridMismatchError

if TYPE_CHECKING:
    from .core import SolverConfig
    from .kernel import KernelWeights

logger = logging.getLogger(__name__)

# Rows per block when forming pairwise differences; bounds temporaries to BLOCK_ROWS x m.
BLOCK_ROWS = 512


def phi_p(t: np.ndarray, p: float) -> np.ndarray:
    """|t|^(p-2) t, finite at t = 0 for every p > 1."""
    return np.sign(t) * np.abs(t) ** (p - 1.0)


def phi_p_derivative(t: np.ndarray, p: float, eps: float = 0.0) -> np.ndarray:
    """
    Derivative of phi_p used in the Newton Hessian.

    For p < 2 the derivative (p-1)|t|^(p-2) is unbounded at t = 0 and the
    eps-regularized flux (t^2 + eps^2)^((p-2)/2) t is differentiated instead.
    """
    if p >= 2.0:
        return (p - 1.0) * np.abs(t) ** (p - 2.0)
    eps = eps if eps > 0.0 else np.finfo(np.float64).eps
    t2 = t * t
    return (t2 + eps * eps) ** ((p - 4.0) / 2.0) * ((p - 1.0) * t2 + eps * eps)


def _row_blocks(m: int) -> Iterator[slice]:
    for start in range(0, m, BLOCK_ROWS):
        yield slice(start, min(start + BLOCK_ROWS, m))


@dataclass(frozen=True, eq=False)
class NonlocalOperator:
    """The discrete (-Delta)_p^s bound to assembled kernel weights."""

    kw: "KernelWeights"
    p: float
    eps: float = 0.0

    def __post_init__(self) -> None:
        if not self.p > 1.0:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")

    @classmethod
    def from_config(cls, kw: "KernelWeights", cfg: "SolverConfig") -> "NonlocalOperator":
        return cls(kw, cfg.p, cfg.regularization_eps)

    @property
    def grid(self):
        return self.kw.grid

    def check(self, *fields: GridFunction) -> None:
        for f in fields:
            if f.grid != self.kw.grid:
                raise GridMismatchError(
                    f"field on {f.grid} does not match kernel grid {self.kw.grid}"
                )


def flux(op: NonlocalOperator, u: np.ndarray) -> np.ndarray:
    """sum_j w_ij phi_p(u_i - u_j) + tau_i phi_p(u_i), i.e. h * A(u)."""
    w, tau, p = op.kw.w, op.kw.tau, op.p
    out = np.empty_like(u)
    for rows in _row_blocks(u.size):
        diffs = u[rows, None] - u[None, :]
        out[rows] = np.einsum("ij,ij->i", w[rows], phi_p(diffs, p))
    return out + tau * phi_p(u, p)


def _spread(t: np.ndarray, r: np.ndarray, p: float) -> np.ndarray:
    # range of phi_p over [t - r, t + r]
    a = np.abs(t)
    return phi_p(a + r, p) - phi_p(a - r, p)


def flux_resolution(op: NonlocalOperator, u: np.ndarray, ulps: float) -> np.ndarray:
    """
    Per-cell bound on how far flux(op, u) moves when every value u_i is
    perturbed by up to `ulps` units in its last place.

    For p < 2 the flux has infinite slope at coincident values, so this is
    the accuracy to which the gradient of a step objective can be resolved
    in double precision.
    """
    w, tau, p = op.kw.w, op.kw.tau, op.p
    r = ulps * np.spacing(np.abs(u))
    out = np.empty_like(u)
    for rows in _row_blocks(u.size):
        pair_r = r[rows, None] + r[None, :]
        out[rows] = np.einsum("ij,ij->i", w[rows], _spread(u[rows, None] - u[None, :], pair_r, p))
    return out + tau * _spread(u, r, p)


def apply(op: NonlocalOperator, u: GridFunction) -> GridFunction:
    """Cell-density image A(u)."""
    op.check(u)
    return u.with_values(flux(op, u.values) / op.kw.grid.h)


def gagliardo_energy(kw: "KernelWeights", u: GridFunction, p: float) -> float:
    """sum_{i != j} w_ij |u_i - u_j|^p + 2 sum_i tau_i |u_i|^p."""
    if u.grid != kw.grid:
        raise GridMismatchError(f"field on {u.grid} does not match kernel grid {kw.grid}")
    values = u.values
    total = 0.0
    for rows in _row_blocks(values.size):
        diffs = np.abs(values[rows, None] - values[None, :])
        total += float(np.einsum("ij,ij->", kw.w[rows], diffs**p))
    return total + 2.0 * float(np.dot(kw.tau, np.abs(values) ** p))


def pairing(op: NonlocalOperator, w: GridFunction, v: GridFunction) -> float:
    """
    <A(w), v> = 1/2 sum_{i != j} w_ij phi_p(w_i - w_j)(v_i - v_j) + sum_i tau_i phi_p(w_i) v_i.
    """
    op.check(w, v)
    a, b = w.values, v.values
    total = 0.0
    for rows in _row_blocks(a.size):
        pair_flux = phi_p(a[rows, None] - a[None, :], op.p)
        total += 0.5 * float(np.einsum("ij,ij->", op.kw.w[rows] * pair_flux, b[rows, None] - b[None, :]))
    return total + float(np.dot(op.kw.tau * phi_p(a, op.p), b))


def hessian(op: NonlocalOperator, u: GridFunction, eps: float = 0.0) -> np.ndarray:
    """Dense Jacobian of u -> h * A(u) with the eps-regularized flux derivative."""
    op.check(u)
    values = u.values
    coupling = op.kw.w * phi_p_derivative(values[:, None] - values[None, :], op.p, eps)
    jac = -coupling
    jac[np.diag_indices_from(jac)] = coupling.sum(axis=1) + op.kw.tau * phi_p_derivative(
        values, op.p, eps
    )
    return jac


def as_matrix(op: NonlocalOperator) -> np.ndarray:
    """Matrix of the linear operator A for p = 2."""
    if op.p != 2.0:
        raise ValueError(f"as_matrix is only defined for p = 2, got p = {op.p}")
    matrix = -np.array(op.kw.w)
    matrix[np.diag_indices_from(matrix)] = op.kw.w.sum(axis=1) + op.kw.tau
    return matrix / op.kw.grid.h


def monotonicity_gap(op: NonlocalOperator, u: GridFunction, v: GridFunction) -> float:
    """<A(u) - A(v), u - v>, nonnegative for every pair."""
    op.check(u, v)
    diff = u.values - v.values
    return float(np.dot(flux(op, u.values) - flux(op, v.values), diff))
