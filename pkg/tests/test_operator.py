import numpy as np
import pytest

from nonlocal_rothe.core import Grid, GridFunction, truncate
from nonlocal_rothe.errors import GridMismatchError
from nonlocal_rothe.operator import (
    BLOCK_ROWS,
    apply,
    as_matrix,
    flux,
    flux_resolution,
    gagliardo_energy,
    hessian,
    monotonicity_gap,
    pairing,
    phi_p,
    phi_p_derivative,
)


def test_phi_p_is_finite_at_zero():
    t = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(phi_p(t, 1.5), [-np.sqrt(2.0), 0.0, np.sqrt(3.0)])
    np.testing.assert_allclose(phi_p(t, 2.0), t)
    assert np.all(np.isfinite(phi_p_derivative(np.zeros(3), 1.5, 0.0)))


def test_zero_and_constant_fields(make_operator):
    op, _ = make_operator(m=16)
    zero = GridFunction.zeros(op.grid)
    np.testing.assert_array_equal(apply(op, zero).values, np.zeros(16))
    assert gagliardo_energy(op.kw, zero, op.p) == 0.0
    # constants only see the exterior: A(c)_i = tau_i c / h for p = 2
    one = GridFunction.constant(op.grid, 1.0)
    np.testing.assert_allclose(apply(op, one).values, op.kw.tau / op.grid.h, rtol=1e-13)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_monotonicity_on_random_pairs(make_operator, rng, p):
    op, _ = make_operator(m=32, s=0.3, p=p)
    worst = np.inf
    for _ in range(200):
        u = GridFunction(op.grid, rng.standard_normal(32))
        v = GridFunction(op.grid, rng.standard_normal(32))
        worst = min(worst, monotonicity_gap(op, u, v))
    assert worst >= -1e-12


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_pairing_identities(make_operator, rng, p):
    op, _ = make_operator(m=20, s=0.3, p=p)
    u = GridFunction(op.grid, rng.standard_normal(20))
    v = GridFunction(op.grid, rng.standard_normal(20))
    h = op.grid.h
    assert pairing(op, u, v) == pytest.approx(h * np.dot(apply(op, u).values, v.values), rel=1e-11)
    assert pairing(op, u, u) == pytest.approx(0.5 * gagliardo_energy(op.kw, u, p), rel=1e-12)


@pytest.mark.parametrize("p", [1.5, 2.5])
def test_homogeneity(make_operator, rng, p):
    op, _ = make_operator(m=12, s=0.3, p=p)
    u = GridFunction(op.grid, rng.standard_normal(12))
    c = 3.0
    scaled = apply(op, u.with_values(c * u.values)).values
    np.testing.assert_allclose(scaled, c ** (p - 1) * apply(op, u).values, rtol=1e-12)
    assert gagliardo_energy(op.kw, u.with_values(c * u.values), p) == pytest.approx(
        c**p * gagliardo_energy(op.kw, u, p), rel=1e-12
    )


def test_linear_case_matrix(make_operator, rng):
    op, _ = make_operator(m=24, s=0.4, p=2.0)
    u = GridFunction(op.grid, rng.standard_normal(24))
    matrix = as_matrix(op)
    np.testing.assert_allclose(matrix, matrix.T, rtol=1e-14)
    np.testing.assert_allclose(matrix @ u.values, apply(op, u).values, rtol=1e-11, atol=1e-11)
    assert np.all(np.linalg.eigvalsh(matrix) > 0)


def test_as_matrix_rejects_nonlinear(make_operator):
    op, _ = make_operator(m=8, s=0.3, p=3.0)
    with pytest.raises(ValueError):
        as_matrix(op)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_hessian_matches_finite_differences(make_operator, rng, p):
    op, _ = make_operator(m=10, s=0.3, p=p)
    u = rng.standard_normal(10)
    jac = hessian(op, GridFunction(op.grid, u))
    step = 1e-6
    for j in range(10):
        e = np.zeros(10)
        e[j] = step
        column = (flux(op, u + e) - flux(op, u - e)) / (2 * step)
        np.testing.assert_allclose(jac[:, j], column, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(jac, jac.T, rtol=1e-13, atol=1e-13)


def test_block_rows_cover_large_grids(make_operator, rng):
    m = BLOCK_ROWS + 37
    op, _ = make_operator(m=m, s=0.3, p=2.0)
    u = GridFunction(op.grid, rng.standard_normal(m))
    np.testing.assert_allclose(apply(op, u).values, as_matrix(op) @ u.values, rtol=1e-10, atol=1e-9)


def test_grid_mismatch(make_operator):
    op, _ = make_operator(m=8)
    with pytest.raises(GridMismatchError):
        apply(op, GridFunction.zeros(Grid.uniform(0.0, 1.0, 9)))


def test_linear_case_is_linear(make_operator, rng):
    op, _ = make_operator(m=24, s=0.4, p=2.0)
    u = GridFunction(op.grid, rng.standard_normal(24))
    v = GridFunction(op.grid, rng.standard_normal(24))
    a, b = 2.5, -0.75
    combined = apply(op, u.with_values(a * u.values + b * v.values)).values
    np.testing.assert_allclose(combined, a * apply(op, u).values + b * apply(op, v).values, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_truncation_lowers_energy(make_operator, rng, p):
    op, _ = make_operator(m=20, s=0.3, p=p)
    for _ in range(20):
        u = GridFunction(op.grid, 3.0 * rng.standard_normal(20))
        energy = gagliardo_energy(op.kw, u, p)
        for k in (0.1, 0.5, 1.0, 2.0):
            truncated = u.with_values(truncate(k, u.values))
            assert gagliardo_energy(op.kw, truncated, p) <= energy * (1 + 1e-14)


@pytest.mark.parametrize("p", [1.2, 1.5, 3.0])
def test_flux_resolution_bounds_perturbations(make_operator, rng, p):
    op, _ = make_operator(m=12, s=0.3, p=p)
    u = rng.uniform(0.1, 2.0, 12)
    u[7] = u[3]
    bound = flux_resolution(op, u, 8.0)
    for _ in range(50):
        perturbed = u + rng.integers(-6, 7, 12) * np.spacing(u)
        assert np.all(np.abs(flux(op, perturbed) - flux(op, u)) <= bound + 1e-13)
    if p < 2:
        assert bound[3] > op.kw.w[3, 7] * phi_p(np.spacing(u[3]), p)
