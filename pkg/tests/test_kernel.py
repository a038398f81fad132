import numpy as np
import pytest
from scipy import integrate

from nonlocal_rothe.core import Domain, Grid, GridFunction, SolverConfig
from nonlocal_rothe.errors import ExponentError, KernelError
from nonlocal_rothe.kernel import (
    assemble,
    cell_pair_weight,
    cell_self_complement,
    cell_tail_parts,
    pair_weight_profile,
    poincare_ratio,
    quadrature_pair_weight,
    tail_weight,
)

ALPHAS = (0.3, 0.5, 0.8)
EXTERIOR_RADIUS = 1e6


def config_for(alpha, p=2.0):
    return SolverConfig(s=alpha / p, p=p)


def exterior_quadrature(grid, i, alpha):
    """
    Nested quadrature of the kernel over C_i x ([a - R, a] U [b, b + R]) plus
    the closed-form contribution from beyond radius R.
    """
    a, b = grid.domain.a, grid.domain.b
    lo, hi = grid.edges[i], grid.edges[i + 1]

    def side(x, gap):
        # y at distance e^z from x, z from log(gap) to log(gap + R)
        value, _ = integrate.quad(
            lambda z: np.exp(-alpha * z), np.log(gap), np.log(gap + EXTERIOR_RADIUS), epsabs=0.0, epsrel=1e-13
        )
        return value

    def inner(x):
        return side(x, x - a) + side(x, b - x)

    # QAGS extrapolation copes with the integrable (x - a)^-alpha singularity of the endpoint cells
    near, _ = integrate.quad(inner, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)

    def beyond(t0, t1):
        return (t1 ** (1 - alpha) - t0 ** (1 - alpha)) / (alpha * (1 - alpha))

    remainder = beyond(EXTERIOR_RADIUS + lo - a, EXTERIOR_RADIUS + hi - a) + beyond(
        EXTERIOR_RADIUS + b - hi, EXTERIOR_RADIUS + b - lo
    )
    return near + remainder


class TestClosedFormWeights:
    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_pair_weights_match_quadrature(self, alpha):
        grid = Grid.uniform(0.0, 1.0, 8)
        kw = assemble(grid, config_for(alpha))
        for i in range(grid.m):
            for j in range(grid.m):
                if i == j:
                    assert kw.w[i, j] == 0.0
                    continue
                expected = quadrature_pair_weight(grid.h, abs(i - j), alpha)
                assert kw.w[i, j] == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_tail_weights_match_exterior_quadrature(self, alpha):
        grid = Grid.uniform(0.0, 1.0, 8)
        kw = assemble(grid, config_for(alpha))
        for i in range(grid.m):
            assert kw.tau[i] == pytest.approx(exterior_quadrature(grid, i, alpha), rel=1e-8)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_partition_of_space(self, alpha):
        grid = Grid.uniform(-2.0, 3.0, 40)
        kw = assemble(grid, config_for(alpha))
        np.testing.assert_allclose(kw.row_totals(), cell_self_complement(grid.h, alpha), rtol=1e-11)

    def test_far_field_keeps_relative_accuracy(self):
        h, alpha = 1e-3, 0.3
        profile = pair_weight_profile(h, 5000, alpha)
        d = 4000
        # leading order of the second difference: h^(1-alpha) d^(-1-alpha)
        assert profile[d] == pytest.approx(h ** (1 - alpha) * d ** (-1 - alpha), rel=1e-5)
        assert np.all(np.diff(profile[1:]) < 0)

    def test_scalar_pair_weight(self):
        assert cell_pair_weight(0.1, 3, 0.5) == pytest.approx(pair_weight_profile(0.1, 4, 0.5)[3])
        assert cell_pair_weight(1.0, 1, 0.5) == pytest.approx(8.0 - 4.0 * np.sqrt(2.0), rel=1e-14)
        assert cell_pair_weight(1.0, 1, 0.5) == pytest.approx(2.3431, abs=1e-4)
        with pytest.raises(ValueError):
            cell_pair_weight(0.1, 0, 0.5)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_refinement_is_additive(self, alpha):
        # a coarse cell pair is the union of the fine cell pairs it contains
        levels = [assemble(Grid.uniform(0.0, 1.0, m), config_for(alpha)) for m in (8, 16, 32)]
        for coarse, fine in zip(levels, levels[1:]):
            m = coarse.grid.m
            merged = fine.w.reshape(m, 2, m, 2).sum(axis=(1, 3))
            off = ~np.eye(m, dtype=bool)
            np.testing.assert_allclose(merged[off], coarse.w[off], rtol=1e-11)
            np.testing.assert_allclose(fine.tau.reshape(m, 2).sum(axis=1), coarse.tau, rtol=1e-11)


class TestTails:
    def test_pointwise_tail(self):
        domain = Domain(0.0, 1.0)
        assert tail_weight(domain, 0.5, 0.5) == pytest.approx(2 * 0.5**-0.5 / 0.5)
        assert tail_weight(domain, 0.5, 0.8) == pytest.approx(4.3527, abs=1e-4)
        with pytest.raises(ValueError):
            tail_weight(domain, 1.0, 0.5)

    def test_cell_tails_integrate_pointwise_tail(self):
        grid = Grid.uniform(0.0, 2.0, 6)
        alpha = 0.6
        left, right = cell_tail_parts(grid, alpha)
        for i in range(1, grid.m - 1):
            expected, _ = integrate.quad(
                lambda x: tail_weight(grid.domain, x, alpha), grid.edges[i], grid.edges[i + 1], epsrel=1e-13
            )
            assert left[i] + right[i] == pytest.approx(expected, rel=1e-10)

    def test_tails_symmetric_and_largest_at_boundary(self):
        kw = assemble(Grid.uniform(0.0, 1.0, 16), config_for(0.5))
        np.testing.assert_allclose(kw.tau, kw.tau[::-1], rtol=1e-13)
        assert kw.tau[0] == kw.tau.max()


class TestAssembly:
    def test_toeplitz_structure(self):
        kw = assemble(Grid.uniform(0.0, 1.0, 12), config_for(0.4))
        for d in range(1, 12):
            diagonal = np.diagonal(kw.w, offset=d)
            np.testing.assert_array_equal(diagonal, diagonal[0])
        np.testing.assert_array_equal(kw.w, kw.w.T)
        assert kw.profile().shape == (11,)

    def test_exponent_error_when_ps_reaches_one(self):
        cfg = SolverConfig(s=0.6, p=2.0, strict_exponent_check=False)
        with pytest.raises(ExponentError, match="weights diverge"):
            assemble(Grid.uniform(0.0, 1.0, 8), cfg)

    def test_constant_kappa_scales_weights(self):
        grid = Grid.uniform(0.0, 1.0, 10)
        cfg = config_for(0.5)
        base = assemble(grid, cfg)
        modulated = assemble(grid, cfg, kappa=lambda x, y: np.full(np.broadcast(x, y).shape, 2.0), lam=2.0)
        np.testing.assert_allclose(modulated.w, 2.0 * base.w, rtol=1e-14)
        np.testing.assert_allclose(modulated.tau, 2.0 * base.tau, rtol=1e-14)
        scaled = base.scaled(2.0)
        np.testing.assert_allclose(scaled.w, modulated.w, rtol=1e-14)

    def test_varying_kappa_stays_within_ellipticity_bounds(self):
        grid = Grid.uniform(0.0, 1.0, 16)
        cfg = config_for(0.5)
        pure = assemble(grid, cfg)
        lam = 2.0
        modulated = assemble(grid, cfg, kappa=lambda x, y: 1.5 + 0.4 * np.cos(np.pi * (x + y)), lam=lam)
        assert not np.allclose(modulated.w, 1.5 * pure.w)
        assert np.all(modulated.w >= pure.w / lam) and np.all(modulated.w <= lam * pure.w)
        assert np.all(modulated.tau >= pure.tau / lam) and np.all(modulated.tau <= lam * pure.tau)

    def test_asymmetric_kappa_rejected(self):
        with pytest.raises(KernelError, match="symmetric"):
            assemble(Grid.uniform(0.0, 1.0, 8), config_for(0.5), kappa=lambda x, y: 1.0 + 0.1 * x, lam=2.0)

    def test_kappa_outside_ellipticity_bounds_rejected(self):
        with pytest.raises(KernelError, match="lambda"):
            assemble(Grid.uniform(0.0, 1.0, 8), config_for(0.5), kappa=lambda x, y: 3.0 + 0 * x * y, lam=2.0)

    def test_banded_mode_preserves_row_totals(self):
        grid = Grid.uniform(0.0, 1.0, 32)
        cfg = config_for(0.5)
        full = assemble(grid, cfg)
        banded = assemble(grid, cfg, bandwidth=4)
        assert np.count_nonzero(banded.w[0]) == 4
        np.testing.assert_allclose(banded.row_totals(), full.row_totals(), rtol=1e-12)

    def test_single_cell_grid(self):
        kw = assemble(Grid.uniform(0.0, 1.0, 1), config_for(0.5))
        assert kw.w.shape == (1, 1) and kw.w[0, 0] == 0.0
        assert kw.tau[0] == pytest.approx(cell_self_complement(1.0, 0.5))


class TestPoincare:
    def test_zero_field_is_rejected(self):
        kw = assemble(Grid.uniform(0.0, 1.0, 8), config_for(0.5))
        with pytest.raises(ValueError):
            poincare_ratio(GridFunction.zeros(kw.grid), kw, 2.0)

    def test_ratio_is_scale_invariant(self, rng):
        kw = assemble(Grid.uniform(0.0, 1.0, 16), config_for(0.6, p=3.0))
        u = GridFunction(kw.grid, rng.standard_normal(16))
        ratio = poincare_ratio(u, kw, 3.0)
        assert np.isfinite(ratio) and ratio > 0
        assert poincare_ratio(u.with_values(-7.5 * u.values), kw, 3.0) == pytest.approx(ratio, rel=1e-12)
        assert np.isfinite(poincare_ratio(GridFunction.constant(kw.grid, 1.0), kw, 3.0))

    @pytest.mark.parametrize("m", [16, 32, 64])
    def test_hat_functions_obey_tail_bound(self, m):
        # E(u) >= 2 sum tau_i |u_i|^p, so the ratio never exceeds h / (2 min tau)
        p = 2.0
        kw = assemble(Grid.uniform(0.0, 1.0, m), config_for(0.5, p=p))
        bound = kw.grid.h / (2.0 * kw.tau.min())
        ratios = []
        for center in np.linspace(0.1, 0.9, 9):
            for width in (0.05, 0.1, 0.25, 0.5):
                hat = GridFunction.sample(kw.grid, lambda x: np.maximum(0.0, 1.0 - np.abs(x - center) / width))
                if not np.any(hat.values):
                    continue
                ratios.append(poincare_ratio(hat, kw, p))
        assert len(ratios) > 30
        assert 0.0 < min(ratios) and max(ratios) <= bound * (1 + 1e-12)
        # the bound itself does not grow under refinement
        assert bound <= 1.0 / (2.0 * 2.0 * 2.0**0.5 / 0.5)
