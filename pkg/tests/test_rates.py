import numpy as np
import pytest

from artifact.basis import SineBasis
from artifact.dynamics import MeasureVector, build_generator, invariant_measure
from artifact.kernel_pde import TriangleGrid, k0_grid, solve_euler_lagrange
from artifact.lattice import Params, steady_profile
from artifact.rates import (AdmissibilityError, correlation_dv, density_dv, dv_edge_sum,
                            dv_reversible, dv_variational, eval_Jh, jh_at_optimum, jh_weak,
                            product_measure, rate_sup)

PROFILE = steady_profile(Params(8, 0.2, 0.8))


@pytest.fixture(scope="module")
def biased():
    grid = TriangleGrid(48)
    basis = SineBasis(4)
    coeffs = basis.scale_into_ball([1.0, -0.4, 0.3, 0.2], 0.05)
    h = basis.bias(coeffs, grid, 0.05)
    k, _ = solve_euler_lagrange(h, PROFILE, grid)
    return grid, basis, coeffs, h, k


def test_four_term_jh_matches_weak_form(biased):
    grid, basis, coeffs, h, k = biased
    other = SineBasis(4).bias([0.02, 0.01, -0.01, 0.0], grid)
    for kernel in (k, k0_grid(grid, 0.3)):
        assert eval_Jh(kernel, other, PROFILE, grid).total == pytest.approx(
            jh_weak(kernel, other, PROFILE, grid), abs=1e-14)


def test_rate_sup_recovers_bias(biased):
    grid, basis, coeffs, h, k = biased
    rep = rate_sup(k, basis, PROFILE, grid, eps=0.05)
    assert np.max(np.abs(rep.coeffs - coeffs)) < 1e-6
    assert rep.value == pytest.approx(jh_at_optimum(k, h, PROFILE, grid), abs=1e-12)
    assert rep.in_ball
    assert rep.value > 0


def test_rate_sup_vanishes_at_k0():
    grid = TriangleGrid(32)
    rep = rate_sup(k0_grid(grid, 0.3), SineBasis(6), PROFILE, grid)
    assert abs(rep.value) < 1e-12
    assert np.max(np.abs(rep.coeffs)) < 1e-10


def test_rate_sup_rejects_inadmissible_kernel():
    grid = TriangleGrid(16)
    with pytest.raises(AdmissibilityError):
        rate_sup(-10 * np.ones((17, 17)), SineBasis(2), PROFILE, grid)


def test_dv_forms_agree_reversible():
    p = Params(2, 0.5, 0.5)
    gen = build_generator(p)
    rng = np.random.default_rng(4)
    for _ in range(3):
        mu = MeasureVector(rng.dirichlet(np.ones(8)), p)
        a = dv_reversible(mu, p)
        assert dv_edge_sum(mu, p) == pytest.approx(a, rel=1e-12)
        assert dv_variational(mu, gen, restarts=3) == pytest.approx(a, abs=1e-8)
    assert dv_reversible(product_measure(p), p) == pytest.approx(0.0, abs=1e-14)


def test_dv_of_invariant_measure_non_reversible():
    p = Params(2, 0.2, 0.7)
    gen = build_generator(p)
    assert dv_variational(invariant_measure(gen), gen, restarts=2) < 1e-8
    with pytest.raises(ValueError):
        dv_reversible(invariant_measure(gen), p)


def test_density_dv_scales_like_n():
    bump = lambda x: 0.5 + 0.2 * np.exp(-4 * x ** 2) * (1 - x ** 2)
    p = Params(200, 0.5, 0.5)
    ex = density_dv(bump, p, "exact") / p.N
    co = density_dv(bump, p, "continuum") / p.N
    assert ex == pytest.approx(co, rel=1e-3)
    assert density_dv(lambda x: 0.5 + 0 * x, p, "exact") == 0.0
    with pytest.raises(ValueError):
        density_dv(bump, p, "other")


def test_correlation_dv_small_n_and_continuum():
    psi = lambda x: np.where(x < 0, np.sin(np.pi * (x + 1)) ** 2, 0.0)
    phi = lambda x, y: 0.05 * (psi(x) * psi(-y) + psi(-x) * psi(y))
    co = correlation_dv(phi, 0.5, Params(4, 0.5, 0.5), "continuum")
    assert co > 0
    vals = [correlation_dv(phi, 0.5, Params(N, 0.5, 0.5), "exact")[0] for N in (4, 5, 6)]
    # finite-size gap closes monotonically
    assert vals[0] < vals[1] < vals[2] < co
    # a zero test function costs nothing
    assert correlation_dv(lambda x, y: 0 * x, 0.5, Params(3, 0.5, 0.5), "exact")[0] == 0.0
