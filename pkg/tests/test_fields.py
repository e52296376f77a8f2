import numpy as np
import pytest

from artifact.dynamics import kmc_run, lattice_kernel, pi_value
from artifact.fields import KernelEstimate, lattice_jump, neumann_term, pi_field, regularity_functional, y_field
from artifact.fields import TestFunctionGrid as PhiGrid
from artifact.kernel_pde import k0_eval
from artifact.lattice import Params, steady_profile
from artifact.rng import stream

P = Params(5, 0.2, 0.8)
PROF = steady_profile(P)


def test_pi_field_agrees_with_dynamics(rng):
    phi = lambda x, y: np.cos(x - y) + x * y
    eta = rng.integers(0, 2, P.n_sites)
    assert pi_field(eta, phi, PROF) == pytest.approx(pi_value(eta, lattice_kernel(phi, P), PROF))
    grid = PhiGrid.from_callable(phi, P).symmetrized()
    assert pi_field(eta, grid, PROF) == pytest.approx(pi_field(eta, phi, PROF))


def test_test_function_symmetry_flag():
    with pytest.raises(ValueError):
        PhiGrid(np.arange(4.0).reshape(2, 2), symmetric=True)


def test_y_field_of_profile_is_zero():
    assert y_field(PROF.rho_bar, lambda x: 1 + x, PROF) == pytest.approx(0.0, abs=1e-14)
    eta = np.ones(P.n_sites)
    assert y_field(eta, 1.0, PROF) == pytest.approx(np.sum(1 - PROF.rho_bar) / np.sqrt(P.N))


def test_lattice_jump_of_k0():
    # k0 with rho' = 1 has a jump of 1 across the diagonal
    j = lattice_jump(lambda x, y: k0_eval(x, y, 1.0), P)
    assert np.allclose(j, 1.0)


def test_neumann_term_inputs():
    eta = np.array([1, 0, 1, 1, 0, 0, 1, 1, 0])
    eb = eta - PROF.rho_bar
    ref = 0.25 * np.sum(eb[:-1] * eb[1:]) * 0.09
    assert neumann_term(eta, 0.09, PROF) == pytest.approx(ref)
    assert neumann_term(eta, lambda x: 0.09 + 0 * x, PROF) == pytest.approx(ref)
    assert neumann_term(eta, np.full(9, 0.09), PROF) == pytest.approx(ref)
    with pytest.raises(ValueError):
        neumann_term(eta, np.ones(4), PROF)


def test_kernel_estimate_from_trajectory_matches_direct_average():
    traj = kmc_run(P, None, 4.0, stream(2), burn_in=0.5, log_events=True)
    est = KernelEstimate.from_trajectory(traj, n_batches=32)
    direct = KernelEstimate(PROF, traj.tracked)
    t = 0.0
    for config, dt in traj.intervals():
        lo, hi = max(t, traj.burn_in), t + dt
        if hi > lo:
            direct.accumulate_pairs(config, hi - lo)
        t += dt
    assert est.T == pytest.approx(direct.T)
    assert np.allclose(est.k_hat, direct.k_hat, atol=1e-9)
    assert np.all(np.isfinite(est.stderr))


def test_stderr_and_merge():
    est = KernelEstimate.from_values(PROF, np.eye(P.n_sites))
    assert np.all(np.isnan(est.stderr))
    both = est.merge(est)
    assert np.allclose(both.k_hat, est.k_hat)
    p, q = est.pairs(min_separation=4)
    assert np.all(q - p >= 4)


def test_regularity_functional_linear_in_kernel():
    phi = lambda x, y: np.sin(np.pi * (x + 1) / 2) * np.sin(np.pi * (y + 1) / 2)
    x = P.positions
    k = k0_eval(*np.meshgrid(x, x, indexing="ij"), 0.3)
    a = regularity_functional(KernelEstimate.from_values(PROF, k), phi)
    b = regularity_functional(KernelEstimate.from_values(PROF, 2 * k), phi)
    assert b == pytest.approx(2 * a)
    assert regularity_functional(KernelEstimate.from_values(PROF, 0 * k), phi) == 0.0


def test_kernel_csv(tmp_path):
    est = KernelEstimate.from_values(PROF, np.ones((P.n_sites, P.n_sites)))
    path = est.write_csv(tmp_path / "k.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ") and "units:" in lines[0]
    assert lines[1] == "x,y,k_hat,stderr"
    assert len(lines) == 2 + P.n_sites * (P.n_sites - 1) // 2
