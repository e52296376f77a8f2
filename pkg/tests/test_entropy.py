import numpy as np
import pytest

from artifact.dynamics import MeasureVector, build_generator, evolve_master, invariant_measure
from artifact.entropy import (adjoint_one, carre_du_champ, carre_du_champ_terms, default_times,
                              entropy_decay_experiment, entropy_production_check, g0_on_lattice,
                              lsi_estimate, reference_measure, relative_entropy, write_series_csv)
from artifact.lattice import Params
from artifact.rates import product_measure

P2 = Params(2, 0.2, 0.8)


def h_small(x, y):
    return 0.5 * np.sin(np.pi * (x + 1) / 2) * np.sin(np.pi * (y + 1) / 2)


def test_relative_entropy_basics(rng):
    nu = product_measure(P2)
    assert relative_entropy(nu, nu) == 0.0
    delta = np.zeros(8)
    delta[5] = 1.0
    assert relative_entropy(delta, nu) == pytest.approx(-np.log(nu.probs[5]))
    zero = nu.probs.copy()
    zero[5] = 0.0
    assert relative_entropy(delta, zero) == np.inf
    for _ in range(20):
        a, b = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        assert relative_entropy(a, b) >= 0.5 * np.abs(a - b).sum() ** 2


def test_carre_du_champ_cases():
    nu = product_measure(P2).probs
    assert carre_du_champ(np.ones(8), P2, None, nu) == 0.0
    f = np.zeros(8)
    f[0] = 1 / nu[0]
    # state 0 (empty) leaves by the two boundary flips only
    expected = 0.25 * (nu[0] * (0.2 + 0.8) * f[0] + nu[1] * 0.8 * f[0] + nu[4] * 0.2 * f[0])
    assert carre_du_champ(f, P2, None, nu) == pytest.approx(expected)


def test_tilted_rates_dominate(rng):
    f = rng.uniform(0.1, 2.0, 8)
    g0 = carre_du_champ_terms(f, P2, None)
    gh = carre_du_champ_terms(f, P2, h_small)
    sup = np.max(np.abs(h_small(*np.meshgrid(P2.positions, P2.positions))))
    assert np.all(gh >= np.exp(-2 * sup) * g0 - 1e-15)


def test_adjoint_one():
    gen = build_generator(P2, h_small)
    inv = invariant_measure(gen)
    assert np.max(np.abs(adjoint_one(P2, h_small, inv))) < 1e-10
    for g in (None, g0_on_lattice(P2)):
        nu = reference_measure(P2, g)
        assert abs(nu.probs @ adjoint_one(P2, None, nu)) < 1e-12
    norms = []
    for N in (3, 4, 5):
        p = Params(N, 0.2, 0.8)
        nu = reference_measure(p, g0_on_lattice(p))
        L = adjoint_one(p, None, nu)
        norms.append(np.sqrt(nu.probs @ L ** 2))
    assert norms[0] > norms[1] > norms[2]


def test_production_inequality_n2():
    p = P2
    gen = build_generator(p)
    nu = reference_measure(p, g0_on_lattice(p))
    start = np.zeros(8)
    start[3] = 0.9
    start += 0.1 / 8
    t = default_times(5.0, 100)
    series = evolve_master(gen, MeasureVector(start, p), t)
    rep = entropy_production_check(gen, nu, series, t)
    assert rep.holds(1e-8)
    assert np.all(rep.H >= 0)


def test_invariant_reference_gives_monotone_entropy():
    gen = build_generator(P2)
    inv = invariant_measure(gen)
    start = np.full(8, 0.01)
    start[0] = 1 - 0.07
    t = np.linspace(0, 2, 60)
    rep = entropy_production_check(gen, inv, evolve_master(gen, MeasureVector(start, P2), t), t)
    assert np.all(np.diff(rep.H) <= 1e-12)
    assert np.all(rep.dH <= 1e-12)
    assert np.allclose(rep.source, 0, atol=1e-9)
    # stationary start: everything vanishes
    rep = entropy_production_check(gen, inv, [inv, inv], [0.0, 1.0])
    assert np.allclose([rep.H, rep.dH, rep.bound], 0, atol=1e-12)


def test_equilibrium_decay_to_zero():
    p = Params(3, 0.4, 0.4)
    s = entropy_decay_experiment(p, None, None, default_times(20.0, 40))
    assert s.H[0] == 0.0 and s.plateau < 1e-12


def test_plateau_trend_and_csv(tmp_path):
    out = []
    for N in (3, 4):
        p = Params(N, 0.2, 0.8)
        out.append(entropy_decay_experiment(p, None, None, default_times(30.0, 50), "zero"))
        out.append(entropy_decay_experiment(p, g0_on_lattice(p), None, default_times(30.0, 50), "g0"))
    z3, g3, z4, g4 = out
    assert g3.plateau < z3.plateau and g4.plateau < z4.plateau
    assert g4.plateau < g3.plateau
    assert g3.plateau == pytest.approx(g3.plateau_exact, rel=1e-3)
    path = write_series_csv(tmp_path / "e.csv", out)
    assert path.read_text().splitlines()[1] == "N,reference,t,H,production_bound,margin"


def test_lsi_estimate_positive():
    nu = product_measure(P2)
    assert lsi_estimate(P2, None, nu, n_trials=20) > 0
