import numpy as np
import pytest

from artifact.lattice import (Params, all_configurations, centered, decode, encode, mobility,
                              steady_profile)


def test_params_validation():
    with pytest.raises(ValueError):
        Params(1, 0.2, 0.8)
    with pytest.raises(ValueError):
        Params(4, 0.8, 0.2)
    with pytest.raises(ValueError):
        Params(4, 0.0, 0.5)
    p = Params(4, 0.2, 0.8)
    assert p.n_sites == 7
    assert p.sites[0] == -3 and p.sites[-1] == 3


def test_offsets_round_trip():
    p = Params(5, 0.3, 0.6)
    assert [p.offset(i) for i in p.sites] == list(range(p.n_sites))
    with pytest.raises(IndexError):
        p.offset(5)


def test_steady_profile_is_affine_and_hits_reservoirs():
    p = Params(6, 0.2, 0.8)
    prof = steady_profile(p)
    assert np.allclose(np.diff(prof.rho_bar, 2), 0)
    assert prof.rho(-1.0) == pytest.approx(0.2)
    assert prof.rho(1.0) == pytest.approx(0.8)
    assert prof.rho_prime == pytest.approx(0.3)
    assert np.allclose(prof.sigma_bar, mobility(prof.rho_bar))
    # chemical potential includes both reservoirs
    assert prof.lam.size == 2 * p.N + 1
    assert prof.lam[0] == pytest.approx(np.log(0.2 / 0.8))


def test_encode_decode():
    rng = np.random.default_rng(1)
    for _ in range(20):
        eta = rng.integers(0, 2, size=9)
        assert np.array_equal(decode(encode(eta), 9), eta)
    table = all_configurations(5)
    assert table.shape == (32, 5)
    assert all(encode(row) == c for c, row in enumerate(table))


def test_centered():
    p = Params(3, 0.5, 0.5)
    prof = steady_profile(p)
    eta = np.array([1, 0, 1, 1, 0])
    assert centered(eta, prof, -2) == pytest.approx(0.5)
    assert centered(eta, prof, 2) == pytest.approx(-0.5)
